fn main() {
    std::process::exit(approxprop::cli::cli_main(std::env::args_os()));
}
