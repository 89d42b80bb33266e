//! Command-line front end. Exit status: 0 on success, 2 on a usage error,
//! 1 on a runtime failure.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::diag;
use crate::engine::{memory_report, Model};
use crate::error::{Error, Result};
use crate::prelayer::Mode;
use crate::quantizer::Bits;
use crate::train::{self, TrainConfig};

/// Floating-point type every subcommand trains and diagnoses in.
type Elem = f32;

#[derive(Debug, Parser)]
#[command(
    name = "approxprop",
    version,
    about = "Memory-efficient training with approximate activation tapes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network and write the per-iteration log as CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        engine: Option<Mode>,
        #[arg(long, value_parser = parse_bits)]
        bits: Option<Bits>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the configured iteration count.
        #[arg(long)]
        iters: Option<usize>,
        /// Write 0 in the elapsed_ms column so reruns give identical files.
        #[arg(long)]
        no_timing: bool,
    },
    /// Train exactly as configured, then compare approximate against exact
    /// weight gradients on fresh batches.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_bits)]
        bits: Bits,
        #[arg(long)]
        batches: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured warm-up iteration count.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the activation memory needed for one training step.
    Memreport {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_bits)]
        bits: Bits,
        #[arg(long)]
        batch: usize,
        #[arg(long, default_value = "approx")]
        engine: Mode,
        /// Also write the full per-layer report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Check the quantizer's error bound and sign preservation on random data.
    Quantcheck {
        #[arg(long, value_parser = parse_bits)]
        bits: Bits,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// First-layer gradient error of the naive and approximate engines on
    /// residual chains of increasing depth.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        depths: Vec<usize>,
        #[arg(long, value_parser = parse_bits, default_value = "8")]
        bits: Bits,
        #[arg(long)]
        batches: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV destination; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_bits(s: &str) -> std::result::Result<Bits, String> {
    let k: u32 = s.parse().map_err(|_| format!("`{s}` is not an integer"))?;
    Bits::new(k).map_err(|e| e.to_string())
}

/// Runs the tool on `args` (including the program name) and returns the
/// process exit status.
pub fn cli_main<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn model_for(cfg: &ExperimentConfig, seed: u64) -> Result<Model<Elem>> {
    Model::init(cfg.network_spec()?.compile()?, seed)
}

fn stdout_line(line: std::fmt::Arguments) -> Result<()> {
    writeln!(std::io::stdout(), "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            engine,
            bits,
            seed,
            out,
            iters,
            no_timing,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let mut tc: TrainConfig = cfg.train.clone();
            tc.mode = engine.unwrap_or(tc.mode);
            tc.bits = bits.unwrap_or(tc.bits);
            tc.seed = seed.unwrap_or(tc.seed);
            tc.total_iters = iters.unwrap_or(tc.total_iters);
            tc.log = out.or(tc.log);
            tc.record_time &= !no_timing;
            let dataset = cfg.dataset()?;
            let mut model = model_for(&cfg, tc.seed)?;
            let log = train::train(&mut model, &tc, &dataset)?;
            stdout_line(format_args!(
                "trained {} iterations ({} engine, K={}): final loss {:.6}",
                log.records.len(),
                tc.mode,
                tc.bits,
                log.tail_loss(50)
            ))
        }
        Command::Gradcheck {
            config,
            bits,
            batches,
            out,
            iters,
            seed,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let mut tc = cfg.train.clone();
            tc.mode = Mode::Exact;
            tc.log = None;
            tc.seed = seed.unwrap_or(tc.seed);
            tc.total_iters = iters.unwrap_or(tc.total_iters);
            let dataset = cfg.dataset()?;
            let mut model = model_for(&cfg, tc.seed)?;
            train::train(&mut model, &tc, &dataset)?;
            let m = batches.unwrap_or(cfg.diag.batches);
            let report = diag::grad_error_report(&model, &dataset, bits.into(), m, cfg.diag_batch_size(), tc.seed)?;
            report.write_csv(&out)?;
            match report.max_ratio() {
                Some(r) => stdout_line(format_args!("max error/noise ratio over {m} batches: {r:.6}")),
                None => stdout_line(format_args!(
                    "some layers have zero gradient noise; see {}",
                    out.display()
                )),
            }
        }
        Command::Memreport {
            config,
            bits,
            batch,
            engine,
            json,
        } => {
            if batch == 0 {
                return Err(Error::Config("batch must be at least 1".into()));
            }
            let cfg = ExperimentConfig::load(&config)?;
            let network = cfg.network_spec()?.compile()?;
            let r = memory_report(&network, batch, engine, bits.into(), size_of::<Elem>());
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&r).map_err(|source| Error::Json {
                    path: path.clone(),
                    source,
                })?;
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            stdout_line(format_args!(
                "layers {}  width {}  batch {}  engine {}  bits {}",
                r.layers.len(),
                r.width,
                r.batch,
                r.mode,
                r.bits.map_or("-".to_string(), |b| b.to_string())
            ))?;
            stdout_line(format_args!("tape_bytes {}", r.persistent_tape_bytes))?;
            stdout_line(format_args!("statistic_bytes {}", r.statistic_bytes))?;
            stdout_line(format_args!("buffer_bytes {}", r.transient_buffer_bytes))?;
            stdout_line(format_args!("parameter_bytes {}", r.parameter_bytes))?;
            stdout_line(format_args!("exact_tape_bytes {}", r.exact_tape_bytes))?;
            stdout_line(format_args!("ratio_vs_exact {:.6}", r.ratio_vs_exact))
        }
        Command::Quantcheck { bits, samples, seed } => {
            let c = diag::quantizer_check(bits, samples, seed)?;
            stdout_line(format_args!(
                "K={} samples {} clipped {} bound_violations {} sign_violations {} worst_error_ratio {:.6} packing {}",
                c.bits,
                c.samples,
                c.clipped,
                c.bound_violations,
                c.sign_violations,
                c.worst_error_ratio,
                if c.packing_ok { "ok" } else { "broken" }
            ))?;
            if c.passed() {
                Ok(())
            } else {
                Err(Error::State(format!("quantizer check failed for K={}", c.bits)))
            }
        }
        Command::Sweep {
            config,
            depths,
            bits,
            batches,
            seed,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dataset: Dataset = cfg.dataset()?;
            let seed = seed.unwrap_or(cfg.train.seed);
            let rows = diag::depth_sweep::<Elem>(
                &depths,
                bits,
                &dataset,
                cfg.diag.sweep_channels,
                batches.unwrap_or(cfg.diag.batches),
                cfg.diag_batch_size(),
                seed,
            )?;
            match out {
                Some(path) => diag::write_sweep_csv(&path, &rows),
                None => {
                    let mut w = csv::Writer::from_writer(std::io::stdout());
                    for r in &rows {
                        w.serialize(r)?;
                    }
                    w.flush().map_err(|e| Error::io("<stdout>", e))
                }
            }
        }
    }
}
