mod common;

use approxprop::engine::{InputSpec, Model, NetworkSpec};
use approxprop::prelayer::Mode;
use approxprop::quantizer::Bits;
use approxprop::train::{evaluate, train, train_with, TrainConfig, TrainLog};
use approxprop::Error;
use common::blobs;

fn config(mode: Mode, iters: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(mode, Bits::new(4).unwrap(), 32, iters);
    cfg.lr_schedule = vec![(0, 0.02), (50, 0.1)];
    cfg
}

fn chain() -> NetworkSpec {
    NetworkSpec::residual_chain(InputSpec::Features { features: 10 }, 16, 9, 4)
}

#[test]
fn every_engine_learns_separable_blobs() {
    let ds = blobs(512, 4, 10, 1);
    for mode in [Mode::Exact, Mode::Approx, Mode::Naive] {
        let mut model = Model::<f32>::init(chain().compile().unwrap(), 2).unwrap();
        let before = evaluate(&model, &ds, 64).unwrap();
        let log = train(&mut model, &config(mode, 200), &ds).unwrap();
        assert!(
            log.tail_loss(20) < 0.5 * log.records[0].loss,
            "{mode}: {}",
            log.tail_loss(20)
        );
        let after = evaluate(&model, &ds, 64).unwrap();
        assert!(after < 0.1 && after < before, "{mode}: {before} -> {after}");
    }
}

#[test]
fn log_records_schedule_and_round_trips() {
    let ds = blobs(128, 4, 10, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    let mut cfg = config(Mode::Approx, 60);
    cfg.log = Some(path.clone());
    let mut seen = 0;
    let mut model = Model::<f32>::init(chain().compile().unwrap(), 2).unwrap();
    let log = train_with(&mut model, &cfg, &ds, |r, _| {
        assert_eq!(r.iter, seen);
        seen += 1;
    })
    .unwrap();
    assert_eq!(seen, 60);
    assert_eq!(log.records[49].lr, 0.02);
    assert_eq!(log.records[50].lr, 0.1);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some("iter,loss,lr,elapsed_ms"));
    assert_eq!(TrainLog::read_csv(&path).unwrap(), log);
}

#[test]
fn seeds_change_the_run_and_timing_can_be_disabled() {
    let ds = blobs(128, 4, 10, 1);
    let run = |seed: u64| {
        let mut cfg = config(Mode::Approx, 20);
        cfg.seed = seed;
        cfg.record_time = false;
        let mut model = Model::<f32>::init(chain().compile().unwrap(), seed).unwrap();
        train(&mut model, &cfg, &ds).unwrap()
    };
    let a = run(1);
    assert!(a.records.iter().all(|r| r.elapsed_ms == 0));
    assert_eq!(a, run(1));
    assert_ne!(a, run(2));
}

#[test]
fn divergence_and_mismatched_data_are_errors() {
    let ds = blobs(128, 4, 10, 1);
    let mut cfg = config(Mode::Exact, 50);
    cfg.lr_schedule = vec![(0, 1e12)];
    let mut model = Model::<f32>::init(chain().compile().unwrap(), 2).unwrap();
    assert!(matches!(train(&mut model, &cfg, &ds), Err(Error::State(_))));

    let other = blobs(128, 3, 10, 1);
    let mut model = Model::<f32>::init(chain().compile().unwrap(), 2).unwrap();
    assert!(matches!(
        train(&mut model, &config(Mode::Exact, 1), &other),
        Err(Error::Data(_))
    ));

    let mut bad = config(Mode::Exact, 1);
    bad.lr_schedule = vec![(5, 0.1)];
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}
