//! SGD training, evaluation and the training log.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_batch, Augment, Dataset};
use crate::engine::{Engine, Model, Network};
use crate::error::{dim_err, Error, Result};
use crate::prelayer::{LayerParams, Mode};
use crate::quantizer::Bits;
use crate::tensor::{Shape, Tensor};
use crate::Real;

/// ChaCha stream ids; each source of randomness reads its own stream.
const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM_BASE: u64 = 1 << 32;

fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    2e-4
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub bits: Bits,
    pub batch_size: usize,
    pub total_iters: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// `(start_iter, lr)` pairs; the first must start at 0.
    pub lr_schedule: Vec<(usize, f64)>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augment: Augment,
    #[serde(default)]
    pub log: Option<std::path::PathBuf>,
    /// When false the log's `elapsed_ms` column is written as 0, making the
    /// whole file reproducible.
    #[serde(default = "default_true")]
    pub record_time: bool,
}

impl TrainConfig {
    /// The schedule used for CIFAR: 0.01 for a 400-iteration warm start,
    /// then 0.1, dropped tenfold at 32k and 48k iterations.
    pub fn cifar_schedule() -> Vec<(usize, f64)> {
        vec![(0, 0.01), (400, 0.1), (32_000, 0.01), (48_000, 0.001)]
    }

    pub fn new(mode: Mode, bits: Bits, batch_size: usize, total_iters: usize) -> Self {
        TrainConfig {
            mode,
            bits,
            batch_size,
            total_iters,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            lr_schedule: Self::cifar_schedule(),
            seed: 0,
            augment: Augment::default(),
            log: None,
            record_time: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        match self.lr_schedule.first() {
            Some(&(0, _)) => {}
            _ => return Err(Error::Config("lr_schedule must start at iteration 0".into())),
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("lr_schedule iterations must increase strictly".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay ≥ 0".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|&&(start, _)| start <= iter)
            .last()
            .map_or(0.0, |&(_, lr)| lr)
    }

    pub fn engine<T: Real>(&self) -> Engine<T> {
        Engine::new(self.mode, self.bits)
    }
}

/// `v ← m·v + (g + wd·p)`, `p ← p − lr·v`, then clears the gradients.
/// Weight decay applies to the linear weights only.
pub fn sgd_step<T: Real>(model: &mut Model<T>, lr: f64, momentum: f64, weight_decay: f64) {
    fn update<T: Real>(p: &mut [T], g: &[T], v: &mut [T], lr: f64, m: f64, wd: f64) {
        for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            let nv = m * v.as_f64() + g.as_f64() + wd * p.as_f64();
            *v = T::from_f64(nv);
            *p = T::from_f64(p.as_f64() - lr * nv);
        }
    }
    for l in &mut model.layers {
        let LayerParams {
            gamma,
            beta,
            weight,
            grad_gamma,
            grad_beta,
            grad_weight,
            mom_gamma,
            mom_beta,
            mom_weight,
            ..
        } = l;
        update(weight, grad_weight, mom_weight, lr, momentum, weight_decay);
        update(gamma, grad_gamma, mom_gamma, lr, momentum, 0.0);
        update(beta, grad_beta, mom_beta, lr, momentum, 0.0);
        l.zero_grads();
    }
}

/// Mean softmax cross-entropy and its gradient `(softmax − onehot) / N`.
pub fn softmax_xent<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let Shape::Matrix { rows, cols } = logits.shape() else {
        return Err(dim_err!("logits must be rank 2, got {}", logits.shape()));
    };
    if labels.len() != rows {
        return Err(dim_err!("{} labels for {rows} rows", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
        return Err(Error::Data(format!("label {bad} outside {cols} classes")));
    }
    let mut grad = vec![T::zero(); rows * cols];
    let mut total = 0.0;
    for ((row, g), &label) in logits.data().chunks(cols).zip(grad.chunks_mut(cols)).zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total += sum.ln() - (row[label].as_f64() - max);
        for (j, (gv, e)) in g.iter_mut().zip(&exps).enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            *gv = T::from_f64((e / sum - onehot) / rows as f64);
        }
    }
    Ok((total / rows as f64, Tensor::from_vec(logits.shape(), grad)?))
}

/// One forward/backward pass; gradients accumulate into `model`.
pub fn compute_gradients<T: Real>(
    engine: &mut Engine<T>,
    model: &mut Model<T>,
    input: &Tensor<T>,
    labels: &[usize],
) -> Result<f64> {
    let (logits, tapes) = engine.forward(model, input)?;
    let (loss, grad) = softmax_xent(&logits, labels)?;
    engine.backward(model, tapes, &grad)?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean loss over the last `n` iterations.
    pub fn tail_loss(&self, n: usize) -> f64 {
        let tail = &self.records[self.records.len().saturating_sub(n)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path.as_ref())?;
        let records = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(TrainLog { records })
    }
}

/// Sample order for each epoch: a seeded shuffle, trailing partial batch
/// dropped.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    batch: usize,
    pos: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || batch > len {
            return Err(Error::Config(format!("batch size {batch} does not fit {len} samples")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SHUFFLE_STREAM);
        Ok(BatchSampler {
            rng,
            order: (0..len).collect(),
            batch,
            pos: len,
        })
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += self.batch;
        &self.order[self.pos - self.batch..self.pos]
    }
}

/// Random stream for augmenting the batch of iteration `iter`.
pub fn augment_rng(seed: u64, iter: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(AUGMENT_STREAM_BASE + iter as u64);
    rng
}

/// Trains `model` in place, returning (and optionally writing) the log.
pub fn train<T: Real>(model: &mut Model<T>, config: &TrainConfig, dataset: &Dataset) -> Result<TrainLog> {
    train_with(model, config, dataset, |_, _| {})
}

/// [`train`] with a callback after every iteration's record.
pub fn train_with<T: Real>(
    model: &mut Model<T>,
    config: &TrainConfig,
    dataset: &Dataset,
    mut on_iter: impl FnMut(&LogRecord, &Model<T>),
) -> Result<TrainLog> {
    config.validate()?;
    check_dataset(&model.network, dataset)?;
    let mut engine = config.engine::<T>();
    let mut sampler = BatchSampler::new(dataset.len(), config.batch_size, config.seed)?;
    let start = Instant::now();
    let mut log = TrainLog::default();
    for iter in 0..config.total_iters {
        let (mut x, labels) = dataset.batch::<T>(sampler.next_batch());
        if !config.augment.is_off() {
            augment_batch(&mut x, config.augment, &mut augment_rng(config.seed, iter))?;
        }
        let loss = compute_gradients(&mut engine, model, &x, &labels)?;
        if !loss.is_finite() {
            return Err(Error::State(format!("loss became {loss} at iteration {iter}")));
        }
        let lr = config.lr_at(iter);
        sgd_step(model, lr, config.momentum, config.weight_decay);
        let record = LogRecord {
            iter,
            loss,
            lr,
            elapsed_ms: if config.record_time {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        on_iter(&record, model);
        log.records.push(record);
    }
    if let Some(path) = &config.log {
        log.write_csv(path)?;
    }
    Ok(log)
}

pub(crate) fn check_dataset(network: &Network, dataset: &Dataset) -> Result<()> {
    if dataset.batch_shape(1) != network.input_shape(1) {
        return Err(dim_err!(
            "dataset samples {} do not match network input {}",
            dataset.batch_shape(1),
            network.input_shape(1)
        ));
    }
    if dataset.classes != network.classes() {
        return Err(Error::Data(format!(
            "dataset has {} classes, network {}",
            dataset.classes,
            network.classes()
        )));
    }
    Ok(())
}

/// Top-1 error with running normalization statistics, in batches of
/// `batch` samples (the last one may be smaller).
pub fn evaluate<T: Real>(model: &Model<T>, dataset: &Dataset, batch: usize) -> Result<f64> {
    check_dataset(&model.network, dataset)?;
    let mut engine = Engine::<T>::exact();
    let mut wrong = 0usize;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let (x, labels) = dataset.batch::<T>(chunk);
        let logits = engine.infer(model, &x)?;
        let classes = model.network.classes();
        for (row, &label) in logits.data().chunks(classes).zip(&labels) {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, v)| if v.as_f64() > row[b].as_f64() { j } else { b });
            wrong += usize::from(best != label);
        }
    }
    Ok(wrong as f64 / dataset.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_lookup() {
        let c = TrainConfig::new(Mode::Exact, Bits::new(8).unwrap(), 8, 100);
        assert_eq!(c.lr_at(200), 0.01);
        assert_eq!(c.lr_at(399), 0.01);
        assert_eq!(c.lr_at(1000), 0.1);
        assert_eq!(c.lr_at(40_000), 0.01);
        assert_eq!(c.lr_at(60_000), 0.001);
        let single = TrainConfig {
            lr_schedule: vec![(0, 0.5)],
            ..c.clone()
        };
        assert!((0..1000).all(|i| single.lr_at(i) == 0.5));
        let bad = TrainConfig {
            lr_schedule: vec![(0, 0.5), (0, 0.1)],
            ..c
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_json_defaults() {
        let c: TrainConfig = serde_json::from_str(
            r#"{"mode": "approx", "bits": 4, "batch_size": 16, "total_iters": 10, "lr_schedule": [[0, 0.1]]}"#,
        )
        .unwrap();
        assert_eq!((c.momentum, c.weight_decay, c.record_time), (0.9, 2e-4, true));
        assert_eq!(c.bits.get(), 4);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"mode": "approx", "bits": 9}"#).is_err());
    }

    #[test]
    fn uniform_logits_loss() {
        let logits = Tensor::<f64>::filled(Shape::matrix(3, 10), 0.7);
        let (loss, grad) = softmax_xent(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        for row in grad.data().chunks(10) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
        assert!(matches!(softmax_xent(&logits, &[0, 4, 10]), Err(Error::Data(_))));
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 3, 7).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch().to_vec()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert!(BatchSampler::new(2, 3, 0).is_err());
    }
}
