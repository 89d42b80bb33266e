//! Gradient-error, sign-preservation, depth-sweep and quantizer diagnostics.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{Engine, InputSpec, Model, NetworkSpec};
use crate::error::{Error, Result};
use crate::par;
use crate::prelayer::{ActivationStore, Approximation, Mode};
use crate::quantizer::{self, Bits, QuantizedTape};
use crate::tensor::{Shape, Tensor};
use crate::train::{check_dataset, compute_gradients};
use crate::Real;

/// ChaCha stream for diagnostic batch selection.
const DIAG_STREAM: u64 = 3;

/// `count` batches of `size` distinct samples, drawn from a seeded stream.
pub fn diagnostic_batches(len: usize, size: usize, count: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if size == 0 || size > len {
        return Err(Error::Config(format!("batch size {size} does not fit {len} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DIAG_STREAM);
    Ok((0..count)
        .map(|_| index::sample(&mut rng, len, size).into_vec())
        .collect())
}

/// Per-layer weight gradients, widened to f64.
pub type LayerGrads = Vec<Vec<f64>>;

/// Weight gradients of every layer for one batch, from a copy of `model`.
pub fn weight_gradients<T: Real>(
    engine: &mut Engine<T>,
    model: &Model<T>,
    input: &Tensor<T>,
    labels: &[usize],
) -> Result<LayerGrads> {
    let mut m = model.clone();
    m.zero_grads();
    compute_gradients(engine, &mut m, input, labels)?;
    Ok(m.layers
        .iter()
        .map(|l| l.grad_weight.iter().map(|g| g.as_f64()).collect())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub layer: usize,
    pub bits: Option<u32>,
    pub batches: usize,
    pub snapshot: String,
    /// Mean over batches and weights of `(approx − exact)²`.
    pub approx_error: f64,
    /// Mean over weights of the across-batch variance of exact gradients.
    pub sgd_noise: f64,
    /// Empty when `sgd_noise` is zero.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub rows: Vec<GradRow>,
}

impl GradReport {
    /// Largest per-layer ratio; `None` if any layer's noise is degenerate.
    pub fn max_ratio(&self) -> Option<f64> {
        self.rows.iter().try_fold(0.0f64, |m, r| r.ratio.map(|x| m.max(x)))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path, &self.rows)
    }
}

pub(crate) fn write_rows<R: Serialize>(path: impl AsRef<Path>, rows: &[R]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Stable short fingerprint of a model's parameters (FNV-1a over their bits).
pub fn snapshot_id<T: Real>(model: &Model<T>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for l in &model.layers {
        for v in l.gamma.iter().chain(&l.beta).chain(&l.weight) {
            for b in v.as_f64().to_bits().to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    format!("{h:016x}")
}

/// Compares approximate against exact weight gradients over `batches`
/// seeded batches, and sets the difference against the batch-to-batch
/// spread of the exact gradients.
pub fn grad_error_report<T: Real>(
    model: &Model<T>,
    dataset: &Dataset,
    approx: Approximation,
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<GradReport> {
    if batches < 2 {
        return Err(Error::Config("the gradient report needs at least 2 batches".into()));
    }
    check_dataset(&model.network, dataset)?;
    let picks = diagnostic_batches(dataset.len(), batch_size, batches, seed)?;
    let init = || {
        (
            Engine::<T>::exact(),
            Engine::<T>::with_approximation(Mode::Approx, approx),
        )
    };
    let per_batch = par::map_indices_with(batches, init, |(exact, approximate), b| {
        let (x, labels) = dataset.batch::<T>(&picks[b]);
        let e = weight_gradients(exact, model, &x, &labels)?;
        let a = weight_gradients(approximate, model, &x, &labels)?;
        Ok((e, a))
    });
    let per_batch: Vec<(LayerGrads, LayerGrads)> = per_batch.into_iter().collect::<Result<_>>()?;

    let bits = match approx {
        Approximation::Quantize(b) => Some(b.get()),
        Approximation::Identity => None,
    };
    let snapshot = snapshot_id(model);
    let m = batches as f64;
    let rows = (0..model.depth())
        .map(|l| {
            let len = per_batch[0].0[l].len();
            let mut err = 0.0;
            let mut mean = vec![0.0; len];
            for (e, a) in &per_batch {
                err += e[l].iter().zip(&a[l]).map(|(x, y)| (y - x) * (y - x)).sum::<f64>() / len as f64;
                mean.iter_mut().zip(&e[l]).for_each(|(s, x)| *s += x);
            }
            mean.iter_mut().for_each(|s| *s /= m);
            let mut var = 0.0;
            for (e, _) in &per_batch {
                var += e[l].iter().zip(&mean).map(|(x, mu)| (x - mu) * (x - mu)).sum::<f64>();
            }
            let sgd_noise = var / ((m - 1.0) * len as f64);
            let approx_error = err / m;
            GradRow {
                layer: l,
                bits,
                batches,
                snapshot: snapshot.clone(),
                approx_error,
                sgd_noise,
                ratio: (sgd_noise > 0.0).then(|| approx_error / sgd_noise),
            }
        })
        .collect();
    Ok(GradReport { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignRow {
    pub layer: usize,
    pub entries: usize,
    pub clipped: usize,
    /// Fraction of all entries whose stored value has the exact sign.
    pub overall: f64,
    /// The same fraction over unclipped entries only (1 when there are none).
    pub unclipped: f64,
    /// The same fraction over clipped entries only (1 when there are none).
    pub clipped_fraction: f64,
}

/// Whether stored and exact pre-ReLU values fall on the same side of zero,
/// per approximated layer, for one batch.
pub fn sign_agreement<T: Real>(model: &Model<T>, input: &Tensor<T>, approx: Approximation) -> Result<Vec<SignRow>> {
    let mut m = model.clone();
    let (_, tapes) = Engine::<T>::exact().forward(&mut m, input)?;
    let head = m.network.head_index();
    tapes
        .layers
        .iter()
        .enumerate()
        .filter(|&(l, _)| l != head)
        .map(|(l, tape)| {
            let ActivationStore::Full(a2) = &tape.stored else {
                unreachable!("exact tapes are full precision")
            };
            let exact = Tensor::from_vec(tape.shape, a2.clone())?;
            let p = &model.layers[l];
            let (stored, clipped) = match approx {
                Approximation::Identity => (exact.clone(), vec![false; exact.numel()]),
                Approximation::Quantize(bits) => {
                    let (q, clipped) = QuantizedTape::quantize_tracking(&exact, &p.gamma, &p.beta, bits)?;
                    (q.dequantize::<T>(), clipped)
                }
            };
            let mut agree = [0usize; 2];
            let mut count = [0usize; 2];
            for ((&a, &s), &c) in exact.data().iter().zip(stored.data()).zip(&clipped) {
                let k = usize::from(c);
                count[k] += 1;
                agree[k] += usize::from((a >= T::zero()) == (s >= T::zero()));
            }
            let frac = |a: usize, n: usize| if n == 0 { 1.0 } else { a as f64 / n as f64 };
            Ok(SignRow {
                layer: l,
                entries: exact.numel(),
                clipped: count[1],
                overall: frac(agree[0] + agree[1], exact.numel()),
                unclipped: frac(agree[0], count[0]),
                clipped_fraction: frac(agree[1], count[1]),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub depth: usize,
    pub bits: u32,
    pub batches: usize,
    /// Mean relative L2 error of the first layer's weight gradient.
    pub proposed_error: f64,
    pub naive_error: f64,
}

fn relative_error(approx: &[f64], exact: &[f64]) -> f64 {
    let num: f64 = approx.iter().zip(exact).map(|(a, e)| (a - e) * (a - e)).sum();
    let den: f64 = exact.iter().map(|e| e * e).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

/// First-layer gradient error of the approx and naive engines on residual
/// chains of each depth, with freshly initialized weights.
pub fn depth_sweep<T: Real>(
    depths: &[usize],
    bits: Bits,
    dataset: &Dataset,
    channels: usize,
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if depths.is_empty() || depths.contains(&0) {
        return Err(Error::Config(
            "depths must be a nonempty list of positive integers".into(),
        ));
    }
    let picks = diagnostic_batches(dataset.len(), batch_size, batches, seed)?;
    let input = InputSpec::for_samples(dataset.batch_shape(1));
    depths
        .iter()
        .map(|&depth| {
            let net = NetworkSpec::residual_chain(input, channels, depth, dataset.classes).compile()?;
            let model = Model::<T>::init(net, seed)?;
            let init = || {
                (
                    Engine::<T>::exact(),
                    Engine::<T>::new(Mode::Approx, bits),
                    Engine::<T>::new(Mode::Naive, bits),
                )
            };
            let errs = par::map_indices_with(batches, init, |(e, a, n), b| {
                let (x, labels) = dataset.batch::<T>(&picks[b]);
                let ge = weight_gradients(e, &model, &x, &labels)?.swap_remove(0);
                let ga = weight_gradients(a, &model, &x, &labels)?.swap_remove(0);
                let gn = weight_gradients(n, &model, &x, &labels)?.swap_remove(0);
                Ok((relative_error(&ga, &ge), relative_error(&gn, &ge)))
            });
            let errs: Vec<(f64, f64)> = errs.into_iter().collect::<Result<_>>()?;
            let m = batches as f64;
            Ok(SweepRow {
                depth,
                bits: bits.get(),
                batches,
                proposed_error: errs.iter().map(|e| e.0).sum::<f64>() / m,
                naive_error: errs.iter().map(|e| e.1).sum::<f64>() / m,
            })
        })
        .collect()
}

pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn write_sign_csv(path: impl AsRef<Path>, rows: &[SignRow]) -> Result<()> {
    write_rows(path, rows)
}

/// Outcome of [`quantizer_check`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuantCheck {
    pub bits: u32,
    pub samples: usize,
    pub clipped: usize,
    /// Unclipped entries with `|Ã − A| > 3|γ|·2⁻ᴷ`.
    pub bound_violations: usize,
    /// Unclipped entries whose reconstruction lies across zero from `A`.
    pub sign_violations: usize,
    /// Largest unclipped `|Ã − A| / (3|γ|·2⁻ᴷ)`.
    pub worst_error_ratio: f64,
    /// Codes survive a pack/unpack round trip.
    pub packing_ok: bool,
}

impl QuantCheck {
    pub fn passed(&self) -> bool {
        self.bound_violations == 0 && self.sign_violations == 0 && self.packing_ok
    }
}

/// Channels in the synthetic quantizer check.
const CHECK_CHANNELS: usize = 16;

/// Quantizes `samples` random values spread over 16 channels with random
/// signed `γ` and random `β`, then checks the error bound and sign
/// preservation on every unclipped entry.
///
/// Values are drawn around each channel's `β` with a spread of `1.5|γ|`, so
/// a few percent fall outside `β ± 3|γ|` and get clipped.
pub fn quantizer_check(bits: Bits, samples: usize, seed: u64) -> Result<QuantCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma: Vec<f64> = (0..CHECK_CHANNELS)
        .map(|_| {
            let g = rng.random_range(0.01..4.0);
            if rng.random_bool(0.5) {
                -g
            } else {
                g
            }
        })
        .collect();
    let beta: Vec<f64> = (0..CHECK_CHANNELS).map(|_| rng.random_range(-3.0..3.0)).collect();
    let rows = samples.div_ceil(CHECK_CHANNELS);
    let unit = Normal::new(0.0, 1.5).map_err(|e| Error::Config(e.to_string()))?;
    let values: Vec<f64> = (0..rows * CHECK_CHANNELS)
        .map(|i| {
            let c = i % CHECK_CHANNELS;
            beta[c] + gamma[c].abs() * unit.sample(&mut rng)
        })
        .collect();
    let a = Tensor::from_vec(Shape::matrix(rows, CHECK_CHANNELS), values)?;
    let (tape, clipped) = QuantizedTape::quantize_tracking(&a, &gamma, &beta, bits)?;
    let back = tape.dequantize::<f64>();
    let mut check = QuantCheck {
        bits: bits.get(),
        samples: a.numel(),
        clipped: tape.clip_count(),
        bound_violations: 0,
        sign_violations: 0,
        worst_error_ratio: 0.0,
        packing_ok: quantizer::unpack_codes(tape.packed(), bits, a.numel())
            .and_then(|codes| quantizer::pack_codes(&codes, bits))
            .is_ok_and(|p| p == tape.packed()),
    };
    for (i, (&x, &y)) in a.data().iter().zip(back.data()).enumerate() {
        if clipped[i] {
            continue;
        }
        let bound = 3.0 * quantizer::gamma_magnitude(gamma[i % CHECK_CHANNELS]) / bits.levels() as f64;
        let ratio = (x - y).abs() / bound;
        check.worst_error_ratio = check.worst_error_ratio.max(ratio);
        check.bound_violations += usize::from(ratio > 1.0);
        check.sign_violations += usize::from((x >= 0.0) != (y >= 0.0));
    }
    Ok(check)
}
