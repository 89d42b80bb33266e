#![allow(dead_code)]

use approxprop::data::{synth_blobs, Dataset};
use approxprop::engine::{Engine, InputSpec, LayerSpec, Model, NetworkSpec, Unit};
use approxprop::prelayer::{ActivationStore, LayerParams};
use approxprop::train::{compute_gradients, softmax_xent};
use approxprop::{Real, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn image_input(c: usize, side: usize) -> InputSpec {
    InputSpec::Image {
        channels: c,
        height: side,
        width: side,
    }
}

/// Stem, `blocks` two-layer residual blocks at `c` channels, pooled head.
pub fn residual_conv(c: usize, side: usize, blocks: usize, classes: usize) -> NetworkSpec {
    NetworkSpec::uniform_resnet(image_input(3, side), c, blocks, 2, classes)
}

/// Stem, a block, a strided block that doubles channels, and a three-layer
/// block: every shortcut and block kind the engine supports.
pub fn mixed_conv(side: usize) -> NetworkSpec {
    NetworkSpec {
        input: image_input(3, side),
        body: vec![
            Unit::Layer(LayerSpec::conv(4, 3, 1, 1)),
            Unit::Block {
                layers: vec![LayerSpec::conv(4, 3, 1, 1), LayerSpec::conv(4, 3, 1, 1)],
            },
            Unit::Block {
                layers: vec![LayerSpec::conv(8, 4, 2, 1), LayerSpec::conv(8, 3, 1, 1)],
            },
            Unit::Block {
                layers: vec![
                    LayerSpec::conv(8, 1, 1, 0),
                    LayerSpec::conv(8, 3, 1, 1),
                    LayerSpec::conv(8, 1, 1, 0),
                ],
            },
        ],
        head: approxprop::engine::HeadSpec { classes: 5 },
    }
}

pub fn random_batch<T: Real>(shape: Shape, classes: usize, seed: u64) -> (Tensor<T>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-2.0..2.0)));
    let labels = (0..shape.batch()).map(|_| rng.random_range(0..classes)).collect();
    (x, labels)
}

/// Gives every `γ` and `β` a random nonzero value so gradients are generic.
pub fn perturb_affine<T: Real>(model: &mut Model<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in &mut model.layers {
        for g in &mut l.gamma {
            let v: f64 = rng.random_range(0.5..1.5);
            *g = T::from_f64(if rng.random_bool(0.2) { -v } else { v });
        }
        for b in &mut l.beta {
            *b = T::from_f64(rng.random_range(-0.5..0.5));
        }
    }
}

pub fn blobs(n: usize, classes: usize, features: usize, seed: u64) -> Dataset {
    synth_blobs(seed, n, classes, Shape::matrix(1, features), 4.0).unwrap()
}

/// Training-mode loss with the exact engine and no side effects on `model`,
/// plus the sign pattern of every pre-ReLU activation.
pub fn loss_of(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> (f64, Vec<bool>) {
    let mut m = model.clone();
    let (logits, tapes) = Engine::<f64>::exact().forward(&mut m, x).unwrap();
    let signs = tapes
        .layers
        .iter()
        .flat_map(|t| match &t.stored {
            ActivationStore::Full(a2) => a2.iter().map(|&v| v > 0.0).collect::<Vec<_>>(),
            ActivationStore::Quantized(_) => unreachable!("exact tapes are full precision"),
        })
        .collect();
    (softmax_xent(&logits, labels).unwrap().0, signs)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Param {
    Gamma,
    Beta,
    Weight,
}

fn slot(p: &mut LayerParams<f64>, which: Param) -> &mut Vec<f64> {
    match which {
        Param::Gamma => &mut p.gamma,
        Param::Beta => &mut p.beta,
        Param::Weight => &mut p.weight,
    }
}

/// Largest relative error `|a − f| / max(|a|, |f|, floor)` between analytic
/// gradients and fourth-order central differences, over every parameter.
///
/// The loss is only piecewise smooth, so each parameter's step starts at `h`
/// and is quartered until no ReLU input changes sign across the stencil.
pub fn finite_difference_check(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize], h: f64, floor: f64) -> FdResult {
    let mut analytic = model.clone();
    analytic.zero_grads();
    compute_gradients(&mut Engine::exact(), &mut analytic, x, labels).unwrap();
    let (_, base_signs) = loss_of(model, x, labels);
    let mut out = FdResult::default();
    for l in 0..model.depth() {
        for which in [Param::Gamma, Param::Beta, Param::Weight] {
            let grads = match which {
                Param::Gamma => &analytic.layers[l].grad_gamma,
                Param::Beta => &analytic.layers[l].grad_beta,
                Param::Weight => &analytic.layers[l].grad_weight,
            };
            for (i, &a) in grads.iter().enumerate() {
                let mut m = model.clone();
                let base = slot(&mut m.layers[l], which)[i];
                let mut step = h;
                let f = loop {
                    let mut smooth = true;
                    let mut at = |d: f64| {
                        slot(&mut m.layers[l], which)[i] = base + d;
                        let (loss, signs) = loss_of(&m, x, labels);
                        smooth &= signs == base_signs;
                        loss
                    };
                    let (d1, d2) = (at(step) - at(-step), at(2.0 * step) - at(-2.0 * step));
                    if smooth || step < 1e-9 {
                        break (8.0 * d1 - d2) / (12.0 * step);
                    }
                    out.reduced += 1;
                    step /= 4.0;
                };
                let rel = (a - f).abs() / a.abs().max(f.abs()).max(floor);
                if rel > out.worst {
                    out.worst = rel;
                    out.at = format!("layer {l} {which:?}[{i}]: analytic {a:e}, numeric {f:e}");
                }
                out.checked += 1;
            }
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct FdResult {
    pub worst: f64,
    pub checked: usize,
    /// Step reductions forced by sign changes.
    pub reduced: usize,
    /// Where the worst error occurred.
    pub at: String,
}
