//! One pre-activation layer: batch norm, scale and bias, ReLU, linear.
//!
//! ```text
//! A1 = (A_in - μ) / sqrt(σ² + ε)        A2 = γ·A1 + β
//! A3 = max(0, A2)                         A_out = A3 × W
//! ```
//!
//! Only `A2` (exact or quantized) and `σ²` are kept for the backward pass;
//! `A3` and `A1` are rebuilt from them element-wise.
//!
//! The kernels here work on flat slices so the buffer-pool engine and the
//! allocating [`layer_forward`] / [`layer_backward`] wrappers run the same
//! arithmetic and agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::quantizer::{self, Bits, QuantizedTape};
use crate::real::Real;
use crate::tensor::{self, for_each_channel_run, ConvGeometry, Shape, Tensor};

pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
/// Weight of the current batch in the running batch-norm statistics.
pub const RUNNING_STAT_MOMENTUM: f64 = 0.1;

/// How activations are kept for the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Full-precision `A2` per layer.
    Exact,
    /// Exact forward pass; approximate `A2` stored for the backward pass.
    Approx,
    /// Approximate `A2` also feeds the forward pass.
    Naive,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Mode::Exact),
            "approx" => Ok(Mode::Approx),
            "naive" => Ok(Mode::Naive),
            other => Err(Error::Config(format!("unknown engine mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Exact => "exact",
            Mode::Approx => "approx",
            Mode::Naive => "naive",
        })
    }
}

/// The approximation applied to `A2` in approx and naive modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Approximation {
    Quantize(Bits),
    /// Keeps `A2` verbatim; the approximate code paths run unchanged.
    Identity,
}

impl From<Bits> for Approximation {
    fn from(b: Bits) -> Self {
        Approximation::Quantize(b)
    }
}

/// Linear transform that follows the ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Linear {
    /// `(N, inputs) × (inputs, outputs)`.
    Dense { inputs: usize, outputs: usize },
    /// Kernel `(Cout, Cin, kh, kw)`.
    Conv(ConvGeometry),
    /// Global average pooling folded into a dense map; weight `(channels, outputs)`.
    PoolDense {
        channels: usize,
        height: usize,
        width: usize,
        outputs: usize,
    },
}

impl Linear {
    pub fn in_shape(&self, batch: usize) -> Shape {
        match *self {
            Linear::Dense { inputs, .. } => Shape::matrix(batch, inputs),
            Linear::Conv(g) => Shape::image(batch, g.in_channels, g.in_h, g.in_w),
            Linear::PoolDense {
                channels,
                height,
                width,
                ..
            } => Shape::image(batch, channels, height, width),
        }
    }

    pub fn out_shape(&self, batch: usize) -> Shape {
        match *self {
            Linear::Dense { outputs, .. } | Linear::PoolDense { outputs, .. } => Shape::matrix(batch, outputs),
            Linear::Conv(g) => Shape::image(batch, g.out_channels, g.out_h, g.out_w),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_shape(1).channels()
    }

    pub fn weight_shape(&self) -> Shape {
        match *self {
            Linear::Dense { inputs, outputs } => Shape::matrix(inputs, outputs),
            Linear::Conv(g) => Shape::image(g.out_channels, g.in_channels, g.kernel_h, g.kernel_w),
            Linear::PoolDense { channels, outputs, .. } => Shape::matrix(channels, outputs),
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            Linear::Dense { inputs, .. } => inputs,
            Linear::Conv(g) => g.patch_len(),
            Linear::PoolDense { channels, .. } => channels,
        }
    }

    pub(crate) fn forward<T: Real>(&self, batch: usize, input: &[T], weight: &[T], out: &mut [T]) {
        match *self {
            Linear::Dense { inputs, outputs } => tensor::gemm(batch, inputs, outputs, input, weight, out),
            Linear::Conv(g) => tensor::conv_forward_slices(&g, input, weight, out),
            Linear::PoolDense { channels, outputs, .. } => {
                let pooled = self.pool(batch, input);
                tensor::gemm(batch, channels, outputs, &pooled, weight, out)
            }
        }
    }

    /// Overwrites `grad_weight` with the weight gradient.
    pub(crate) fn backward_weight<T: Real>(&self, batch: usize, input: &[T], grad_out: &[T], grad_weight: &mut [T]) {
        match *self {
            Linear::Dense { inputs, outputs } => {
                let xt = tensor::transpose(batch, inputs, input);
                tensor::gemm(inputs, batch, outputs, &xt, grad_out, grad_weight)
            }
            Linear::Conv(g) => tensor::conv_backward_kernel_slices(&g, input, grad_out, grad_weight),
            Linear::PoolDense { channels, outputs, .. } => {
                let pt = tensor::transpose(batch, channels, &self.pool(batch, input));
                tensor::gemm(channels, batch, outputs, &pt, grad_out, grad_weight)
            }
        }
    }

    /// Overwrites `grad_in` with the input gradient.
    pub(crate) fn backward_input<T: Real>(&self, batch: usize, weight: &[T], grad_out: &[T], grad_in: &mut [T]) {
        match *self {
            Linear::Dense { inputs, outputs } => {
                let wt = tensor::transpose(inputs, outputs, weight);
                tensor::gemm(batch, outputs, inputs, grad_out, &wt, grad_in)
            }
            Linear::Conv(g) => tensor::conv_backward_input_slices(&g, weight, grad_out, grad_in),
            Linear::PoolDense {
                channels,
                height,
                width,
                outputs,
            } => {
                let wt = tensor::transpose(channels, outputs, weight);
                let mut gp = vec![T::zero(); batch * channels];
                tensor::gemm(batch, outputs, channels, grad_out, &wt, &mut gp);
                let area = T::from_f64((height * width) as f64);
                for (run, &g) in grad_in.chunks_mut(height * width).zip(&gp) {
                    let v = g / area;
                    run.iter_mut().for_each(|x| *x = v);
                }
            }
        }
    }

    fn pool<T: Real>(&self, batch: usize, input: &[T]) -> Vec<T> {
        let Linear::PoolDense {
            channels,
            height,
            width,
            ..
        } = *self
        else {
            unreachable!()
        };
        let area = (height * width) as f64;
        input
            .chunks(height * width)
            .take(batch * channels)
            .map(|run| T::from_f64(run.iter().fold(0.0f64, |a, v| a + v.as_f64()) / area))
            .collect()
    }
}

/// Learnable state of one layer, with gradient and momentum slots.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub linear: Linear,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub weight: Vec<T>,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
    pub grad_weight: Vec<T>,
    pub mom_gamma: Vec<T>,
    pub mom_beta: Vec<T>,
    pub mom_weight: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub bn_epsilon: f64,
}

impl<T: Real> LayerParams<T> {
    /// `γ = 1`, `β = 0`, the given weights, zeroed gradients and momenta.
    pub fn new(linear: Linear, weight: Vec<T>) -> Result<Self> {
        if weight.len() != linear.weight_shape().numel() {
            return Err(dim_err!(
                "weight has {} values, {:?} needs {}",
                weight.len(),
                linear,
                linear.weight_shape().numel()
            ));
        }
        let c = linear.in_channels();
        let w = weight.len();
        Ok(LayerParams {
            linear,
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            weight,
            grad_gamma: vec![T::zero(); c],
            grad_beta: vec![T::zero(); c],
            grad_weight: vec![T::zero(); w],
            mom_gamma: vec![T::zero(); c],
            mom_beta: vec![T::zero(); c],
            mom_weight: vec![T::zero(); w],
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            bn_epsilon: DEFAULT_BN_EPSILON,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn zero_grads(&mut self) {
        for g in [&mut self.grad_gamma, &mut self.grad_beta, &mut self.grad_weight] {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len() + self.weight.len()
    }

    /// `γ` with its magnitude floored, keeping its sign.
    pub(crate) fn safe_gamma(&self) -> Vec<T> {
        self.gamma
            .iter()
            .map(|&g| {
                let m = quantizer::gamma_magnitude(g.as_f64());
                T::from_f64(if g.as_f64() < 0.0 { -m } else { m })
            })
            .collect()
    }
}

/// Stored pre-ReLU activations of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum ActivationStore<T> {
    Full(Vec<T>),
    Quantized(QuantizedTape),
}

/// What a layer keeps between its forward and backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTape<T> {
    pub mode: Mode,
    pub shape: Shape,
    pub stored: ActivationStore<T>,
    pub sigma2: Vec<T>,
}

impl<T: Real> LayerTape<T> {
    /// Stored `A2` value of flat element `i`.
    #[inline(always)]
    pub fn a2(&self, i: usize) -> T {
        match &self.stored {
            ActivationStore::Full(v) => v[i],
            ActivationStore::Quantized(q) => T::from_f64(q.value(i)),
        }
    }

    /// Stored `A2` values from flat index `start`, all in channel `ch`.
    fn decode_run(&self, start: usize, ch: usize, out: &mut [T]) {
        match &self.stored {
            ActivationStore::Full(v) => out.copy_from_slice(&v[start..start + out.len()]),
            ActivationStore::Quantized(q) => q.decode_run(start, ch, out),
        }
    }

    pub fn quantized(&self) -> Option<&QuantizedTape> {
        match &self.stored {
            ActivationStore::Quantized(q) => Some(q),
            ActivationStore::Full(_) => None,
        }
    }

    /// Bytes held by the activation store (full tensor, or codes plus constants).
    pub fn store_bytes(&self) -> usize {
        match &self.stored {
            ActivationStore::Full(v) => v.len() * T::BYTES,
            ActivationStore::Quantized(q) => q.byte_size(),
        }
    }

    pub fn sigma2_bytes(&self) -> usize {
        self.sigma2.len() * T::BYTES
    }
}

#[inline]
fn inv_std<T: Real>(sigma2: T, eps: f64) -> T {
    T::from_f64(1.0 / (sigma2.as_f64() + eps).sqrt())
}

/// Batch-norm, scale and bias in place: `buf` goes from `A_in` to `A2`.
///
/// Returns the batch mean and variance (the variance rounded to `T`).
pub(crate) fn normalize_in_place<T: Real>(shape: Shape, buf: &mut [T], p: &LayerParams<T>) -> (Vec<f64>, Vec<T>) {
    let (mean, var) = tensor::channel_moments_slice(shape, buf);
    let sigma2: Vec<T> = var.iter().map(|&v| T::from_f64(v)).collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();
    apply_normalization(shape, buf, &mean_t, &sigma2, p);
    (mean, sigma2)
}

fn apply_normalization<T: Real>(shape: Shape, buf: &mut [T], mean: &[T], var: &[T], p: &LayerParams<T>) {
    let inv: Vec<T> = var.iter().map(|&v| inv_std(v, p.bn_epsilon)).collect();
    let c = shape.channels();
    let s = shape.spatial();
    for (i, run) in buf.chunks_mut(s).enumerate() {
        let ch = i % c;
        let (m, is, g, b) = (mean[ch], inv[ch], p.gamma[ch], p.beta[ch]);
        for v in run.iter_mut() {
            *v = g * ((*v - m) * is) + b;
        }
    }
}

fn update_running_stats<T: Real>(p: &mut LayerParams<T>, mean: &[f64], sigma2: &[T]) {
    let keep = 1.0 - RUNNING_STAT_MOMENTUM;
    for ((rm, rv), (&m, &v)) in p
        .running_mean
        .iter_mut()
        .zip(p.running_var.iter_mut())
        .zip(mean.iter().zip(sigma2))
    {
        *rm = T::from_f64(keep * rm.as_f64() + RUNNING_STAT_MOMENTUM * m);
        *rv = T::from_f64(keep * rv.as_f64() + RUNNING_STAT_MOMENTUM * v.as_f64());
    }
}

fn relu_in_place<T: Real>(buf: &mut [T]) {
    for v in buf.iter_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

fn check_input<T: Real>(shape: Shape, p: &LayerParams<T>) -> Result<()> {
    let expect = p.linear.in_shape(shape.batch());
    if shape != expect {
        return Err(dim_err!("layer expects input {expect}, got {shape}"));
    }
    Ok(())
}

/// Training-time forward on buffers.
///
/// `buf` holds `A_in` and is left holding the `A3` fed to the linear
/// transform; `out` receives `A_out`. `mode` and `approx` pick the tape.
pub(crate) fn forward_buffers<T: Real>(
    shape: Shape,
    buf: &mut [T],
    out: &mut [T],
    p: &mut LayerParams<T>,
    mode: Mode,
    approx: Approximation,
) -> Result<LayerTape<T>> {
    check_input(shape, p)?;
    let (mean, sigma2) = normalize_in_place(shape, buf, p);
    update_running_stats(p, &mean, &sigma2);
    let stored = match (mode, approx) {
        (Mode::Exact, _) | (_, Approximation::Identity) => ActivationStore::Full(buf.to_vec()),
        (Mode::Approx, Approximation::Quantize(bits)) => ActivationStore::Quantized(QuantizedTape::quantize_slice(
            shape, buf, &p.gamma, &p.beta, bits, None,
        )?),
        (Mode::Naive, Approximation::Quantize(bits)) => {
            ActivationStore::Quantized(quantizer::round_trip_in_place(shape, buf, &p.gamma, &p.beta, bits)?)
        }
    };
    relu_in_place(buf);
    p.linear.forward(shape.batch(), buf, &p.weight, out);
    Ok(LayerTape {
        mode,
        shape,
        stored,
        sigma2,
    })
}

/// Evaluation forward using running statistics; `buf` is overwritten.
pub(crate) fn infer_buffers<T: Real>(shape: Shape, buf: &mut [T], out: &mut [T], p: &LayerParams<T>) -> Result<()> {
    check_input(shape, p)?;
    apply_normalization(shape, buf, &p.running_mean, &p.running_var, p);
    relu_in_place(buf);
    p.linear.forward(shape.batch(), buf, &p.weight, out);
    Ok(())
}

fn check_tape<T: Real>(tape: &LayerTape<T>, p: &LayerParams<T>) -> Result<()> {
    if tape.shape != p.linear.in_shape(tape.shape.batch()) || tape.sigma2.len() != p.channels() {
        return Err(Error::State(format!(
            "tape of shape {} does not belong to a layer with input {}",
            tape.shape,
            p.linear.in_shape(tape.shape.batch())
        )));
    }
    Ok(())
}

/// Fills `out` with the reconstructed `A3 = max(0, Ã2)`.
pub(crate) fn reconstruct_a3<T: Real>(tape: &LayerTape<T>, out: &mut [T]) {
    match &tape.stored {
        ActivationStore::Full(v) => out.copy_from_slice(v),
        ActivationStore::Quantized(q) => q.dequantize_into(out),
    }
    relu_in_place(out);
}

/// ReLU mask: zeroes gradient entries whose stored `A2` is not positive.
pub(crate) fn relu_mask<T: Real>(grad: &mut [T], a2: impl Fn(usize) -> T) {
    for (i, g) in grad.iter_mut().enumerate() {
        if !(a2(i) > T::zero()) {
            *g = T::zero();
        }
    }
}

/// `A1 = (A2 - β) / γ` with `γ` floored in magnitude.
#[inline(always)]
fn a1_of<T: Real>(a2: T, beta: T, gamma: T) -> T {
    (a2 - beta) / gamma
}

/// Scale-and-bias gradients: returns `(∇β, ∇γ)` and turns `grad` from
/// `∇A2` into `∇A1 = γ ∘ ∇A2`.
pub(crate) fn scale_bias_backward<T: Real>(
    shape: Shape,
    grad: &mut [T],
    a1: impl Fn(usize) -> T,
    gamma: &[T],
) -> (Vec<f64>, Vec<f64>) {
    let c = shape.channels();
    let mut gb = vec![0.0f64; c];
    let mut gg = vec![0.0f64; c];
    for_each_channel_run(shape, grad, |ch, base, run| {
        for (j, &g) in run.iter().enumerate() {
            gb[ch] += g.as_f64();
            gg[ch] += (a1(base + j) * g).as_f64();
        }
    });
    let s = shape.spatial();
    for (i, run) in grad.chunks_mut(s).enumerate() {
        let g = gamma[i % c];
        run.iter_mut().for_each(|v| *v = g * *v);
    }
    (gb, gg)
}

/// Batch-norm input gradient in place: `grad` goes from `∇A1` to `∇A_in`.
///
/// `a1` feeds only the third term, `A1 ∘ Mean(A1 ∘ ∇A1)`.
pub fn batchnorm_input_grad<T: Real>(shape: Shape, grad: &mut [T], a1: impl Fn(usize) -> T, sigma2: &[T], eps: f64) {
    let c = shape.channels();
    let count = shape.per_channel_count() as f64;
    let mut mean_g = vec![0.0f64; c];
    let mut mean_ag = vec![0.0f64; c];
    for_each_channel_run(shape, grad, |ch, base, run| {
        for (j, &g) in run.iter().enumerate() {
            mean_g[ch] += g.as_f64();
            mean_ag[ch] += (a1(base + j) * g).as_f64();
        }
    });
    let inv: Vec<f64> = sigma2.iter().map(|&v| inv_std(v, eps).as_f64()).collect();
    let s = shape.spatial();
    for (i, run) in grad.chunks_mut(s).enumerate() {
        let ch = i % c;
        let (mg, mag, is) = (mean_g[ch] / count, mean_ag[ch] / count, inv[ch]);
        for (j, v) in run.iter_mut().enumerate() {
            let a = a1(i * s + j).as_f64();
            *v = T::from_f64(is * (v.as_f64() - mg - a * mag));
        }
    }
}

/// Training-time backward on buffers.
///
/// `grad_out` holds `∇A_out`; `scratch` (input-sized) receives `∇A_in`.
/// Parameter gradients are accumulated into `p`.
pub(crate) fn backward_buffers<T: Real>(
    grad_out: &[T],
    scratch: &mut [T],
    tape: &LayerTape<T>,
    p: &mut LayerParams<T>,
) -> Result<()> {
    check_tape(tape, p)?;
    let shape = tape.shape;
    let batch = shape.batch();

    reconstruct_a3(tape, scratch);
    let mut gw = vec![T::zero(); p.weight.len()];
    p.linear.backward_weight(batch, scratch, grad_out, &mut gw);
    for (acc, g) in p.grad_weight.iter_mut().zip(&gw) {
        *acc = *acc + *g;
    }

    p.linear.backward_input(batch, &p.weight, grad_out, scratch);

    // Same arithmetic as `relu_mask`, `scale_bias_backward` and
    // `batchnorm_input_grad` in sequence, fused so each stored run is decoded
    // twice rather than once per use.
    let gamma = p.safe_gamma();
    let (c, s) = (shape.channels(), shape.spatial());
    let mut a1 = vec![T::zero(); s];
    let (mut gb, mut gg) = (vec![0.0f64; c], vec![0.0f64; c]);
    let (mut sum_g, mut sum_ag) = (vec![0.0f64; c], vec![0.0f64; c]);
    for (r, run) in scratch.chunks_mut(s).enumerate() {
        let ch = r % c;
        tape.decode_run(r * s, ch, &mut a1);
        let (beta, g_safe, g_live) = (p.beta[ch], gamma[ch], p.gamma[ch]);
        for (g, a) in run.iter_mut().zip(a1.iter_mut()) {
            if !(*a > T::zero()) {
                *g = T::zero();
            }
            *a = a1_of(*a, beta, g_safe);
            gb[ch] += g.as_f64();
            gg[ch] += (*a * *g).as_f64();
            *g = g_live * *g;
            sum_g[ch] += g.as_f64();
            sum_ag[ch] += (*a * *g).as_f64();
        }
    }
    let count = shape.per_channel_count() as f64;
    for (r, run) in scratch.chunks_mut(s).enumerate() {
        let ch = r % c;
        tape.decode_run(r * s, ch, &mut a1);
        let (beta, g_safe) = (p.beta[ch], gamma[ch]);
        let (mg, mag, is) = (
            sum_g[ch] / count,
            sum_ag[ch] / count,
            inv_std(tape.sigma2[ch], p.bn_epsilon).as_f64(),
        );
        for (v, &a2) in run.iter_mut().zip(a1.iter()) {
            let a = a1_of(a2, beta, g_safe).as_f64();
            *v = T::from_f64(is * (v.as_f64() - mg - a * mag));
        }
    }
    for ch in 0..c {
        p.grad_beta[ch] = p.grad_beta[ch] + T::from_f64(gb[ch]);
        p.grad_gamma[ch] = p.grad_gamma[ch] + T::from_f64(gg[ch]);
    }
    Ok(())
}

/// Forward pass of one layer.
///
/// `approx` only matters in approx and naive modes.
pub fn layer_forward<T: Real>(
    input: &Tensor<T>,
    p: &mut LayerParams<T>,
    mode: Mode,
    approx: Approximation,
) -> Result<(Tensor<T>, LayerTape<T>)> {
    let shape = input.shape();
    check_input(shape, p)?;
    let mut buf = input.data().to_vec();
    let mut out = Tensor::zeros(p.linear.out_shape(shape.batch()));
    let tape = forward_buffers(shape, &mut buf, out.data_mut(), p, mode, approx)?;
    Ok((out, tape))
}

/// Backward pass of one layer; accumulates parameter gradients into `p`.
pub fn layer_backward<T: Real>(g_out: &Tensor<T>, tape: &LayerTape<T>, p: &mut LayerParams<T>) -> Result<Tensor<T>> {
    check_tape(tape, p)?;
    let expect = p.linear.out_shape(tape.shape.batch());
    if g_out.shape() != expect {
        return Err(Error::State(format!(
            "output gradient {} does not match layer output {expect}",
            g_out.shape()
        )));
    }
    let mut g_in = Tensor::zeros(tape.shape);
    backward_buffers(g_out.data(), g_in.data_mut(), tape, p)?;
    Ok(g_in)
}

/// `(A1, A2, A3)` rebuilt from a tape.
pub fn reconstruct_from_tape<T: Real>(tape: &LayerTape<T>, p: &LayerParams<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = tape.shape;
    let a2 = Tensor::from_fn(shape, |i| tape.a2(i));
    let a3 = a2.map(|v| if v > T::zero() { v } else { T::zero() });
    let gamma = p.safe_gamma();
    let (c, s) = (shape.channels(), shape.spatial());
    let a1 = Tensor::from_fn(shape, |i| {
        let ch = (i / s) % c;
        a1_of(a2.data()[i], p.beta[ch], gamma[ch])
    });
    (a1, a2, a3)
}

/// Intermediate quantities of one layer's backward pass.
#[derive(Clone, Debug)]
pub struct BackwardParts<T> {
    pub grad_weight: Vec<T>,
    /// `∇A3 = ∇A_out × Wᵀ`.
    pub grad_a3: Vec<T>,
    /// `∇A2` after the ReLU mask.
    pub grad_a2: Vec<T>,
    pub grad_beta: Vec<f64>,
    pub grad_gamma: Vec<f64>,
    /// `∇A1 = γ ∘ ∇A2`.
    pub grad_a1: Vec<T>,
    /// Reconstructed `A1` used in the backward pass.
    pub a1: Vec<T>,
    pub grad_in: Vec<T>,
}

/// Runs the backward pass step by step, keeping every intermediate.
///
/// Leaves `p` untouched.
pub fn backward_parts<T: Real>(g_out: &Tensor<T>, tape: &LayerTape<T>, p: &LayerParams<T>) -> Result<BackwardParts<T>> {
    check_tape(tape, p)?;
    let shape = tape.shape;
    let batch = shape.batch();
    let (a1, _, a3) = reconstruct_from_tape(tape, p);
    let mut grad_weight = vec![T::zero(); p.weight.len()];
    p.linear
        .backward_weight(batch, a3.data(), g_out.data(), &mut grad_weight);
    let mut buf = vec![T::zero(); shape.numel()];
    p.linear.backward_input(batch, &p.weight, g_out.data(), &mut buf);
    let grad_a3 = buf.clone();
    relu_mask(&mut buf, |i| tape.a2(i));
    let grad_a2 = buf.clone();
    let (grad_beta, grad_gamma) = scale_bias_backward(shape, &mut buf, |i| a1.data()[i], &p.gamma);
    let grad_a1 = buf.clone();
    batchnorm_input_grad(shape, &mut buf, |i| a1.data()[i], &tape.sigma2, p.bn_epsilon);
    Ok(BackwardParts {
        grad_weight,
        grad_a3,
        grad_a2,
        grad_beta,
        grad_gamma,
        grad_a1,
        a1: a1.into_vec(),
        grad_in: buf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> LayerParams<f64> {
        let linear = Linear::Dense { inputs, outputs };
        let w = (0..inputs * outputs).map(|_| rng.random_range(-1.0..1.0)).collect();
        LayerParams::new(linear, w).unwrap()
    }

    fn conv(c: usize, hw: usize, co: usize, stride: usize, rng: &mut ChaCha8Rng) -> LayerParams<f64> {
        let g = ConvGeometry::new(c, hw, hw, co, 3, 3, stride, 1).unwrap();
        let w = (0..g.kernel_len()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut p = LayerParams::new(Linear::Conv(g), w).unwrap();
        for ch in 0..c {
            p.gamma[ch] = rng.random_range(0.5..1.5);
            p.beta[ch] = rng.random_range(-0.5..0.5);
        }
        p
    }

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn two_point_hand_example() {
        let mut p = LayerParams::new(Linear::Dense { inputs: 1, outputs: 1 }, vec![1.0f64]).unwrap();
        let x = Tensor::from_vec(Shape::matrix(2, 1), vec![1.0, 3.0]).unwrap();
        let (out, tape) = layer_forward(&x, &mut p, Mode::Exact, Approximation::Identity).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        let ActivationStore::Full(a2) = &tape.stored else {
            panic!()
        };
        assert!((a2[0] + expect).abs() < 1e-15 && (a2[1] - expect).abs() < 1e-15);
        assert!((expect - 0.999995).abs() < 1e-6);
        assert_eq!(out.data()[0], 0.0);
        assert!((out.data()[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn exact_tape_is_the_pre_relu_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = conv(2, 4, 3, 1, &mut rng);
        let x = random(Shape::image(3, 2, 4, 4), &mut rng);
        let (_, tape) = layer_forward(&x, &mut p.clone(), Mode::Exact, Approximation::Identity).unwrap();
        let mut buf = x.data().to_vec();
        normalize_in_place(x.shape(), &mut buf, &p);
        assert_eq!(tape.stored, ActivationStore::Full(buf));
    }

    #[test]
    fn approx_forward_matches_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = conv(3, 7, 4, 2, &mut rng);
        let x = random(Shape::image(2, 3, 7, 7), &mut rng);
        let (exact, _) = layer_forward(&x, &mut p.clone(), Mode::Exact, Approximation::Identity).unwrap();
        let (ident, _) = layer_forward(&x, &mut p.clone(), Mode::Approx, Approximation::Identity).unwrap();
        let (quant, tape) = layer_forward(&x, &mut p.clone(), Mode::Approx, Bits::new(4).unwrap().into()).unwrap();
        assert_eq!(exact, ident);
        assert_eq!(exact, quant);
        assert!(tape.quantized().is_some());
        let (naive, _) = layer_forward(&x, &mut p.clone(), Mode::Naive, Bits::new(4).unwrap().into()).unwrap();
        assert_ne!(exact, naive);
    }

    #[test]
    fn batchnorm_self_check_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::from_fn(Shape::image(8, 4, 5, 5), |_| rng.random_range(-3.0..7.0));
        let p = LayerParams::new(
            Linear::Conv(ConvGeometry::new(4, 5, 5, 2, 1, 1, 1, 0).unwrap()),
            vec![0.1f32; 8],
        )
        .unwrap();
        let mut buf = x.data().to_vec();
        normalize_in_place(x.shape(), &mut buf, &p);
        let (m, v) = tensor::channel_moments_slice(x.shape(), &buf);
        for c in 0..4 {
            assert!(m[c].abs() < 1e-6, "mean {}", m[c]);
            assert!((v[c] - 1.0).abs() < 1e-4, "var {}", v[c]);
        }
    }

    #[test]
    fn zero_output_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = conv(2, 5, 3, 1, &mut rng);
        let x = random(Shape::image(2, 2, 5, 5), &mut rng);
        let (out, tape) = layer_forward(&x, &mut p, Mode::Approx, Bits::new(8).unwrap().into()).unwrap();
        let g = layer_backward(&Tensor::zeros(out.shape()), &tape, &mut p).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(p
            .grad_weight
            .iter()
            .chain(&p.grad_gamma)
            .chain(&p.grad_beta)
            .all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_foreign_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = dense(3, 2, &mut rng);
        let mut q = dense(4, 2, &mut rng);
        let x = random(Shape::matrix(5, 3), &mut rng);
        let (out, tape) = layer_forward(&x, &mut p, Mode::Exact, Approximation::Identity).unwrap();
        assert!(matches!(layer_backward(&out, &tape, &mut q), Err(Error::State(_))));
    }

    fn fd_check(mut p: LayerParams<f64>, x: Tensor<f64>, rng: &mut ChaCha8Rng) {
        let out_shape = p.linear.out_shape(x.shape().batch());
        let proj = random(out_shape, rng);
        let loss = |p: &LayerParams<f64>, x: &Tensor<f64>| {
            let (out, _) = layer_forward(x, &mut p.clone(), Mode::Exact, Approximation::Identity).unwrap();
            out.dot(&proj).unwrap()
        };
        let (_, tape) = layer_forward(&x, &mut p.clone(), Mode::Exact, Approximation::Identity).unwrap();
        let gx = layer_backward(&proj, &tape, &mut p).unwrap();
        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
        for i in 0..x.numel() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
            assert!(rel(fd, gx.data()[i]) < 1e-6, "input {i}: {fd} vs {}", gx.data()[i]);
        }
        type Field = fn(&mut LayerParams<f64>) -> &mut Vec<f64>;
        let fields: [(&str, Field, Field); 3] = [
            ("gamma", |p| &mut p.gamma, |p| &mut p.grad_gamma),
            ("beta", |p| &mut p.beta, |p| &mut p.grad_beta),
            ("weight", |p| &mut p.weight, |p| &mut p.grad_weight),
        ];
        for (name, value, grad) in fields {
            let n = value(&mut p).len();
            for i in 0..n {
                let (mut pp, mut pm) = (p.clone(), p.clone());
                value(&mut pp)[i] += h;
                value(&mut pm)[i] -= h;
                let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
                let an = grad(&mut p)[i];
                assert!(rel(fd, an) < 1e-6, "{name}[{i}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn exact_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = dense(4, 3, &mut rng);
        let x = random(Shape::matrix(6, 4), &mut rng);
        fd_check(p, x, &mut rng);

        let p = conv(2, 5, 3, 2, &mut rng);
        let x = random(Shape::image(3, 2, 5, 5), &mut rng);
        fd_check(p, x, &mut rng);

        let w = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = LayerParams::new(
            Linear::PoolDense {
                channels: 3,
                height: 2,
                width: 3,
                outputs: 2,
            },
            w,
        )
        .unwrap();
        let x = random(Shape::image(4, 3, 2, 3), &mut rng);
        fd_check(p, x, &mut rng);
    }

    #[test]
    fn negative_gamma_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = dense(3, 2, &mut rng);
        p.gamma = vec![-0.8, 1.2, -0.3];
        p.beta = vec![0.1, -0.2, 0.3];
        let x = random(Shape::matrix(7, 3), &mut rng);
        fd_check(p, x, &mut rng);
    }

    #[test]
    fn reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = conv(3, 4, 2, 1, &mut rng);
        let x = random(Shape::image(4, 3, 4, 4), &mut rng);
        let mut buf = x.data().to_vec();
        let (mean, var) = tensor::channel_moments(&x);
        let (_, exact_tape) = layer_forward(&x, &mut p.clone(), Mode::Exact, Approximation::Identity).unwrap();
        let true_a1: Vec<f64> = buf
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / 16) % 3;
                (v - mean[c]) / (var[c] + 1e-5).sqrt()
            })
            .collect();
        let (a1, a2, a3) = reconstruct_from_tape(&exact_tape, &p);
        for i in 0..a1.numel() {
            assert!((a1.data()[i] - true_a1[i]).abs() <= 1e-6 * true_a1[i].abs().max(1e-3));
            if a2.data()[i] <= 0.0 {
                assert_eq!(a3.data()[i], 0.0);
            }
        }
        for bits in Bits::ALL {
            let (tape, clipped) = {
                normalize_in_place(x.shape(), &mut buf, &p);
                let t = Tensor::from_vec(x.shape(), buf.clone()).unwrap();
                let (q, clipped) = QuantizedTape::quantize_tracking(&t, &p.gamma, &p.beta, bits).unwrap();
                buf.copy_from_slice(x.data());
                (
                    LayerTape {
                        mode: Mode::Approx,
                        shape: x.shape(),
                        stored: ActivationStore::Quantized(q),
                        sigma2: exact_tape.sigma2.clone(),
                    },
                    clipped,
                )
            };
            let (a1q, _, _) = reconstruct_from_tape(&tape, &p);
            let bound = 3.0 / bits.levels() as f64;
            for i in 0..a1q.numel() {
                if !clipped[i] {
                    assert!(
                        (a1q.data()[i] - true_a1[i]).abs() <= bound * (1.0 + 1e-9),
                        "K={bits} {i}"
                    );
                }
            }
        }
    }

    #[test]
    fn identity_approximation_matches_exact_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = conv(3, 6, 4, 1, &mut rng);
        let x = random(Shape::image(2, 3, 6, 6), &mut rng);
        let (mut pe, mut pa) = (p.clone(), p.clone());
        let (out, te) = layer_forward(&x, &mut pe, Mode::Exact, Approximation::Identity).unwrap();
        let (_, ta) = layer_forward(&x, &mut pa, Mode::Approx, Approximation::Identity).unwrap();
        let g = random(out.shape(), &mut rng);
        assert_eq!(
            layer_backward(&g, &te, &mut pe).unwrap(),
            layer_backward(&g, &ta, &mut pa).unwrap()
        );
        assert_eq!(pe, pa);
    }

    #[test]
    fn approx_exactness_decomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = conv(3, 6, 4, 1, &mut rng);
        let x = random(Shape::image(4, 3, 6, 6), &mut rng);
        let (out, te) = layer_forward(&x, &mut p.clone(), Mode::Exact, Approximation::Identity).unwrap();
        let (_, ta) = layer_forward(&x, &mut p.clone(), Mode::Approx, Bits::new(4).unwrap().into()).unwrap();
        assert_eq!(ta.quantized().unwrap().clip_count(), 0);
        let g = random(out.shape(), &mut rng);
        let e = backward_parts(&g, &te, &p).unwrap();
        let a = backward_parts(&g, &ta, &p).unwrap();
        assert_eq!(e.grad_a3, a.grad_a3);
        assert_eq!(e.grad_a2, a.grad_a2);
        assert_eq!(e.grad_beta, a.grad_beta);
        assert_eq!(e.grad_a1, a.grad_a1);
        assert_ne!(e.grad_weight, a.grad_weight);
        assert_ne!(e.grad_gamma, a.grad_gamma);
        assert_ne!(e.grad_in, a.grad_in);
        let mut fixed = a.grad_a1.clone();
        batchnorm_input_grad(te.shape, &mut fixed, |i| e.a1[i], &ta.sigma2, p.bn_epsilon);
        assert_eq!(fixed, e.grad_in);
    }

    #[test]
    fn backward_parts_agree_with_layer_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = conv(2, 5, 3, 2, &mut rng);
        let x = random(Shape::image(3, 2, 5, 5), &mut rng);
        let (out, tape) = layer_forward(&x, &mut p, Mode::Approx, Bits::new(2).unwrap().into()).unwrap();
        let g = random(out.shape(), &mut rng);
        let parts = backward_parts(&g, &tape, &p).unwrap();
        let gin = layer_backward(&g, &tape, &mut p).unwrap();
        assert_eq!(gin.data(), &parts.grad_in[..]);
        assert_eq!(p.grad_weight, parts.grad_weight);
    }
}
