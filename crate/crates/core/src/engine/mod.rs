//! Whole-network training passes over a small pool of full-precision buffers.
//!
//! The forward pass computes exact activations, keeps each layer's
//! pre-ReLU activation on a tape (full precision in exact mode, quantized in
//! approx and naive modes) and recycles the full-precision buffer as soon as
//! the next layer has consumed it. The backward pass rebuilds what each layer
//! needs from its tape.

mod memory;
mod pool;
mod spec;

pub use memory::{memory_report, LayerMemory, MeasuredMemory, MemoryReport};
pub use pool::{BufferPool, Slot};
pub use spec::{
    CompiledUnit, HeadSpec, InputSpec, LayerKind, LayerSpec, Network, NetworkSpec, Shortcut, Unit, MAX_WIDTH,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::prelayer::{self, Approximation, LayerParams, LayerTape, Mode};
use crate::quantizer::Bits;
use crate::tensor::Tensor;
use crate::Real;

/// A network with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub network: Network,
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Real> Model<T> {
    /// He-normal weights drawn from a seeded stream, `γ = 1`, `β = 0`.
    pub fn init(network: Network, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = network
            .layers
            .iter()
            .map(|&linear| {
                let std = (2.0 / linear.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                let weight = (0..linear.weight_shape().numel())
                    .map(|_| T::from_f64(normal.sample(&mut rng)))
                    .collect();
                LayerParams::new(linear, weight)
            })
            .collect::<Result<_>>()?;
        Ok(Model { network, layers })
    }

    pub fn zero_grads(&mut self) {
        self.layers.iter_mut().for_each(LayerParams::zero_grads);
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::param_count).sum()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Per-layer tapes left by [`Engine::forward`], first layer first.
#[derive(Debug)]
pub struct Tapes<T> {
    pub layers: Vec<LayerTape<T>>,
    batch: usize,
}

impl<T: Real> Tapes<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn tape_bytes(&self) -> usize {
        self.layers.iter().map(LayerTape::store_bytes).sum()
    }

    pub fn statistic_bytes(&self) -> usize {
        self.layers.iter().map(LayerTape::sigma2_bytes).sum()
    }
}

/// Forward/backward driver for one [`Mode`].
#[derive(Debug)]
pub struct Engine<T> {
    pub mode: Mode,
    pub approx: Approximation,
    pool: BufferPool<T>,
}

impl<T: Real> Engine<T> {
    /// `bits` is ignored in exact mode.
    pub fn new(mode: Mode, bits: Bits) -> Self {
        Self::with_approximation(mode, Approximation::Quantize(bits))
    }

    pub fn with_approximation(mode: Mode, approx: Approximation) -> Self {
        Engine {
            mode,
            approx,
            pool: BufferPool::new(0),
        }
    }

    pub fn exact() -> Self {
        Self::with_approximation(Mode::Exact, Approximation::Identity)
    }

    pub fn pool(&self) -> &BufferPool<T> {
        &self.pool
    }

    fn prepare(&mut self, network: &Network, batch: usize) -> Result<()> {
        if self.pool.live() != 0 {
            return Err(Error::State("engine buffers still in use".into()));
        }
        if self.pool.limit() != network.width + 1 {
            self.pool = BufferPool::new(network.width + 1);
        }
        self.pool.resize(batch * network.max_sample_len())
    }

    /// Training-mode forward pass: batch statistics, running statistics
    /// updated, tapes recorded.
    pub fn forward(&mut self, model: &mut Model<T>, input: &Tensor<T>) -> Result<(Tensor<T>, Tapes<T>)> {
        let batch = input.shape().batch();
        if input.shape() != model.network.input_shape(batch) {
            return Err(dim_err!(
                "input {} does not match network input {}",
                input.shape(),
                model.network.input_shape(batch)
            ));
        }
        self.prepare(&model.network, batch)?;
        let result = self.forward_inner(model, input, batch);
        if result.is_err() {
            self.reset_after_error(&model.network, batch)?;
        }
        result
    }

    fn forward_inner(
        &mut self,
        model: &mut Model<T>,
        input: &Tensor<T>,
        batch: usize,
    ) -> Result<(Tensor<T>, Tapes<T>)> {
        let Model { network, layers } = model;
        let mut tapes = Vec::with_capacity(layers.len());
        let mut cur = self.pool.acquire()?;
        self.pool.get_mut(cur, input.numel()).copy_from_slice(input.data());

        let mut run_layer = |pool: &mut BufferPool<T>, x: Slot, l: usize, mode: Mode| -> Result<Slot> {
            let p = &mut layers[l];
            let (in_shape, out_len) = (p.linear.in_shape(batch), p.linear.out_shape(batch).numel());
            let out = pool.acquire()?;
            let (xb, ob) = pool.pair_mut((x, in_shape.numel()), (out, out_len));
            tapes.push(prelayer::forward_buffers(in_shape, xb, ob, p, mode, self.approx)?);
            pool.release(x);
            Ok(out)
        };

        for unit in &network.units {
            match *unit {
                CompiledUnit::Single(l) => cur = run_layer(&mut self.pool, cur, l, self.mode)?,
                CompiledUnit::Block { first, end, shortcut } => {
                    let keep = cur;
                    let in_len = network.layers[first].in_shape(batch).numel();
                    let mut x = self.pool.acquire()?;
                    {
                        let (k, xb) = self.pool.pair_mut((keep, in_len), (x, in_len));
                        xb.copy_from_slice(k);
                    }
                    for l in first..end {
                        x = run_layer(&mut self.pool, x, l, self.mode)?;
                    }
                    let out_len = network.layers[end - 1].out_shape(batch).numel();
                    let (k, xb) = self.pool.pair_mut((keep, in_len), (x, out_len));
                    shortcut.add_forward(batch, k, xb);
                    self.pool.release(keep);
                    cur = x;
                }
            }
        }
        let head = network.head_index();
        let logits_slot = run_layer(&mut self.pool, cur, head, Mode::Exact)?;
        let logits_shape = network.layers[head].out_shape(batch);
        let logits = Tensor::from_vec(logits_shape, self.pool.get(logits_slot, logits_shape.numel()).to_vec())?;
        self.pool.release(logits_slot);
        Ok((logits, Tapes { layers: tapes, batch }))
    }

    /// Accumulates parameter gradients into the model's gradient slots.
    pub fn backward(&mut self, model: &mut Model<T>, tapes: Tapes<T>, grad_logits: &Tensor<T>) -> Result<()> {
        let batch = tapes.batch;
        if tapes.layers.len() != model.layers.len() {
            return Err(Error::State(format!(
                "{} tapes for a {}-layer network",
                tapes.layers.len(),
                model.layers.len()
            )));
        }
        let head = model.network.head_index();
        if grad_logits.shape() != model.network.layers[head].out_shape(batch) {
            return Err(dim_err!("loss gradient has shape {}", grad_logits.shape()));
        }
        self.prepare(&model.network, batch)?;
        let result = self.backward_inner(model, tapes, grad_logits, batch);
        if result.is_err() {
            self.reset_after_error(&model.network, batch)?;
        }
        result
    }

    fn backward_inner(
        &mut self,
        model: &mut Model<T>,
        tapes: Tapes<T>,
        grad_logits: &Tensor<T>,
        batch: usize,
    ) -> Result<()> {
        let Model { network, layers } = model;
        let mut tapes = tapes.layers;
        let mut g = self.pool.acquire()?;
        self.pool
            .get_mut(g, grad_logits.numel())
            .copy_from_slice(grad_logits.data());

        let mut run_layer = |pool: &mut BufferPool<T>, g: Slot, l: usize| -> Result<Slot> {
            let tape = tapes.pop().expect("tape count checked");
            let p = &mut layers[l];
            let (out_len, in_len) = (p.linear.out_shape(batch).numel(), p.linear.in_shape(batch).numel());
            let s = pool.acquire()?;
            let (gb, sb) = pool.pair_mut((g, out_len), (s, in_len));
            prelayer::backward_buffers(gb, sb, &tape, p)?;
            pool.release(g);
            Ok(s)
        };

        g = run_layer(&mut self.pool, g, network.head_index())?;
        for unit in network.units.iter().rev() {
            match *unit {
                CompiledUnit::Single(l) => g = run_layer(&mut self.pool, g, l)?,
                CompiledUnit::Block { first, end, shortcut } => {
                    let out_len = network.layers[end - 1].out_shape(batch).numel();
                    let in_len = network.layers[first].in_shape(batch).numel();
                    let r = self.pool.acquire()?;
                    {
                        let (gb, rb) = self.pool.pair_mut((g, out_len), (r, in_len));
                        shortcut.backward(batch, gb, rb);
                    }
                    for l in (first..end).rev() {
                        g = run_layer(&mut self.pool, g, l)?;
                    }
                    let (gb, rb) = self.pool.pair_mut((g, in_len), (r, in_len));
                    for (a, b) in gb.iter_mut().zip(rb.iter()) {
                        *a = *a + *b;
                    }
                    self.pool.release(r);
                }
            }
        }
        self.pool.release(g);
        Ok(())
    }

    fn reset_after_error(&mut self, network: &Network, batch: usize) -> Result<()> {
        self.pool = BufferPool::new(network.width + 1);
        self.pool.resize(batch * network.max_sample_len())
    }

    /// Evaluation-mode logits from running statistics; records nothing.
    pub fn infer(&mut self, model: &Model<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = input.shape().batch();
        if input.shape() != model.network.input_shape(batch) {
            return Err(dim_err!("input {} does not match the network", input.shape()));
        }
        self.prepare(&model.network, batch)?;
        let network = &model.network;
        let infer_layer = |pool: &mut BufferPool<T>, x: Slot, l: usize| -> Result<Slot> {
            let p = &model.layers[l];
            let (in_shape, out_len) = (p.linear.in_shape(batch), p.linear.out_shape(batch).numel());
            let out = pool.acquire()?;
            let (xb, ob) = pool.pair_mut((x, in_shape.numel()), (out, out_len));
            prelayer::infer_buffers(in_shape, xb, ob, p)?;
            pool.release(x);
            Ok(out)
        };
        let mut cur = self.pool.acquire()?;
        self.pool.get_mut(cur, input.numel()).copy_from_slice(input.data());
        for unit in &network.units {
            match *unit {
                CompiledUnit::Single(l) => cur = infer_layer(&mut self.pool, cur, l)?,
                CompiledUnit::Block { first, end, shortcut } => {
                    let in_len = network.layers[first].in_shape(batch).numel();
                    let mut x = self.pool.acquire()?;
                    {
                        let (k, xb) = self.pool.pair_mut((cur, in_len), (x, in_len));
                        xb.copy_from_slice(k);
                    }
                    for l in first..end {
                        x = infer_layer(&mut self.pool, x, l)?;
                    }
                    let out_len = network.layers[end - 1].out_shape(batch).numel();
                    let (k, xb) = self.pool.pair_mut((cur, in_len), (x, out_len));
                    shortcut.add_forward(batch, k, xb);
                    self.pool.release(cur);
                    cur = x;
                }
            }
        }
        let head = network.head_index();
        let out = infer_layer(&mut self.pool, cur, head)?;
        let shape = network.layers[head].out_shape(batch);
        let logits = Tensor::from_vec(shape, self.pool.get(out, shape.numel()).to_vec())?;
        self.pool.release(out);
        Ok(logits)
    }

    /// Allocation high-water marks of the pool plus the given tapes.
    pub fn measured(&self, tapes: &Tapes<T>) -> MeasuredMemory {
        MeasuredMemory {
            tape_bytes: tapes.tape_bytes(),
            statistic_bytes: tapes.statistic_bytes(),
            peak_buffers: self.pool.peak_live(),
            buffer_bytes: self.pool.allocated_bytes(),
        }
    }
}
