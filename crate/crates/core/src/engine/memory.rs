//! Byte accounting of what a training pass keeps alive.

use serde::Serialize;

use super::spec::Network;
use crate::prelayer::{Approximation, Mode};
use crate::quantizer::Bits;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerMemory {
    pub layer: usize,
    /// Elements of the stored activation.
    pub elements: usize,
    pub approximated: bool,
    pub tape_bytes: usize,
    /// Per-channel batch variances kept for the normalization backward.
    pub statistic_bytes: usize,
}

/// Analytic memory footprint of one training step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryReport {
    pub mode: Mode,
    pub bits: Option<u32>,
    pub width: usize,
    pub batch: usize,
    pub element_bytes: usize,
    /// Stored activations, full or quantized, including per-channel
    /// quantizer steps and offsets.
    pub persistent_tape_bytes: usize,
    pub statistic_bytes: usize,
    /// The `W + 1` reusable full-precision buffers.
    pub transient_buffer_bytes: usize,
    pub parameter_bytes: usize,
    /// Tape bytes the exact engine would store for the same network.
    pub exact_tape_bytes: usize,
    /// `(persistent + statistics + transient) / exact_tape_bytes`.
    pub ratio_vs_exact: f64,
    pub layers: Vec<LayerMemory>,
}

impl MemoryReport {
    pub fn activation_bytes(&self) -> usize {
        self.persistent_tape_bytes + self.statistic_bytes + self.transient_buffer_bytes
    }
}

/// Memory the engine needs to train `network` on batches of `batch` samples
/// with `element_bytes`-wide floats.
pub fn memory_report(
    network: &Network,
    batch: usize,
    mode: Mode,
    approx: Approximation,
    element_bytes: usize,
) -> MemoryReport {
    let head = network.head_index();
    let bits: Option<Bits> = match approx {
        Approximation::Quantize(b) if mode != Mode::Exact => Some(b),
        _ => None,
    };
    let layers: Vec<LayerMemory> = network
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let shape = l.in_shape(batch);
            let elements = shape.numel();
            let channels = shape.channels();
            let quantized = bits.filter(|_| i != head);
            let tape_bytes = match quantized {
                Some(b) => b.packed_len(elements) + channels * (size_of::<f64>() + size_of::<i64>()),
                None => elements * element_bytes,
            };
            LayerMemory {
                layer: i,
                elements,
                approximated: quantized.is_some(),
                tape_bytes,
                statistic_bytes: channels * element_bytes,
            }
        })
        .collect();
    let persistent_tape_bytes = layers.iter().map(|l| l.tape_bytes).sum();
    let statistic_bytes = layers.iter().map(|l| l.statistic_bytes).sum();
    let exact_tape_bytes: usize = layers.iter().map(|l| l.elements * element_bytes).sum();
    let transient_buffer_bytes = (network.width + 1) * batch * network.max_sample_len() * element_bytes;
    let parameter_bytes = network
        .layers
        .iter()
        .map(|l| (2 * l.in_channels() + l.weight_shape().numel()) * element_bytes)
        .sum();
    let total = persistent_tape_bytes + statistic_bytes + transient_buffer_bytes;
    MemoryReport {
        mode,
        bits: bits.map(Bits::get),
        width: network.width,
        batch,
        element_bytes,
        persistent_tape_bytes,
        statistic_bytes,
        transient_buffer_bytes,
        parameter_bytes,
        exact_tape_bytes,
        ratio_vs_exact: total as f64 / exact_tape_bytes as f64,
        layers,
    }
}

/// What a pass actually allocated, for comparison against [`MemoryReport`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MeasuredMemory {
    pub tape_bytes: usize,
    pub statistic_bytes: usize,
    pub peak_buffers: usize,
    pub buffer_bytes: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::spec::{InputSpec, NetworkSpec};

    #[test]
    fn single_layer_exact_tape_is_the_input() {
        let net = NetworkSpec::mlp(6, &[], 3).compile().unwrap();
        let r = memory_report(&net, 5, Mode::Exact, Approximation::Identity, 4);
        assert_eq!(r.persistent_tape_bytes, 5 * 6 * 4);
        assert_eq!(r.transient_buffer_bytes, 2 * 5 * 6 * 4);
        assert_eq!(r.parameter_bytes, (12 + 18) * 4);
    }

    #[test]
    fn uniform_layers_at_eight_bits() {
        let input = InputSpec::Image {
            channels: 16,
            height: 16,
            width: 16,
        };
        let net = NetworkSpec::residual_chain(input, 16, 41, 10).compile().unwrap();
        let r = memory_report(&net, 8, Mode::Approx, Bits::new(8).unwrap().into(), 4);
        // 41 of 42 tapes at a quarter size plus a step and an offset per
        // channel, the head at full size.
        let full = 8 * 16 * 16 * 16 * 4;
        assert_eq!(r.persistent_tape_bytes, 41 * (full / 4 + 16 * 16) + full);
        assert_eq!(r.exact_tape_bytes, 42 * full);
        let parts: usize = r.layers.iter().map(|l| l.tape_bytes).sum();
        assert_eq!(parts, r.persistent_tape_bytes);
    }
}
