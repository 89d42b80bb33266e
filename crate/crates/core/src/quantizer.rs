//! K-bit fixed-point approximation of pre-ReLU activations.
//!
//! Batch-normalized activations of channel `c` have mean `β_c` and standard
//! deviation `|γ_c|`, so the range `β_c ± 3|γ_c|` is split into `2^K` equal
//! intervals. A value is coded by the interval it falls in (clipped to the
//! range) and decoded to that interval's midpoint:
//!
//! ```text
//! step   = 6|γ| / 2^K
//! offset = ⌊β / step⌋
//! code   = clamp(⌊A / step⌋ + 2^(K-1) - offset, 0, 2^K - 1)
//! Ã      = step · (code + 0.5 - 2^(K-1) + offset)
//! ```
//!
//! For unclipped values `|Ã - A| ≤ step / 2 = 3|γ| 2^-K` and the sign of `A`
//! survives (zero counts as nonnegative). The step and offset are frozen in
//! the tape when it is created.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Smallest `|γ|` used to size quantization intervals.
pub const GAMMA_FLOOR: f64 = 1e-8;

/// Bit width of a code; one of 1, 2, 4 or 8 so codes never straddle bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Bits(u8);

impl Bits {
    pub const ALL: [Bits; 4] = [Bits(1), Bits(2), Bits(4), Bits(8)];

    pub fn new(k: u32) -> Result<Self> {
        match k {
            1 | 2 | 4 | 8 => Ok(Bits(k as u8)),
            _ => Err(Error::Config(format!("bit width must be one of 1, 2, 4, 8; got {k}"))),
        }
    }

    pub fn get(self) -> u32 {
        self.0 as u32
    }

    pub fn levels(self) -> u32 {
        1 << self.0
    }

    pub fn max_code(self) -> u32 {
        self.levels() - 1
    }

    fn half(self) -> i64 {
        1 << (self.0 - 1)
    }

    /// Bytes needed for `count` packed codes.
    pub fn packed_len(self, count: usize) -> usize {
        (count * self.0 as usize).div_ceil(8)
    }
}

impl TryFrom<u32> for Bits {
    type Error = Error;
    fn try_from(k: u32) -> Result<Self> {
        Bits::new(k)
    }
}

impl From<Bits> for u32 {
    fn from(b: Bits) -> u32 {
        b.get()
    }
}

impl std::fmt::Display for Bits {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// `|γ|` floored at [`GAMMA_FLOOR`].
#[inline]
pub fn gamma_magnitude(gamma: f64) -> f64 {
    gamma.abs().max(GAMMA_FLOOR)
}

/// Packs codes LSB-first: code `i` occupies bits `[i·K, (i+1)·K)`.
pub fn pack_codes(codes: &[u32], bits: Bits) -> Result<Vec<u8>> {
    let k = bits.get() as usize;
    let mut out = vec![0u8; bits.packed_len(codes.len())];
    for (i, &code) in codes.iter().enumerate() {
        if code > bits.max_code() {
            return Err(Error::Encoding(format!(
                "code {code} at index {i} does not fit in {k} bits"
            )));
        }
        let bit = i * k;
        out[bit / 8] |= (code as u8) << (bit % 8);
    }
    Ok(out)
}

/// Inverse of [`pack_codes`].
pub fn unpack_codes(bytes: &[u8], bits: Bits, count: usize) -> Result<Vec<u32>> {
    if bytes.len() != bits.packed_len(count) {
        return Err(Error::Decoding(format!(
            "{} bytes cannot hold exactly {count} codes of {bits} bits",
            bytes.len()
        )));
    }
    Ok((0..count).map(|i| read_code(bytes, bits, i)).collect())
}

#[inline(always)]
fn read_code(bytes: &[u8], bits: Bits, i: usize) -> u32 {
    let k = bits.0 as usize;
    let bit = i * k;
    let mask = (1u16 << k) - 1;
    ((bytes[bit / 8] as u16 >> (bit % 8)) & mask) as u32
}

/// Bit-packed K-bit codes with the per-channel constants needed to decode them.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTape {
    codes: Vec<u8>,
    bits: Bits,
    shape: Shape,
    step: Vec<f64>,
    offset: Vec<i64>,
    clip_count: usize,
}

impl QuantizedTape {
    /// Quantizes `a` with per-channel `gamma`, `beta`.
    pub fn quantize<T: Real>(a: &Tensor<T>, gamma: &[T], beta: &[T], bits: Bits) -> Result<Self> {
        Self::quantize_slice(a.shape(), a.data(), gamma, beta, bits, None)
    }

    /// Like [`QuantizedTape::quantize`], also returning which entries were clipped.
    pub fn quantize_tracking<T: Real>(a: &Tensor<T>, gamma: &[T], beta: &[T], bits: Bits) -> Result<(Self, Vec<bool>)> {
        let mut clipped = vec![false; a.numel()];
        let tape = Self::quantize_slice(a.shape(), a.data(), gamma, beta, bits, Some(&mut clipped))?;
        Ok((tape, clipped))
    }

    pub(crate) fn quantize_slice<T: Real>(
        shape: Shape,
        data: &[T],
        gamma: &[T],
        beta: &[T],
        bits: Bits,
        mut clipped: Option<&mut [bool]>,
    ) -> Result<Self> {
        let c = shape.channels();
        if gamma.len() != c || beta.len() != c {
            return Err(Error::Dimension(format!(
                "gamma/beta lengths {}/{} do not match {c} channels",
                gamma.len(),
                beta.len()
            )));
        }
        let levels = bits.levels() as f64;
        let step: Vec<f64> = gamma
            .iter()
            .map(|g| 6.0 * gamma_magnitude(g.as_f64()) / levels)
            .collect();
        let offset: Vec<i64> = beta
            .iter()
            .zip(&step)
            .map(|(b, s)| (b.as_f64() / s).floor() as i64)
            .collect();
        let max = bits.max_code() as i64;
        let half = bits.half();
        let k = bits.get() as usize;
        let per_byte_shift = (8 / k).trailing_zeros();
        let mut codes = vec![0u8; bits.packed_len(data.len())];
        let mut clip_count = 0;
        let spatial = shape.spatial();
        for (r, run) in data.chunks(spatial).enumerate() {
            let ch = r % c;
            let (st, off) = (step[ch], offset[ch]);
            let base = r * spatial;
            for (j, &v) in run.iter().enumerate() {
                let raw = (v.as_f64() / st).floor() as i64 + half - off;
                let code = raw.clamp(0, max);
                if code != raw {
                    clip_count += 1;
                    if let Some(mask) = clipped.as_deref_mut() {
                        mask[base + j] = true;
                    }
                }
                let i = base + j;
                if k == 8 {
                    codes[i] = code as u8;
                } else {
                    codes[i >> per_byte_shift] |= (code as u8) << ((i & ((1 << per_byte_shift) - 1)) * k);
                }
            }
        }
        Ok(QuantizedTape {
            codes,
            bits,
            shape,
            step,
            offset,
            clip_count,
        })
    }

    pub fn bits(&self) -> Bits {
        self.bits
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn packed(&self) -> &[u8] {
        &self.codes
    }

    pub fn step(&self) -> &[f64] {
        &self.step
    }

    pub fn offset(&self) -> &[i64] {
        &self.offset
    }

    pub fn clip_count(&self) -> usize {
        self.clip_count
    }

    pub fn codes(&self) -> Vec<u32> {
        (0..self.shape.numel()).map(|i| self.code(i)).collect()
    }

    #[inline(always)]
    pub fn code(&self, i: usize) -> u32 {
        read_code(&self.codes, self.bits, i)
    }

    /// Decoded value of flat element `i`.
    #[inline(always)]
    pub fn value(&self, i: usize) -> f64 {
        let ch = (i / self.shape.spatial()) % self.shape.channels();
        self.step[ch] * (self.code(i) as f64 + self.code_shift(ch))
    }

    /// `0.5 - 2^(K-1) + offset`, exactly representable, so adding it to a
    /// code in one step rounds the same as adding its parts in turn.
    #[inline(always)]
    fn code_shift(&self, ch: usize) -> f64 {
        0.5 - self.bits.half() as f64 + self.offset[ch] as f64
    }

    /// Decodes the `out.len()` values starting at flat index `start`, all of
    /// which must lie in channel `ch`.
    pub(crate) fn decode_run<T: Real>(&self, start: usize, ch: usize, out: &mut [T]) {
        let (st, shift) = (self.step[ch], self.code_shift(ch));
        if self.bits.get() == 8 {
            let n = out.len();
            for (v, &b) in out.iter_mut().zip(&self.codes[start..start + n]) {
                *v = T::from_f64(st * (b as f64 + shift));
            }
        } else {
            for (j, v) in out.iter_mut().enumerate() {
                *v = T::from_f64(st * (self.code(start + j) as f64 + shift));
            }
        }
    }

    pub fn dequantize<T: Real>(&self) -> Tensor<T> {
        let mut out = Tensor::zeros(self.shape);
        self.dequantize_into(out.data_mut());
        out
    }

    pub(crate) fn dequantize_into<T: Real>(&self, out: &mut [T]) {
        let s = self.shape.spatial();
        let c = self.shape.channels();
        for (r, run) in out.chunks_mut(s).enumerate() {
            self.decode_run(r * s, r % c, run);
        }
    }

    /// Persistent bytes: packed codes plus the frozen per-channel constants.
    pub fn byte_size(&self) -> usize {
        self.codes.len() + self.step.len() * std::mem::size_of::<f64>() + self.offset.len() * std::mem::size_of::<i64>()
    }
}

/// Replaces every value with its quantize-dequantize reconstruction.
pub(crate) fn round_trip_in_place<T: Real>(
    shape: Shape,
    data: &mut [T],
    gamma: &[T],
    beta: &[T],
    bits: Bits,
) -> Result<QuantizedTape> {
    let tape = QuantizedTape::quantize_slice(shape, data, gamma, beta, bits, None)?;
    tape.dequantize_into(data);
    Ok(tape)
}
