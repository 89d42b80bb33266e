//! Dense row-major tensors and the deterministic kernels built on them.
//!
//! Every reduction runs in a fixed order with `f64` accumulators. The
//! convolution lowers each image to a patch matrix and multiplies it by the
//! kernel; the multiply accumulates every output over the patch index in
//! ascending order starting from zero, which is exactly the summation a
//! direct six-loop convolution performs, so the two agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::par;
use crate::real::Real;

/// Extents of a rank-2 `(N, C)` or rank-4 `(N, C, H, W)` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Matrix { rows: usize, cols: usize },
    Image { n: usize, c: usize, h: usize, w: usize },
}

impl Shape {
    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape::Matrix { rows, cols }
    }

    pub fn image(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape::Image { n, c, h, w }
    }

    pub fn rank(&self) -> usize {
        match self {
            Shape::Matrix { .. } => 2,
            Shape::Image { .. } => 4,
        }
    }

    pub fn batch(&self) -> usize {
        match *self {
            Shape::Matrix { rows, .. } => rows,
            Shape::Image { n, .. } => n,
        }
    }

    pub fn channels(&self) -> usize {
        match *self {
            Shape::Matrix { cols, .. } => cols,
            Shape::Image { c, .. } => c,
        }
    }

    /// Number of spatial positions per channel (1 for matrices).
    pub fn spatial(&self) -> usize {
        match *self {
            Shape::Matrix { .. } => 1,
            Shape::Image { h, w, .. } => h * w,
        }
    }

    pub fn numel(&self) -> usize {
        self.batch() * self.channels() * self.spatial()
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.channels() * self.spatial()
    }

    /// Same per-sample extents with a different batch size.
    pub fn with_batch(&self, batch: usize) -> Shape {
        match *self {
            Shape::Matrix { cols, .. } => Shape::Matrix { rows: batch, cols },
            Shape::Image { c, h, w, .. } => Shape::Image { n: batch, c, h, w },
        }
    }

    /// Elements each channel reduction runs over (`N * H * W`).
    pub fn per_channel_count(&self) -> usize {
        self.batch() * self.spatial()
    }

    fn check_positive(&self) -> Result<()> {
        let ok = match *self {
            Shape::Matrix { rows, cols } => rows > 0 && cols > 0,
            Shape::Image { n, c, h, w } => n > 0 && c > 0 && h > 0 && w > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(dim_err!("extents must be positive, got {self:?}"))
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shape::Matrix { rows, cols } => write!(f, "({rows}, {cols})"),
            Shape::Image { n, c, h, w } => write!(f, "({n}, {c}, {h}, {w})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        shape.check_positive()?;
        if data.len() != shape.numel() {
            return Err(dim_err!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Self {
        Tensor {
            shape,
            data: (0..shape.numel()).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value at `(n, c, h, w)`; `h` and `w` are ignored for matrices.
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let s = self.shape;
        let idx = match s {
            Shape::Matrix { cols, .. } => n * cols + c,
            Shape::Image {
                c: cc, h: hh, w: ww, ..
            } => ((n * cc + c) * hh + h) * ww + w,
        };
        self.data[idx]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Inner product accumulated in `f64`.
    pub fn dot(&self, other: &Tensor<T>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(dim_err!("dot of {} and {}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |acc, (&a, &b)| acc + a.as_f64() * b.as_f64()))
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Matrix multiply

const ROW_BLOCK: usize = 4;
const COL_BLOCK: usize = 64;
/// Width of the tiles covering what is left of a row after the full blocks.
const NARROW_BLOCK: usize = 16;

/// `c = a × b` for row-major `a: (m, k)`, `b: (k, n)`, `c: (m, n)`.
///
/// Each `c[i][j]` is accumulated from zero over `k` in ascending order.
pub(crate) fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i0 = 0;
    while i0 < m {
        let rows = ROW_BLOCK.min(m - i0);
        let mut j0 = 0;
        while j0 < n {
            let cols = if n - j0 >= COL_BLOCK {
                COL_BLOCK
            } else {
                NARROW_BLOCK.min(n - j0)
            };
            match (rows, cols) {
                (ROW_BLOCK, COL_BLOCK) => {
                    gemm_tile::<T, ROW_BLOCK, COL_BLOCK>(k, n, &a[i0 * k..], b, j0, &mut c[i0 * n..])
                }
                (ROW_BLOCK, NARROW_BLOCK) => {
                    gemm_tile::<T, ROW_BLOCK, NARROW_BLOCK>(k, n, &a[i0 * k..], b, j0, &mut c[i0 * n..])
                }
                (_, COL_BLOCK) => {
                    for r in 0..rows {
                        gemm_tile::<T, 1, COL_BLOCK>(k, n, &a[(i0 + r) * k..], b, j0, &mut c[(i0 + r) * n..]);
                    }
                }
                _ => {
                    for r in 0..rows {
                        let arow = &a[(i0 + r) * k..(i0 + r + 1) * k];
                        let crow = &mut c[(i0 + r) * n + j0..(i0 + r) * n + j0 + cols];
                        crow.iter_mut().for_each(|v| *v = T::zero());
                        for (kk, &aik) in arow.iter().enumerate() {
                            let brow = &b[kk * n + j0..kk * n + j0 + cols];
                            for (cv, &bv) in crow.iter_mut().zip(brow) {
                                *cv = *cv + aik * bv;
                            }
                        }
                    }
                }
            }
            j0 += cols;
        }
        i0 += rows;
    }
}

/// One `R × W` output tile held in registers while `k` streams by.
#[inline(always)]
fn gemm_tile<T: Real, const R: usize, const W: usize>(k: usize, n: usize, a: &[T], b: &[T], j0: usize, c: &mut [T]) {
    let mut acc = [[T::zero(); W]; R];
    for kk in 0..k {
        let brow: &[T; W] = b[kk * n + j0..kk * n + j0 + W].try_into().unwrap();
        for (r, acc_row) in acc.iter_mut().enumerate() {
            let aik = a[r * k + kk];
            for j in 0..W {
                acc_row[j] = acc_row[j] + aik * brow[j];
            }
        }
    }
    for (r, acc_row) in acc.iter().enumerate() {
        c[r * n + j0..r * n + j0 + W].copy_from_slice(acc_row);
    }
}

/// `dst = srcᵀ` for `src: (rows, cols)`, in cache-sized blocks.
fn transpose_into<T: Real>(rows: usize, cols: usize, src: &[T], dst: &mut [T]) {
    const B: usize = 16;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

pub(crate) fn transpose<T: Real>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Rows of the output handed to one worker in the parallel matmul.
const MATMUL_ROWS_PER_TASK: usize = 16;

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (Shape::Matrix { rows: m, cols: k }, Shape::Matrix { rows: k2, cols: n }) = (a.shape, b.shape) else {
        return Err(dim_err!(
            "matmul needs rank-2 operands, got {} and {}",
            a.shape,
            b.shape
        ));
    };
    if k != k2 {
        return Err(dim_err!("matmul inner extents differ: {} vs {}", a.shape, b.shape));
    }
    let mut out = Tensor::zeros(Shape::matrix(m, n));
    par::for_each_chunk(out.data_mut(), MATMUL_ROWS_PER_TASK * n, |i, chunk| {
        let r0 = i * MATMUL_ROWS_PER_TASK;
        let rows = chunk.len() / n;
        gemm(rows, k, n, &a.data[r0 * k..(r0 + rows) * k], &b.data, chunk);
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Convolution

/// Static geometry of a 2-D cross-correlation with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(dim_err!("convolution stride must be positive"));
        }
        let out_extent = |size: usize, k: usize| -> Result<usize> {
            let padded = size + 2 * pad;
            if k == 0 || padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(dim_err!(
                    "output extent ({size} + 2*{pad} - {k}) / {stride} + 1 is not integral"
                ));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(ConvGeometry {
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h: out_extent(in_h, kernel_h)?,
            out_w: out_extent(in_w, kernel_w)?,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_pixels()
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    /// Input row read by output row `oh` at kernel row `ki`, if not padding.
    #[inline(always)]
    fn source_row(&self, oh: usize, ki: usize) -> Option<usize> {
        let y = (oh * self.stride + ki).checked_sub(self.pad)?;
        (y < self.in_h).then_some(y)
    }

    /// Output columns `[lo, hi)` whose tap `kj` lands inside the input.
    #[inline(always)]
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = if self.pad > kj {
            (self.pad - kj).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if self.in_w + self.pad > kj {
            ((self.in_w + self.pad - kj - 1) / self.stride + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Patch matrix `(patch_len, out_pixels)` of one image.
    fn im2col<T: Real>(&self, img: &[T], col: &mut [T]) {
        let p_len = self.out_pixels();
        let (s, ow_n) = (self.stride, self.out_w);
        for ci in 0..self.in_channels {
            let chan = &img[ci * self.in_h * self.in_w..(ci + 1) * self.in_h * self.in_w];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let q = (ci * self.kernel_h + ki) * self.kernel_w + kj;
                    let row = &mut col[q * p_len..(q + 1) * p_len];
                    let (lo, hi) = self.valid_cols(kj);
                    for oh in 0..self.out_h {
                        let dst = &mut row[oh * ow_n..(oh + 1) * ow_n];
                        match self.source_row(oh, ki) {
                            None => dst.iter_mut().for_each(|v| *v = T::zero()),
                            Some(y) => {
                                dst[..lo].iter_mut().for_each(|v| *v = T::zero());
                                dst[hi..].iter_mut().for_each(|v| *v = T::zero());
                                let src = &chan[y * self.in_w..(y + 1) * self.in_w];
                                if s == 1 {
                                    dst[lo..hi].copy_from_slice(&src[lo + kj - self.pad..hi + kj - self.pad]);
                                } else {
                                    for (ow, v) in dst[lo..hi].iter_mut().enumerate() {
                                        *v = src[(lo + ow) * s + kj - self.pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a patch-matrix gradient back onto one image.
    fn col2im_add<T: Real>(&self, col: &[T], img: &mut [T]) {
        let p_len = self.out_pixels();
        let (s, ow_n) = (self.stride, self.out_w);
        for ci in 0..self.in_channels {
            let chan = &mut img[ci * self.in_h * self.in_w..(ci + 1) * self.in_h * self.in_w];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let q = (ci * self.kernel_h + ki) * self.kernel_w + kj;
                    let row = &col[q * p_len..(q + 1) * p_len];
                    let (lo, hi) = self.valid_cols(kj);
                    for oh in 0..self.out_h {
                        if let Some(y) = self.source_row(oh, ki) {
                            let dst = &mut chan[y * self.in_w..(y + 1) * self.in_w];
                            let src = &row[oh * ow_n..(oh + 1) * ow_n];
                            if s == 1 {
                                let d = &mut dst[lo + kj - self.pad..hi + kj - self.pad];
                                for (v, &g) in d.iter_mut().zip(&src[lo..hi]) {
                                    *v = *v + g;
                                }
                            } else {
                                for ow in lo..hi {
                                    let v = &mut dst[ow * s + kj - self.pad];
                                    *v = *v + src[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch stored as flat slices.
pub(crate) fn conv_forward_slices<T: Real>(g: &ConvGeometry, x: &[T], kernel: &[T], out: &mut [T]) {
    let n = x.len() / g.in_len();
    debug_assert_eq!(out.len(), n * g.out_len());
    let scratch = || vec![T::zero(); g.patch_len() * g.out_pixels()];
    par::for_each_chunk_with(out, g.out_len(), scratch, |col, img, out_img| {
        g.im2col(&x[img * g.in_len()..(img + 1) * g.in_len()], col);
        gemm(g.out_channels, g.patch_len(), g.out_pixels(), kernel, col, out_img);
    });
}

/// Gradient with respect to the convolution input, overwriting `grad_in`.
pub(crate) fn conv_backward_input_slices<T: Real>(g: &ConvGeometry, kernel: &[T], grad_out: &[T], grad_in: &mut [T]) {
    let kernel_t = transpose(g.out_channels, g.patch_len(), kernel);
    let scratch = || vec![T::zero(); g.patch_len() * g.out_pixels()];
    par::for_each_chunk_with(grad_in, g.in_len(), scratch, |col, img, gin| {
        let gout = &grad_out[img * g.out_len()..(img + 1) * g.out_len()];
        gemm(g.patch_len(), g.out_channels, g.out_pixels(), &kernel_t, gout, col);
        gin.iter_mut().for_each(|v| *v = T::zero());
        g.col2im_add(col, gin);
    });
}

/// Kernel gradient, overwriting `grad_kernel`.
///
/// Per-image contributions are computed independently, then summed in image order.
pub(crate) fn conv_backward_kernel_slices<T: Real>(g: &ConvGeometry, x: &[T], grad_out: &[T], grad_kernel: &mut [T]) {
    let n = x.len() / g.in_len();
    let q_len = g.patch_len();
    let p_len = g.out_pixels();
    let scratch = || (vec![T::zero(); q_len * p_len], vec![T::zero(); p_len * q_len]);
    let per_image: Vec<Vec<T>> = par::map_indices_with(n, scratch, |(col, rows), img| {
        g.im2col(&x[img * g.in_len()..(img + 1) * g.in_len()], col);
        transpose_into(q_len, p_len, col, rows);
        let mut gk = vec![T::zero(); g.kernel_len()];
        let gout = &grad_out[img * g.out_len()..(img + 1) * g.out_len()];
        gemm(g.out_channels, p_len, q_len, gout, rows, &mut gk);
        gk
    });
    grad_kernel.iter_mut().for_each(|v| *v = T::zero());
    for gk in &per_image {
        for (acc, &v) in grad_kernel.iter_mut().zip(gk) {
            *acc = *acc + v;
        }
    }
}

fn conv_geometry_for<T: Real>(x: &Tensor<T>, k: &Tensor<T>, stride: usize, pad: usize) -> Result<ConvGeometry> {
    let Shape::Image { c, h, w, .. } = x.shape else {
        return Err(dim_err!("conv2d input must be rank 4, got {}", x.shape));
    };
    let Shape::Image {
        n: co,
        c: ci,
        h: kh,
        w: kw,
    } = k.shape
    else {
        return Err(dim_err!("conv2d kernel must be rank 4, got {}", k.shape));
    };
    if ci != c {
        return Err(dim_err!("kernel expects {ci} input channels, input has {c}"));
    }
    ConvGeometry::new(c, h, w, co, kh, kw, stride, pad)
}

/// Direct cross-correlation of `x: (N, Cin, H, W)` with `k: (Cout, Cin, kh, kw)`.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, k: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = conv_geometry_for(x, k, stride, pad)?;
    let n = x.shape.batch();
    let mut out = Tensor::zeros(Shape::image(n, g.out_channels, g.out_h, g.out_w));
    conv_forward_slices(&g, &x.data, &k.data, &mut out.data);
    Ok(out)
}

/// Adjoints of [`conv2d_forward`]: `(grad_input, grad_kernel)`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    g_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = conv_geometry_for(x, k, stride, pad)?;
    let expected = Shape::image(x.shape.batch(), g.out_channels, g.out_h, g.out_w);
    if g_out.shape != expected {
        return Err(dim_err!(
            "output gradient has shape {}, expected {expected}",
            g_out.shape
        ));
    }
    let mut gx = Tensor::zeros(x.shape);
    let mut gk = Tensor::zeros(k.shape);
    conv_backward_input_slices(&g, &k.data, &g_out.data, &mut gx.data);
    conv_backward_kernel_slices(&g, &x.data, &g_out.data, &mut gk.data);
    Ok((gx, gk))
}

// ---------------------------------------------------------------------------
// Channel reductions

/// Calls `f(channel, run)` for every contiguous run of one channel, in
/// batch order.
#[inline]
pub(crate) fn for_each_channel_run<T>(shape: Shape, data: &[T], mut f: impl FnMut(usize, usize, &[T])) {
    let c = shape.channels();
    let s = shape.spatial();
    for n in 0..shape.batch() {
        for ch in 0..c {
            let base = (n * c + ch) * s;
            f(ch, base, &data[base..base + s]);
        }
    }
}

pub(crate) fn channel_moments_slice<T: Real>(shape: Shape, data: &[T]) -> (Vec<f64>, Vec<f64>) {
    let c = shape.channels();
    let count = shape.per_channel_count() as f64;
    let mut mean = vec![0.0f64; c];
    for_each_channel_run(shape, data, |ch, _, run| {
        mean[ch] += run.iter().fold(0.0f64, |a, v| a + v.as_f64());
    });
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0f64; c];
    for_each_channel_run(shape, data, |ch, _, run| {
        let m = mean[ch];
        var[ch] += run.iter().fold(0.0f64, |a, v| {
            let d = v.as_f64() - m;
            a + d * d
        });
    });
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// Per-channel population mean and variance over batch and spatial positions.
pub fn channel_moments<T: Real>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    channel_moments_slice(x.shape, &x.data)
}

pub(crate) fn channel_sum_slice<T: Real>(shape: Shape, data: &[T]) -> Vec<f64> {
    let mut sum = vec![0.0f64; shape.channels()];
    for_each_channel_run(shape, data, |ch, _, run| {
        sum[ch] += run.iter().fold(0.0f64, |a, v| a + v.as_f64());
    });
    sum
}

/// Per-channel sum over batch and spatial positions.
pub fn channel_sum<T: Real>(x: &Tensor<T>) -> Vec<f64> {
    channel_sum_slice(x.shape, &x.data)
}
