use std::fmt::{Debug, Display};

use num_traits::Float;

/// Storage precision of a tensor element.
///
/// Only `f32` and `f64` implement this. Reductions always accumulate in
/// `f64` regardless of the storage type.
pub trait Real: Float + Debug + Display + Default + Send + Sync + 'static {
    const BYTES: usize;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const BYTES: usize = 4;
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const BYTES: usize = 8;
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}
