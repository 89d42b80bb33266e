//! Reusable full-precision activation buffers with high-water instrumentation.

use crate::error::{Error, Result};
use crate::Real;

/// Index of an acquired buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot(usize);

/// At most `limit` equally sized full-precision buffers, created on first
/// demand and recycled for the life of the pool.
///
/// Every activation and activation gradient the engine holds in full
/// precision lives in one of these buffers, so the peak counters are the
/// engine's full-precision high-water marks.
#[derive(Debug)]
pub struct BufferPool<T> {
    limit: usize,
    slot_len: usize,
    buffers: Vec<Vec<T>>,
    in_use: Vec<bool>,
    live: usize,
    peak_live: usize,
}

impl<T: Real> BufferPool<T> {
    pub fn new(limit: usize) -> Self {
        BufferPool {
            limit,
            slot_len: 0,
            buffers: Vec::new(),
            in_use: Vec::new(),
            live: 0,
            peak_live: 0,
        }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    /// Makes every buffer hold `len` elements, dropping the old storage
    /// (and the peak counters) when the size changes.
    pub fn resize(&mut self, len: usize) -> Result<()> {
        if self.live != 0 {
            return Err(Error::State("cannot resize a pool with buffers in use".into()));
        }
        if len != self.slot_len {
            self.slot_len = len;
            self.buffers.clear();
            self.in_use.clear();
            self.peak_live = 0;
        }
        Ok(())
    }

    pub fn acquire(&mut self) -> Result<Slot> {
        let idx = match self.in_use.iter().position(|&u| !u) {
            Some(i) => i,
            None if self.buffers.len() < self.limit => {
                self.buffers.push(vec![T::zero(); self.slot_len]);
                self.in_use.push(false);
                self.buffers.len() - 1
            }
            None => {
                return Err(Error::State(format!(
                    "more than {} full-precision buffers requested",
                    self.limit
                )))
            }
        };
        self.in_use[idx] = true;
        self.live += 1;
        self.peak_live = self.peak_live.max(self.live);
        Ok(Slot(idx))
    }

    pub fn release(&mut self, slot: Slot) {
        debug_assert!(self.in_use[slot.0], "double release");
        self.in_use[slot.0] = false;
        self.live -= 1;
    }

    pub fn get(&self, slot: Slot, len: usize) -> &[T] {
        &self.buffers[slot.0][..len]
    }

    pub fn get_mut(&mut self, slot: Slot, len: usize) -> &mut [T] {
        &mut self.buffers[slot.0][..len]
    }

    /// Two distinct buffers, the first read-write and the second read-write.
    pub fn pair_mut(&mut self, a: (Slot, usize), b: (Slot, usize)) -> (&mut [T], &mut [T]) {
        assert_ne!(a.0, b.0, "pair_mut needs distinct slots");
        let (lo, hi, flip) = if a.0 .0 < b.0 .0 { (a, b, false) } else { (b, a, true) };
        let (left, right) = self.buffers.split_at_mut(hi.0 .0);
        let x = &mut left[lo.0 .0][..lo.1];
        let y = &mut right[0][..hi.1];
        if flip {
            (y, x)
        } else {
            (x, y)
        }
    }

    pub fn live(&self) -> usize {
        self.live
    }

    /// Most buffers simultaneously in use since creation or the last resize.
    pub fn peak_live(&self) -> usize {
        self.peak_live
    }

    /// Bytes of full-precision storage the pool has allocated.
    pub fn allocated_bytes(&self) -> usize {
        self.buffers.len() * self.slot_len * T::BYTES
    }

    pub fn slot_bytes(&self) -> usize {
        self.slot_len * T::BYTES
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn limit_and_peaks() {
        let mut pool = BufferPool::<f32>::new(2);
        pool.resize(4).unwrap();
        let a = pool.acquire().unwrap();
        let b = pool.acquire().unwrap();
        assert!(matches!(pool.acquire(), Err(Error::State(_))));
        pool.release(a);
        let c = pool.acquire().unwrap();
        assert_eq!(c, a);
        assert_eq!((pool.peak_live(), pool.allocated_bytes()), (2, 32));
        {
            let (x, y) = pool.pair_mut((b, 4), (c, 2));
            x[0] = 1.0;
            y[1] = 2.0;
        }
        assert_eq!(pool.get(b, 1), &[1.0]);
        assert_eq!(pool.get(c, 2)[1], 2.0);
        assert!(pool.resize(8).is_err());
        pool.release(b);
        pool.release(c);
        pool.resize(8).unwrap();
        assert_eq!((pool.peak_live(), pool.allocated_bytes()), (0, 0));
    }
}
