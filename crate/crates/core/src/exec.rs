//! Execution backends.
//!
//! Every parallel computation in the crate is expressed as an
//! order-preserving map over a fixed partition of the input, followed by a
//! sequential fold of the partial results in partition order. The partition
//! depends only on the input size, never on the worker count, so both
//! backends produce bit-identical floating-point results.

use std::ops::Range;

/// Number of samples (or neurons, or pairs) per reduction chunk.
pub const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Backend {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Backend::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Backend::Sequential
        }
    }
}

impl Backend {
    /// Maps `f` over `0..n`, preserving index order in the output.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Backend::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Backend::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
        }
    }

    /// Calls `f(index, chunk)` on consecutive `len`-sized chunks of `data`,
    /// returning the results in chunk order.
    pub fn map_chunks_mut<T, R, F>(self, data: &mut [T], len: usize, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(usize, &mut [T]) -> R + Sync + Send,
    {
        match self {
            Backend::Sequential => data.chunks_mut(len).enumerate().map(|(i, c)| f(i, c)).collect(),
            #[cfg(feature = "parallel")]
            Backend::Parallel => {
                use rayon::prelude::*;
                data.par_chunks_mut(len).enumerate().map(|(i, c)| f(i, c)).collect()
            }
        }
    }

    /// Maps `f` over the fixed `CHUNK`-sized partition of `0..n`.
    pub fn map_chunks<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(Range<usize>) -> R + Sync + Send,
    {
        let chunks = n.div_ceil(CHUNK);
        self.map_range(chunks, |c| f(c * CHUNK..((c + 1) * CHUNK).min(n)))
    }
}

/// Compensation-free f64 sum in slice order.
#[inline]
pub(crate) fn ordered_sum(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc, v| acc + v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_partition_covers_range() {
        let parts = Backend::Sequential.map_chunks(1000, |r| r);
        assert_eq!(parts.len(), 4);
        assert_eq!(parts[0], 0..256);
        assert_eq!(parts[3], 768..1000);
        assert!(Backend::Sequential.map_chunks(0, |r| r).is_empty());
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn backends_agree_bitwise() {
        let f = |r: Range<usize>| r.map(|i| (i as f64).sqrt().sin()).fold(0.0, |a, b| a + b);
        let a = Backend::Sequential.map_chunks(10_000, f);
        let b = Backend::Parallel.map_chunks(10_000, f);
        assert_eq!(ordered_sum(&a).to_bits(), ordered_sum(&b).to_bits());
    }
}
