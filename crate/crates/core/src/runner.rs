//! Execution strategy for batches of independent jobs.
//!
//! Training, purification, probe batches, and evaluation all map a pure
//! function over an index range and reduce the results in index order. The
//! [`Runner`] trait abstracts *where* the jobs run; because results come back
//! ordered and every job seeds its own rng stream, any implementation yields
//! bit-identical output to [`Sequential`]. The thread-pool implementation
//! lives in the companion crate.

use alloc::vec::Vec;

/// Maps `f` over `0..n`. Implementations MUST return results in index order
/// and MUST call `f` exactly once per index; they may do so concurrently.
pub trait Runner: Sync {
    fn map_indexed<T: Send>(&self, n: usize, f: &(dyn Fn(usize) -> T + Sync)) -> Vec<T>;
}

/// Reference single-threaded runner.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Runner for Sequential {
    fn map_indexed<T: Send>(&self, n: usize, f: &(dyn Fn(usize) -> T + Sync)) -> Vec<T> {
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_preserves_order() {
        let out = Sequential.map_indexed(5, &|i| i * i);
        assert_eq!(out, alloc::vec![0, 1, 4, 9, 16]);
    }
}
