//! Data-parallel execution helpers.
//!
//! Inner loops that map independent work items (batch elements, seeds,
//! ablation rows) go through [`map_indexed`], which runs on rayon when the
//! `parallel` feature is enabled and falls back to a plain sequential loop
//! otherwise. Results come back in index order and reductions happen
//! sequentially afterwards, so outputs are bit-identical across thread
//! counts and between the two paths.

/// Sequential reference path. Always available; the benchmark suite compares
/// it against the parallel path.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_indexed_par<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Maps `f` over `0..n`, parallel when built with the `parallel` feature.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_indexed_par(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_seq(n, f)
    }
}
