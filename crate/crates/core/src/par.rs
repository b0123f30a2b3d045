//! Thin indirection over rayon so the crate builds with a purely
//! sequential fallback when the `parallel` feature is disabled.
//!
//! Every parallel site in the crate maps an index range to owned values
//! and reduces them in index order, so results are bit-identical across
//! thread counts and to the sequential build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Ordered map over `0..n`.
#[cfg(feature = "parallel")]
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Splits a row-major buffer into contiguous row chunks and hands each
/// chunk (with its starting row) to `f`.
#[cfg(feature = "parallel")]
pub fn for_each_row_chunk<F>(data: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let rows = data.len() / row_len.max(1);
    let threads = rayon::current_num_threads().max(1);
    let rows_per_chunk = rows.div_ceil(threads).max(1);
    data.par_chunks_mut(rows_per_chunk * row_len)
        .enumerate()
        .for_each(|(ci, chunk)| f(ci * rows_per_chunk, chunk));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_row_chunk<F>(data: &mut [f64], _row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    f(0, data);
}
