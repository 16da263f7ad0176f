//! Thin dispatch layer between the rayon and sequential execution paths.
//!
//! Every data-parallel loop in the crate funnels through one of these
//! helpers so the `parallel` feature toggles the whole crate at once.
//! Both paths produce results in index order, so outputs are bit-identical
//! regardless of the feature and of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `0..n` through `f`, collecting results in index order.
#[cfg(feature = "parallel")]
pub(crate) fn indexed_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn indexed_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Split `buf` into consecutive chunks of `chunk` elements and fill each
/// through `f(chunk_index, chunk)`. Chunks are disjoint, so the parallel
/// and sequential paths write the same bytes.
#[cfg(feature = "parallel")]
pub(crate) fn chunks_mut_for_each<T, F>(buf: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    buf.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn chunks_mut_for_each<T, F>(buf: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    buf.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Always-sequential variant of [`chunks_mut_for_each`], kept available so
/// benchmarks can compare the two execution paths in a single build.
pub(crate) fn chunks_mut_for_each_seq<T, F>(buf: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    buf.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
