//! Deterministic data-parallel helpers.
//!
//! Every hot loop in the crate funnels through [`map_chunks`] or
//! [`for_each_slice`]. With the `parallel` feature (default) the chunks run
//! on the rayon pool; without it, or after [`force_sequential`], they run
//! in order on the calling thread. Chunk boundaries are fixed by
//! `chunk_len`, never by the scheduler, and callers combine chunk results
//! in index order, so the floating-point result is bit-identical across
//! thread counts and both execution modes.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Route all subsequent parallel helpers through the sequential path.
///
/// Useful for benchmarking the two execution modes against each other and
/// for debugging; output is unchanged either way. No-op when the crate is
/// built without the `parallel` feature (it is already sequential).
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

/// Whether the parallel path is compiled in and currently enabled.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Map fixed-size chunks of `items` to values, returning them in chunk order.
///
/// `f` receives the chunk index and the chunk slice. The caller folds the
/// returned vector sequentially, which keeps any floating-point reduction
/// order independent of thread scheduling.
pub fn map_chunks<T, R, F>(items: &[T], chunk_len: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return items
            .par_chunks(chunk_len)
            .enumerate()
            .map(|(i, c)| f(i, c))
            .collect();
    }
    items
        .chunks(chunk_len)
        .enumerate()
        .map(|(i, c)| f(i, c))
        .collect()
}

/// Run `f` over equal-length chunks of a mutable output slice.
///
/// Chunks are disjoint, so writes never race; `f` gets the chunk index and
/// the chunk. Used for per-pixel/per-point work that writes results in place.
pub fn for_each_slice<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    out.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Fold per-chunk partial results produced by [`map_chunks`] in chunk order.
pub fn fold_in_order<R, A, F>(parts: Vec<R>, init: A, mut f: F) -> A
where
    F: FnMut(A, R) -> A,
{
    parts.into_iter().fold(init, |acc, p| f(acc, p))
}
