//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (default) inner loops fan out over a rayon
//! pool; without it, or with `force_sequential(true)` (set by
//! `--threads 1` / `TCORE_THREADS=1`), everything runs on the calling
//! thread. Work is partitioned so that each unit owns a disjoint output
//! slice, which keeps results bit-identical across thread counts.

use std::sync::atomic::{AtomicBool, Ordering};

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

pub fn force_sequential(on: bool) {
    SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_sequential() -> bool {
    !cfg!(feature = "parallel") || SEQUENTIAL.load(Ordering::SeqCst)
}

/// Fill an `n_rows * row_len` buffer, one closure call per row.
pub fn map_chunks<T, F>(n_rows: usize, row_len: usize, f: F) -> Vec<T>
where
    T: Default + Clone + Send + Sync,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    let mut out = vec![T::default(); n_rows * row_len];
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
        return out;
    }
    for (i, chunk) in out.chunks_mut(row_len).enumerate() {
        f(i, chunk);
    }
    out
}

/// Map an index range to owned values, in order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
