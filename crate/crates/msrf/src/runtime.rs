use std::sync::OnceLock;

use rayon::prelude::*;

/// Thread cap from `MSRF_THREADS` (0 or unset = rayon default).
///
/// Every parallel loop in the crate writes disjoint output slices and keeps
/// each reduction serial inside one task, so results are bit-identical at
/// any thread count; `MSRF_THREADS=1` additionally forces serial execution.
pub fn max_threads() -> usize {
    static CAP: OnceLock<usize> = OnceLock::new();
    *CAP.get_or_init(|| {
        std::env::var("MSRF_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0)
    })
}

/// Runs `f(i, chunk)` over consecutive `chunk_len`-sized pieces of `data`,
/// in parallel unless `MSRF_THREADS=1`.
pub fn for_each_chunk<F>(data: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(chunk_len > 0 && data.len() % chunk_len == 0);
    if max_threads() == 1 {
        for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
            f(i, chunk);
        }
    } else {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
}
