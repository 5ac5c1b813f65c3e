//! Optional data parallelism controlled by `PILLARGEN_THREADS`.
//!
//! `0` (or an unset/invalid variable) runs everything on the calling thread.
//! Any positive value runs on a dedicated pool of that many threads. Results
//! always come back in input order, so reductions stay bit-identical.

use rayon::prelude::*;

pub const THREADS_ENV: &str = "PILLARGEN_THREADS";

/// Thread count requested through the environment; `0` means serial.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

/// Maps `f` over `items` with up to `threads` workers, preserving order.
pub fn map_ordered<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("falling back to serial execution: {e}");
            items.iter().map(f).collect()
        }
    }
}
