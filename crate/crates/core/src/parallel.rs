//! Ordered fan-out over a fixed number of worker threads.

use rayon::prelude::*;

/// Runs `f(0..n)` on `workers` threads and returns results in index order.
/// With one worker everything runs on the calling thread.
pub fn run_indexed<R, F>(workers: usize, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(_) => (0..n).map(f).collect(),
    }
}

/// Worker count from `EON_NUM_WORKERS` (default 1).
pub fn workers_from_env() -> usize {
    std::env::var("EON_NUM_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or(1)
}
