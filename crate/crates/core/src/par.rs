//! Data-parallel map with a sequential fallback.
//!
//! Every parallel loop in the crate goes through [`map`]: results are
//! collected in index order and any reduction happens afterwards on the
//! calling thread, so output is bit-identical with or without the
//! `parallel` feature and regardless of the worker count.
//!
//! The worker count is capped by `REVAR_THREADS` when set.

#[cfg(feature = "parallel")]
use std::sync::OnceLock;

#[cfg(feature = "parallel")]
static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

/// Worker count requested through the environment, if any.
pub fn requested_threads() -> Option<usize> {
    std::env::var("REVAR_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

#[cfg(feature = "parallel")]
fn pool() -> Option<&'static rayon::ThreadPool> {
    POOL.get_or_init(|| {
        let n = requested_threads().unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
        if n <= 1 {
            return None;
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()
    })
    .as_ref()
}

/// Whether [`map`] will actually fan out.
pub fn is_parallel() -> bool {
    #[cfg(feature = "parallel")]
    {
        pool().is_some()
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// `(0..n).map(f).collect()`, fanned out over the worker pool when the
/// `parallel` feature is on. Order of the returned vector is always `0..n`.
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n > 1 {
            if let Some(pool) = pool() {
                use rayon::prelude::*;
                return pool.install(|| (0..n).into_par_iter().map(&f).collect());
            }
        }
    }
    map_seq(n, f)
}

/// Sequential reference for [`map`].
pub fn map_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
