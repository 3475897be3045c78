//! Worker pool sized by `TPIE_THREADS` (one worker when unset). Results are
//! always returned in input order.

use std::sync::OnceLock;

use rayon::prelude::*;

pub const THREADS_VAR: &str = "TPIE_THREADS";

pub fn workers() -> usize {
    std::env::var(THREADS_VAR)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = workers();
        (n > 1).then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .expect("thread pool")
        })
    })
    .as_ref()
}

pub fn map<I, R, F>(items: impl IntoIterator<Item = I>, f: F) -> Vec<R>
where
    I: Send,
    R: Send,
    F: Fn(I) -> R + Sync + Send,
{
    let items: Vec<I> = items.into_iter().collect();
    match pool() {
        Some(p) => p.install(|| items.into_par_iter().map(f).collect()),
        None => items.into_iter().map(f).collect(),
    }
}
