//! Worker-count control. Results are byte-identical for any worker count;
//! the cap only bounds parallelism.

pub const THREADS_ENV: &str = "SURFNERF_THREADS";

/// Worker cap from `SURFNERF_THREADS`, if set to a positive integer.
pub fn thread_cap_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0)
}

/// Run `f` inside a rayon pool of `threads` workers (or the current/global
/// pool when `None`).
pub fn with_pool<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("failed to build worker pool")
            .install(f),
        None => f(),
    }
}
