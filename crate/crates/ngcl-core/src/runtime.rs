//! Process-wide execution knobs.

use std::sync::OnceLock;

/// Environment variable capping worker threads. Defaults to 1; results are
/// bit-identical at any setting because parallel sections partition work
/// row-wise (see `tensor::Tensor::matmul`) or per independent run.
pub const THREADS_ENV: &str = "NGCL_THREADS";

static INIT: OnceLock<usize> = OnceLock::new();

/// Number of threads requested via `NGCL_THREADS` (default 1).
pub fn configured_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Install the global thread pool sized from `NGCL_THREADS`. Idempotent;
/// later calls return the pool size chosen first.
pub fn init_threads() -> usize {
    *INIT.get_or_init(|| {
        let n = configured_threads();
        // Ignore the error if a pool already exists (e.g. under a test
        // harness that raced us); sizing is best-effort.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        n
    })
}
