use crate::error::{Error, Result};

/// Runs `f` on a dedicated pool of `workers` threads; every parallel iterator
/// inside uses that pool. `workers == 0` means the global default.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}
