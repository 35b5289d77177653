//! Data-parallel fan-out with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] runs on the rayon
//! pool; without it every call runs sequentially. Results are collected in
//! index order either way, so output never depends on the executor.

/// How to run an index-parallel map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// True when this executor actually fans out.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// `(0..n).map(f).collect()`, possibly on worker threads.
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Fallible variant of [`map_range`]; returns the first error by index.
pub fn try_map_range<R, E, F>(exec: Exec, n: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    map_range(exec, n, f).into_iter().collect()
}

/// Sizes the global rayon pool from `CONSNET_THREADS` when set.
pub fn init_thread_pool_from_env() -> anyhow::Result<()> {
    #[cfg(feature = "parallel")]
    if let Ok(v) = std::env::var("CONSNET_THREADS") {
        let n: usize = v.parse().map_err(|_| {
            anyhow::anyhow!("CONSNET_THREADS must be a positive integer, got {v:?}")
        })?;
        if n == 0 {
            anyhow::bail!("CONSNET_THREADS must be positive");
        }
        // A second initialization fails harmlessly; keep the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}
