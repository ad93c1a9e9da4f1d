//! Scene-level data parallelism.
//!
//! Every batch operation in the crate goes through [`map`]. With the
//! `parallel` feature (on by default) [`Execution::Parallel`] fans out over
//! rayon's pool; without it every call runs sequentially. Results always come
//! back in input order so downstream reductions are order-deterministic.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// `Parallel` only when the crate was built with rayon.
    pub fn effective(self) -> Execution {
        if cfg!(feature = "parallel") {
            self
        } else {
            Execution::Sequential
        }
    }
}

pub fn map<T, R, F>(items: &[T], exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec.effective() {
        Execution::Sequential => items.iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        #[cfg(not(feature = "parallel"))]
        Execution::Parallel => unreachable!(),
    }
}

/// Like [`map`] for fallible closures; the first error in input order wins.
pub fn try_map<T, R, E, F>(items: &[T], exec: Execution, f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    map(items, exec, f).into_iter().collect()
}

/// Runs `f` inside a pool of `jobs` threads (`jobs == 1` forces sequential).
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce(Execution) -> R + Send) -> R {
    if jobs <= 1 {
        return f(Execution::Sequential);
    }
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            Ok(pool) => pool.install(|| f(Execution::Parallel)),
            Err(e) => {
                log::warn!("falling back to the global pool: {e}");
                f(Execution::Parallel)
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        f(Execution::Sequential)
    }
}
