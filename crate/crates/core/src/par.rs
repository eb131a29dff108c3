//! Execution strategy for the embarrassingly parallel loops (concepts,
//! trials, images). Results are always returned in input order.
//!
//! With the `parallel` feature (default) work is spread over rayon's pool;
//! without it, or under [`Execution::Sequential`], it runs on the caller's
//! thread. Both paths produce identical results.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Run `op` inside a pool with `workers` threads (0 = rayon default).
    pub fn install<R: Send>(self, workers: usize, op: impl FnOnce() -> R + Send) -> R {
        #[cfg(feature = "parallel")]
        if self.is_parallel() && workers > 0 {
            match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
                Ok(pool) => return pool.install(op),
                Err(e) => log::warn!("could not build a {workers}-thread pool: {e}"),
            }
        }
        let _ = workers;
        op()
    }
}
