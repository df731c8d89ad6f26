//! Execution policy for the data-parallel loops (projections, kernel rows,
//! sampling chunks, grid points, seeds).
//!
//! With the `parallel` feature enabled, [`Exec::Parallel`] dispatches to rayon;
//! otherwise every policy runs sequentially. Reductions are always performed
//! in index order so both policies produce bit-identical results.

use serde::{Deserialize, Serialize};

/// Rows per independent chunk when batch work is split across threads.
/// Fixed so that results do not depend on the policy or the thread count.
pub const CHUNK_ROWS: usize = 256;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Whether this policy actually runs on the rayon pool in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Evaluate `f(0..n)` and collect in index order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Fallible variant of [`Exec::map_range`]; the first error in index order wins.
    pub fn try_map_range<R, E, F>(self, n: usize, f: F) -> Result<Vec<R>, E>
    where
        R: Send,
        E: Send,
        F: Fn(usize) -> Result<R, E> + Sync + Send,
    {
        self.map_range(n, f).into_iter().collect()
    }
}

/// Split `0..n` into `CHUNK_ROWS`-sized half-open ranges.
pub fn chunks(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n)
        .step_by(CHUNK_ROWS.max(1))
        .map(|start| start..(start + CHUNK_ROWS).min(n))
        .collect()
}

/// Configure the global rayon pool from `TFDL_THREADS`, if set.
///
/// Returns the thread cap that was applied. Calling this more than once is
/// harmless; only the first successful initialisation takes effect.
pub fn init_threads_from_env() -> Option<usize> {
    let cap = std::env::var("TFDL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)?;
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cap).build_global();
    }
    Some(cap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_agree() {
        let f = |i: usize| (i as f64).sqrt();
        assert_eq!(Exec::Sequential.map_range(1000, f), Exec::Parallel.map_range(1000, f));
    }

    #[test]
    fn chunks_cover_range() {
        let c = chunks(600);
        assert_eq!(c.len(), 3);
        assert_eq!(c[2], 512..600);
        assert!(chunks(0).is_empty());
    }
}
