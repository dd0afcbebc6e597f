//! Execution strategy for the data-parallel inner loops.
//!
//! With the `parallel` feature (on by default) the row loops run on the rayon
//! global pool. Without it, [`Execution::Parallel`] silently degrades to the
//! sequential path. Results never depend on the strategy: every output element
//! is produced by the same sequential arithmetic, only the scheduling differs.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Calls `f(i)` for every `i in 0..n` and collects the results in index order.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Fills `data` one `width`-sized chunk at a time; `f` receives the chunk index.
pub fn fill_chunks<F>(exec: Execution, data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        data.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
        return;
    }
    let _ = exec;
    for (i, chunk) in data.chunks_mut(width).enumerate() {
        f(i, chunk);
    }
}
