//! Row-level data parallelism with a sequential fallback.
//!
//! Work is split only across independent rows or items; every reduction
//! inside an item runs sequentially, so results are bitwise identical for
//! any thread count and for either [`Exec`] mode. Without the `parallel`
//! feature, [`Exec::Parallel`] runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

// Below this many output elements the rayon split costs more than it saves.
#[cfg(feature = "parallel")]
const PAR_MIN_ELEMS: usize = 4096;

/// Calls `f(row_index, row)` for every `cols`-wide chunk of `data`.
pub fn for_each_row<F>(exec: Exec, data: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if cols == 0 {
        return;
    }
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel if data.len() >= PAR_MIN_ELEMS => {
            data.par_chunks_mut(cols)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
        }
        _ => data
            .chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| f(i, row)),
    }
}

/// Maps `0..n` through `f`, preserving order.
pub fn map_range<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel if n > 1 => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}
