//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) work is spread over the rayon
//! pool; without it every call runs on the calling thread. Each output slot is
//! written by exactly one task and no cross-task reductions happen, so results
//! are bitwise identical whichever path runs.

use ndarray::Array2;

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

impl Exec {
    /// Evaluates `f(i)` for `i in 0..n`, preserving index order in the output.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// Calls `f(row_index, row)` for every row of a standard-layout matrix.
    pub fn fill_rows<F>(self, out: &mut Array2<f64>, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        let ncols = out.ncols();
        if ncols == 0 {
            return;
        }
        let data = out
            .as_slice_mut()
            .expect("fill_rows requires a standard-layout matrix");
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => data
                .par_chunks_mut(ncols)
                .enumerate()
                .for_each(|(i, row)| f(i, row)),
            _ => data
                .chunks_mut(ncols)
                .enumerate()
                .for_each(|(i, row)| f(i, row)),
        }
    }
}
