//! Execution mode for the data-parallel loops in this crate.
//!
//! Every helper preserves input order in its output, so results are the
//! same in both modes. Reductions are always performed sequentially over
//! the collected per-item results.

/// How a batch of independent work items is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Uses the rayon global pool. Without the `parallel` feature this
    /// behaves exactly like [`Exec::Sequential`].
    Parallel,
}

impl Exec {
    /// `Parallel` when the `parallel` feature is compiled in.
    pub const fn default_mode() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Default for Exec {
    fn default() -> Self {
        Self::default_mode()
    }
}

/// Map `f` over `items`, keeping order.
pub fn map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Map `f` over `0..n`, keeping order.
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Fill `out` row by row; `f(y, row)` writes one row of `row_len` elements.
pub fn for_each_row<T, F>(exec: Exec, out: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            out.par_chunks_mut(row_len).enumerate().for_each(|(y, row)| f(y, row));
        }
        _ => out.chunks_mut(row_len).enumerate().for_each(|(y, row)| f(y, row)),
    }
}
