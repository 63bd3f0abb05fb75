//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] runs on the rayon
//! pool; without it every call runs sequentially. Results are always returned
//! in input order, so both paths produce identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Exec {
    /// Parallel when the crate was built with rayon, sequential otherwise.
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
        Exec::default_mode()
    }
}

/// Map `f` over `items`, preserving order.
pub fn map<T, U, F>(exec: Exec, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

/// Map `f` over contiguous chunks of `items` and concatenate the results.
pub fn map_chunks<T, U, F>(exec: Exec, items: &[T], chunk: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&[T]) -> Vec<U> + Sync + Send,
{
    let chunk = chunk.max(1);
    let parts: Vec<Vec<U>> = match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => items.par_chunks(chunk).map(f).collect(),
        _ => items.chunks(chunk).map(f).collect(),
    };
    parts.into_iter().flatten().collect()
}
