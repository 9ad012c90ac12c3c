//! Data-parallel map helpers with a sequential fallback.
//!
//! Results are collected in input order, so the parallel and sequential
//! paths produce bitwise-identical outputs when later reduced in order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Sequential reference path; always available for benchmarks.
pub fn map_collect_seq<T: Sync, R: Send, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Rayon path, order-preserving.
#[cfg(feature = "parallel")]
pub fn map_collect_par<T: Sync, R: Send, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Default path: parallel when the `parallel` feature is on.
pub fn map_collect<T: Sync, R: Send, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_collect_par(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_collect_seq(items, f)
    }
}
