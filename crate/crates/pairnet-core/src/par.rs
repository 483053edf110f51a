//! Data-parallel helpers with a sequential fallback.
//!
//! Evaluation and dataset synthesis are embarrassingly parallel across
//! images, so they funnel through [`map_ordered`]: with the default
//! `parallel` feature it fans work out over a rayon thread pool, and with
//! `--no-default-features` it degrades to a plain sequential loop. Both
//! paths return results in input order, so callers see identical output
//! either way (the per-item work itself must be deterministic, which holds
//! everywhere this crate uses it: every item derives its randomness from
//! its own index, never from shared mutable state).

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to every item and collects the results in input order.
#[cfg(feature = "parallel")]
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Applies `f` to every item and collects the results in input order.
#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Like [`map_ordered`] but for fallible work: the first error wins and the
/// rest of the batch is discarded.
pub fn try_map_ordered<T, U, F>(items: &[T], f: F) -> crate::Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> crate::Result<U> + Sync + Send,
{
    map_ordered(items, f).into_iter().collect()
}
