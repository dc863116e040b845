//! Batch fan-out helpers.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it
//! they run plain sequential loops. Outputs are always collected in input
//! order, so downstream reductions are deterministic under both builds.

#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Sequential map with the same signature bounds as [`par_map`]; the bench
/// suite uses it as the baseline the parallel path is compared against.
pub fn seq_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}
