//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these map onto rayon; without it
//! they degrade to plain iterator loops. Both builds produce bit-identical
//! results: maps preserve element order and callers reduce sequentially, so
//! no floating-point sum ever depends on thread scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Order-preserving map over `0..n`.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Order-preserving map over `0..n`.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Order-preserving map over a slice.
#[cfg(feature = "parallel")]
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Order-preserving map over a slice.
#[cfg(not(feature = "parallel"))]
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Whether this build runs batch work on rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Configure the global rayon pool to `threads` workers. No-op on the
/// sequential build or if a pool already exists (rayon allows one global
/// initialization per process).
#[cfg(feature = "parallel")]
pub fn configure_threads(threads: usize) {
    if threads == 0 {
        return;
    }
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
}

/// Configure the global rayon pool to `threads` workers. No-op on the
/// sequential build or if a pool already exists (rayon allows one global
/// initialization per process).
#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_threads: usize) {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_preserves_order() {
        let v = map_indexed(100, |i| i * i);
        assert_eq!(v, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn map_slice_preserves_order() {
        let input: Vec<f64> = (0..50).map(|i| i as f64 * 0.5).collect();
        let out = map_slice(&input, |x| x * 2.0);
        assert_eq!(out, input.iter().map(|x| x * 2.0).collect::<Vec<_>>());
    }
}
