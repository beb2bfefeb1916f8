//! Data-parallel map with a sequential fallback.
//!
//! Every parallel entry point in the crate goes through [`map_indexed`], which
//! always returns results in index order. Callers reduce the returned vector
//! sequentially, so results are bit-identical whether the `parallel` feature
//! is enabled, how many workers rayon uses, or whether [`sequential`] forced
//! the fallback path.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with every [`map_indexed`] call on this thread forced onto the
/// sequential path.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = FORCE_SEQUENTIAL.with(|c| c.replace(true));
    let out = f();
    FORCE_SEQUENTIAL.with(|c| c.set(prev));
    out
}

/// Whether the current thread would run [`map_indexed`] on rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(|c| c.get())
}

/// Computes `f(0), f(1), ..., f(n - 1)` and returns them in order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Splits `0..n` into fixed-size chunks. Chunk boundaries depend only on
/// `n` and `chunk`, never on the worker count.
pub fn chunk_ranges(n: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    let chunk = chunk.max(1);
    (0..n.div_ceil(chunk))
        .map(|i| i * chunk..((i + 1) * chunk).min(n))
        .collect()
}

/// Fixed-order pairwise summation of equal-length vectors.
pub fn pairwise_sum(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    if parts.is_empty() {
        return Vec::new();
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += *y;
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap_or_default()
}

/// Fixed-order pairwise summation of scalars.
pub fn pairwise_sum_scalar(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => pairwise_sum_scalar(&xs[..n / 2]) + pairwise_sum_scalar(&xs[n / 2..]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn forced_sequential_matches() {
        let f = |i: usize| (i as f64).sin();
        let a = map_indexed(1000, f);
        let b = sequential(|| map_indexed(1000, f));
        assert_eq!(a, b);
        assert!(!sequential(is_parallel));
    }

    #[test]
    fn chunks_cover_range() {
        let c = chunk_ranges(10, 4);
        assert_eq!(c, vec![0..4, 4..8, 8..10]);
        assert!(chunk_ranges(0, 4).is_empty());
    }

    #[test]
    fn pairwise_sums() {
        let parts = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        assert_eq!(pairwise_sum(parts), vec![9.0, 12.0]);
        assert_eq!(pairwise_sum_scalar(&[1.0, 2.0, 3.0, 4.0, 5.0]), 15.0);
    }
}
