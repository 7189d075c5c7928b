//! Data-parallel building blocks with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers run on rayon once the
//! workload passes [`PAR_THRESHOLD`]; without it they compile to plain loops.
//! [`set_sequential`] forces the sequential path at runtime, which the bench
//! suite uses to compare both modes in one process. Every closure used here
//! is a pure function of the element index, so both modes produce identical
//! bits.

use std::sync::atomic::{AtomicBool, Ordering};

/// Minimum element count before rayon is engaged.
pub const PAR_THRESHOLD: usize = 4096;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential path even when built with the `parallel` feature.
pub fn set_sequential(force: bool) {
    FORCE_SEQUENTIAL.store(force, Ordering::Relaxed);
}

/// True when this call would be allowed to use rayon for `n` elements.
pub fn parallel_active(n: usize) -> bool {
    cfg!(feature = "parallel") && n >= PAR_THRESHOLD && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// `(0..n).map(f).collect()`, parallel when worthwhile.
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_active(n) {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// In-place `out[i] = f(i, out[i])` over a mutable slice.
pub fn for_each_indexed_mut<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_active(out.len()) {
        use rayon::prelude::*;
        out.par_iter_mut().enumerate().for_each(|(i, x)| f(i, x));
        return;
    }
    for (i, x) in out.iter_mut().enumerate() {
        f(i, x);
    }
}

/// Max of `f(i)` over `0..n`; 0 for empty input. `f` must never return NaN.
pub fn max_indexed<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_active(n) {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).reduce(|| 0.0, f64::max);
    }
    (0..n).map(f).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_matches_sequential() {
        let n = 10_000;
        let par = map_indexed(n, |i| (i * 3) as f64);
        set_sequential(true);
        let seq = map_indexed(n, |i| (i * 3) as f64);
        set_sequential(false);
        assert_eq!(par, seq);
    }

    #[test]
    fn max_over_indices() {
        assert_eq!(max_indexed(100, |i| i as f64), 99.0);
        assert_eq!(max_indexed(0, |_| 1.0), 0.0);
    }
}
