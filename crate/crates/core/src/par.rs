//! Data-parallel helpers with a sequential fallback.
//!
//! Everything here preserves input order in its output. Callers reduce the
//! collected results themselves, sequentially, so floating-point sums are
//! identical whichever [`Exec`] mode ran the map.

/// How batch work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled; otherwise the same
    /// as [`Exec::Sequential`].
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Ordered map over a slice.
pub fn map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Ordered map over `0..n`.
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Fixed chunk size for gradient accumulation. Chunk boundaries do not
/// depend on the thread pool, which keeps summation order stable.
pub const CHUNK: usize = 8;

/// Maps `f` over `items` in fixed-size chunks, folding each chunk into an
/// accumulator created by `init`, and returns the per-chunk accumulators in
/// order.
pub fn chunked_fold<T, A, I, F>(exec: Exec, items: &[T], init: I, f: F) -> Vec<A>
where
    T: Sync,
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, &T) + Sync + Send,
{
    let run = |chunk: &[T]| {
        let mut acc = init();
        for item in chunk {
            f(&mut acc, item);
        }
        acc
    };
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_chunks(CHUNK).map(run).collect();
    }
    let _ = exec;
    items.chunks(CHUNK).map(run).collect()
}
