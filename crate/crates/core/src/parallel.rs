//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (the default) these run on rayon; without it
//! they degrade to plain loops. Both paths perform the same floating-point
//! operations in the same order per element, and every reduction in the
//! crate folds the collected per-element results sequentially in index
//! order, so outputs are bitwise identical across feature settings and
//! thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Map `f` over a slice, collecting results in input order.
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Fill disjoint `chunk_len`-sized chunks of `out`, one call per chunk.
/// Each chunk is written by exactly one closure invocation, so no ordering
/// question arises.
pub fn fill_chunks<F>(out: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(idx, chunk)| f(idx, chunk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(idx, chunk)| f(idx, chunk));
    }
}

/// Run `f` inside a pool of `threads` workers (0 = library default). With
/// the sequential fallback the thread count is inert and `f` runs inline.
pub fn with_pool<R, F>(threads: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            f()
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("thread pool construction")
                .install(f)
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}
