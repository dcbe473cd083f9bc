//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it
//! they run on the calling thread. Both paths produce identical results:
//! outputs keep index order and reductions always combine fixed-size chunks
//! in index order, independent of the thread count.

/// Number of items summed sequentially before chunk partials are combined.
pub const REDUCE_CHUNK: usize = 16;

/// `(0..n).map(f).collect()`, possibly in parallel, preserving order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Deterministic chunked reduction of `n` vector-valued contributions.
///
/// `accumulate(i, acc)` adds item `i` into `acc` (a zeroed buffer of length
/// `len`). Items are grouped into chunks of [`REDUCE_CHUNK`]; each chunk is
/// accumulated sequentially, then the chunk partials are summed in order.
pub fn chunked_sum<F>(n: usize, len: usize, accumulate: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    chunked_reduce(n, len, |range, acc| {
        for i in range {
            accumulate(i, acc);
        }
    })
}

/// Like [`chunked_sum`], but hands each whole chunk `start..end` to
/// `accumulate` at once so it can be processed as a batch.
pub fn chunked_reduce<F>(n: usize, len: usize, accumulate: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync + Send,
{
    let n_chunks = n.div_ceil(REDUCE_CHUNK);
    let partials = map_indexed(n_chunks, |c| {
        let mut acc = vec![0.0; len];
        accumulate(c * REDUCE_CHUNK..((c + 1) * REDUCE_CHUNK).min(n), &mut acc);
        acc
    });
    let mut total = vec![0.0; len];
    for p in &partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Runs `f` with data-parallel helpers limited to `threads` workers (0 means
/// the default pool). Results do not depend on the count.
pub fn with_threads<R, F>(threads: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            return f();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}
