use std::ops::Range;

use rayon::prelude::*;

/// Samples per work unit. Fixed so reductions are independent of threads.
pub(crate) const CHUNK: usize = 8;

/// Runs `f` over fixed chunks of `0..n`, each filling a zeroed accumulator of
/// length `len`, and sums the accumulators in chunk order.
pub(crate) fn chunked_sum<F>(n: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(Range<usize>, &mut [f64]) + Sync,
{
    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; len];
            f(c * CHUNK..((c + 1) * CHUNK).min(n), &mut acc);
            acc
        })
        .collect();
    let mut total = vec![0.0; len];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Like [`chunked_sum`], but `f` also returns a per-sample value; values come
/// back in sample order.
pub(crate) fn chunked_map_sum<T, F>(n: usize, len: usize, f: F) -> (Vec<T>, Vec<f64>)
where
    T: Send,
    F: Fn(usize, &mut [f64]) -> T + Sync,
{
    let n_chunks = n.div_ceil(CHUNK);
    let parts: Vec<(Vec<T>, Vec<f64>)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; len];
            let vals = (c * CHUNK..((c + 1) * CHUNK).min(n)).map(|s| f(s, &mut acc)).collect();
            (vals, acc)
        })
        .collect();
    let mut values = Vec::with_capacity(n);
    let mut total = vec![0.0; len];
    for (vals, acc) in parts {
        values.extend(vals);
        for (t, v) in total.iter_mut().zip(acc) {
            *t += v;
        }
    }
    (values, total)
}
