//! Data-parallel kernels with sequential twins.
//!
//! With the `parallel` feature (default) the `*` entry points dispatch to rayon once
//! the workload crosses a size threshold; without it they alias the `*_seq` twins.
//! Both paths perform arithmetic in the same order: elementwise kernels own disjoint
//! output slots, and reductions always combine fixed-size chunk partials in chunk
//! order. Results are therefore bit-identical across thread counts and across the
//! two dispatch modes, which is what makes seeded runs byte-reproducible.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk length for deterministic reductions.
pub const SUM_CHUNK: usize = 4096;

/// Minimum element count before an elementwise kernel goes parallel.
pub const MIN_PAR_LEN: usize = 8192;

/// Minimum total work (rows * row length) before a rowwise kernel goes parallel.
pub const MIN_PAR_WORK: usize = 16384;

/// Minimum item count before `map_collect` goes parallel (items are assumed coarse).
pub const MIN_PAR_ITEMS: usize = 4;

/// Reports whether the parallel dispatch path is compiled in.
pub fn enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Fills `out[i] = f(i)` sequentially.
pub fn fill_seq(out: &mut [f64], f: impl Fn(usize) -> f64 + Sync) {
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = f(i);
    }
}

/// Fills `out[i] = f(i)`, in parallel for large `out`.
pub fn fill(out: &mut [f64], f: impl Fn(usize) -> f64 + Sync) {
    #[cfg(feature = "parallel")]
    if out.len() >= MIN_PAR_LEN {
        out.par_iter_mut()
            .enumerate()
            .for_each(|(i, slot)| *slot = f(i));
        return;
    }
    fill_seq(out, f);
}

fn chunk_sum(chunk: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &x in chunk {
        acc += x;
    }
    acc
}

/// Sums in fixed [`SUM_CHUNK`] chunks, combining partials in chunk order.
pub fn sum_seq(xs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for chunk in xs.chunks(SUM_CHUNK) {
        acc += chunk_sum(chunk);
    }
    acc
}

/// Deterministic sum: identical to [`sum_seq`] bit for bit, chunk partials computed
/// in parallel for large inputs.
pub fn sum(xs: &[f64]) -> f64 {
    #[cfg(feature = "parallel")]
    if xs.len() >= MIN_PAR_LEN {
        let partials: Vec<f64> = xs.par_chunks(SUM_CHUNK).map(chunk_sum).collect();
        return chunk_sum(&partials);
    }
    sum_seq(xs)
}

/// Applies `f(row_index, row)` to each `row_len` slice of `out`, sequentially.
pub fn rowwise_seq(out: &mut [f64], row_len: usize, f: impl Fn(usize, &mut [f64]) + Sync) {
    for (r, row) in out.chunks_mut(row_len).enumerate() {
        f(r, row);
    }
}

/// Applies `f(row_index, row)` to each `row_len` slice of `out`, in parallel when the
/// total work is large. Rows are disjoint, so the dispatch mode cannot change results.
pub fn rowwise(out: &mut [f64], row_len: usize, f: impl Fn(usize, &mut [f64]) + Sync) {
    #[cfg(feature = "parallel")]
    if out.len() >= MIN_PAR_WORK && out.len() / row_len.max(1) >= 2 {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(r, row)| f(r, row));
        return;
    }
    rowwise_seq(out, row_len, f);
}

/// Maps `f` over `0..n` sequentially, collecting results in index order.
pub fn map_collect_seq<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Maps `f` over `0..n`, in parallel for coarse-grained items, preserving order.
pub fn map_collect<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    if n >= MIN_PAR_ITEMS {
        return (0..n).into_par_iter().map(f).collect();
    }
    map_collect_seq(n, f)
}
