//! Order-fixed reductions.
//!
//! Every floating-point sum in the crate that may run in parallel goes
//! through here. Work is split into chunks whose boundaries depend only on
//! the input length, partial sums are collected in chunk order and then
//! combined pairwise, so results are bit-identical for any thread count.

use rayon::prelude::*;

const CHUNK: usize = 4096;

/// Pairwise summation of a slice.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Deterministic parallel sum of `f(i)` for `i in 0..n`.
pub fn par_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partial: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            (lo..hi).map(&f).sum()
        })
        .collect();
    pairwise_sum(&partial)
}

/// Deterministic parallel sum of a fixed-size vector quantity.
pub fn par_sum_vec<const K: usize, F>(n: usize, f: F) -> [f64; K]
where
    F: Fn(usize, &mut [f64; K]) + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partial: Vec<[f64; K]> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut acc = [0.0; K];
            for i in lo..hi {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut out = [0.0; K];
    for k in 0..K {
        let col: Vec<f64> = partial.iter().map(|p| p[k]).collect();
        out[k] = pairwise_sum(&col);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let xs: Vec<f64> = (0..10_000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 49_995_000.0);
        assert_eq!(par_sum(xs.len(), |i| xs[i]), 49_995_000.0);
    }

    #[test]
    fn vector_sum() {
        let s = par_sum_vec::<2, _>(9000, |i, acc| {
            acc[0] += 1.0;
            acc[1] += i as f64;
        });
        assert_eq!(s, [9000.0, 40_495_500.0]);
    }
}
