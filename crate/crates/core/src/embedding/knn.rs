//! Exact k-nearest neighbors under the Euclidean metric.
//!
//! High-dimensional points are screened with one `f32` matrix product per
//! block of queries. The rounding error of every screened squared distance is
//! bounded, so the screen keeps every point that can still be among the `k`
//! nearest; those candidates are then ranked by exact distances. The result
//! equals a plain double loop, ties included.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{gemm, Trans};

const QUERY_BLOCK: usize = 256;

/// `k` neighbors per point, nearest first, ties broken by lower index, the
/// point itself excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnGraph {
    pub n: usize,
    pub k: usize,
    /// `n x k`, row-major.
    pub indices: Vec<u32>,
    /// Euclidean distances matching `indices`.
    pub distances: Vec<f64>,
}

impl KnnGraph {
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..][..self.k]
    }

    pub fn distances_of(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..][..self.k]
    }
}

/// Squared distance accumulated in `f64`, in index order. This is the
/// distance every ranking is defined by.
#[inline]
pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        s += d * d;
    }
    s
}

fn check(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k >= n {
        return Err(Error::TooFewPoints { k, n });
    }
    Ok(())
}

/// Rank `(sq, index)` pairs and keep the first `k`.
fn finish(mut cand: Vec<(f64, u32)>, k: usize, idx: &mut [u32], dist: &mut [f64]) {
    cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (slot, (sq, j)) in cand.into_iter().take(k).enumerate() {
        idx[slot] = j;
        dist[slot] = sq.sqrt();
    }
}

/// Exact kNN of the `n = points.len() / dim` rows of `points`.
pub fn knn_graph(points: &[f32], dim: usize, k: usize) -> Result<KnnGraph> {
    if dim == 0 {
        return Err(Error::InvalidArgument("points need at least one dimension".into()));
    }
    let n = points.len() / dim;
    check(n, k)?;
    let norms: Vec<f64> = points.chunks_exact(dim).map(|p| p.iter().map(|&v| v as f64 * v as f64).sum()).collect();
    // |fl(x.y) - x.y| <= gamma_d |x| |y| for any f32 summation order
    let u = f32::EPSILON as f64 / 2.0;
    let gamma = 1.01 * dim as f64 * u / (1.0 - dim as f64 * u);
    let tiny = 8.0 * (dim as f64 + 4.0) * f64::EPSILON;

    let mut indices = vec![0u32; n * k];
    let mut distances = vec![0.0f64; n * k];
    indices
        .par_chunks_mut(QUERY_BLOCK * k)
        .zip(distances.par_chunks_mut(QUERY_BLOCK * k))
        .enumerate()
        .for_each(|(bi, (idx_block, dist_block))| {
            let q0 = bi * QUERY_BLOCK;
            let qb = idx_block.len() / k;
            let queries = &points[q0 * dim..(q0 + qb) * dim];
            let mut dots = vec![0.0f32; qb * n];
            gemm(qb, dim, n, 1.0, queries, Trans::No, points, Trans::Yes, 0.0, &mut dots);
            let mut upper = vec![0.0f64; n];
            let mut lower = vec![0.0f64; n];
            let mut sel = Vec::with_capacity(n);
            for r in 0..qb {
                let i = q0 + r;
                let ni = norms[i];
                let row = &dots[r * n..][..n];
                for j in 0..n {
                    let approx = ni + norms[j] - 2.0 * row[j] as f64;
                    let err = 2.0 * gamma * (ni * norms[j]).sqrt() + tiny * (ni + norms[j]);
                    upper[j] = approx + err;
                    lower[j] = approx - err;
                }
                upper[i] = f64::INFINITY;
                sel.clear();
                sel.extend_from_slice(&upper);
                let (_, kth, _) = sel.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
                let t = *kth;
                let xi = &points[i * dim..][..dim];
                let cand: Vec<(f64, u32)> = (0..n)
                    .filter(|&j| j != i && lower[j] <= t)
                    .map(|j| (sq_dist(xi, &points[j * dim..][..dim]), j as u32))
                    .collect();
                finish(cand, k, &mut idx_block[r * k..][..k], &mut dist_block[r * k..][..k]);
            }
        });
    Ok(KnnGraph {
        n,
        k,
        indices,
        distances,
    })
}

/// Exact kNN by a direct scan; meant for low-dimensional `f64` data such as
/// embedding coordinates.
pub fn knn_graph_f64(points: &[f64], dim: usize, k: usize) -> Result<KnnGraph> {
    if dim == 0 {
        return Err(Error::InvalidArgument("points need at least one dimension".into()));
    }
    let n = points.len() / dim;
    check(n, k)?;
    let mut indices = vec![0u32; n * k];
    let mut distances = vec![0.0f64; n * k];
    indices
        .par_chunks_mut(k)
        .zip(distances.par_chunks_mut(k))
        .enumerate()
        .for_each(|(i, (idx, dist))| {
            let xi = &points[i * dim..][..dim];
            let mut all: Vec<(f64, u32)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let xj = &points[j * dim..][..dim];
                    let mut s = 0.0;
                    for (a, b) in xi.iter().zip(xj) {
                        s += (a - b) * (a - b);
                    }
                    (s, j as u32)
                })
                .collect();
            let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if all.len() > k {
                all.select_nth_unstable_by(k - 1, cmp);
                all.truncate(k);
            }
            finish(all, k, idx, dist);
        });
    Ok(KnnGraph {
        n,
        k,
        indices,
        distances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_points() {
        let g = knn_graph(&[0.0, 1.0, 3.0], 1, 1).unwrap();
        assert_eq!(g.indices, [1, 0, 1]);
        assert_eq!(g.distances, [1.0, 1.0, 2.0]);
        let h = knn_graph_f64(&[0.0, 1.0, 3.0], 1, 1).unwrap();
        assert_eq!(g, h);
    }

    #[test]
    fn duplicates_do_not_match_themselves() {
        let p = [1.0f32, 2.0, 1.0, 2.0, 5.0, 5.0];
        let g = knn_graph(&p, 2, 1).unwrap();
        assert_eq!(g.indices, [1, 0, 0]);
        assert_eq!(g.distances[0], 0.0);
    }

    #[test]
    fn k_must_be_below_n() {
        assert!(matches!(knn_graph(&[0.0, 1.0], 1, 2), Err(Error::TooFewPoints { k: 2, n: 2 })));
    }
}
