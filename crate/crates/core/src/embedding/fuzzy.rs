//! Fuzzy simplicial set: smooth-kNN memberships and their symmetrization.

use serde::{Deserialize, Serialize};

use crate::embedding::knn::KnnGraph;
use crate::error::{Error, Result};

pub const BANDWIDTH_TOLERANCE: f64 = 1e-5;
pub const BANDWIDTH_ITERATIONS: usize = 64;
/// Bandwidth of a saturated point, relative to its mean neighbor distance.
const SATURATED_SCALE: f64 = 1e-3;

/// Symmetric weighted graph in coordinate form, sorted by `(row, col)`,
/// holding both directions of every edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuzzyGraph {
    pub n: usize,
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Points whose target membership sum cannot be reached because at least
    /// `log2(k)` neighbors sit at distance `rho`; they get a small fixed sigma.
    pub saturated: Vec<usize>,
    pub rows: Vec<u32>,
    pub cols: Vec<u32>,
    pub weights: Vec<f64>,
}

impl FuzzyGraph {
    pub fn edges(&self) -> usize {
        self.weights.len()
    }

    /// Weight of the edge `(i, j)`, 0 if absent.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let lo = self.rows.partition_point(|&r| (r as usize) < i);
        let hi = self.rows.partition_point(|&r| (r as usize) <= i);
        match self.cols[lo..hi].binary_search(&(j as u32)) {
            Ok(p) => self.weights[lo + p],
            Err(_) => 0.0,
        }
    }
}

/// Membership of a neighbor at distance `d`.
#[inline]
pub fn membership(d: f64, rho: f64, sigma: f64) -> f64 {
    let x = d - rho;
    if x <= 0.0 {
        1.0
    } else {
        (-x / sigma).exp()
    }
}

fn membership_sum(dists: &[f64], rho: f64, sigma: f64) -> f64 {
    dists.iter().map(|&d| membership(d, rho, sigma)).sum()
}

/// `(rho, sigma, saturated)` for one point's ascending neighbor distances,
/// with sigma chosen so the memberships sum to `log2(k)`.
pub fn smooth_knn(dists: &[f64], point: usize) -> Result<(f64, f64, bool)> {
    let k = dists.len();
    let target = (k as f64).log2();
    let rho = dists.iter().copied().find(|&d| d > 0.0).unwrap_or(0.0);
    let at_rho = dists.iter().filter(|&&d| d - rho <= 0.0).count();
    if at_rho as f64 >= target {
        let mean = dists.iter().sum::<f64>() / k as f64;
        let sigma = if mean > 0.0 { SATURATED_SCALE * mean } else { 1.0 };
        return Ok((rho, sigma, true));
    }
    let (mut lo, mut hi, mut mid) = (0.0f64, f64::INFINITY, 1.0f64);
    for _ in 0..BANDWIDTH_ITERATIONS {
        let psum = membership_sum(dists, rho, mid);
        if (psum - target).abs() < BANDWIDTH_TOLERANCE {
            return Ok((rho, mid, false));
        }
        if psum > target {
            hi = mid;
            mid = (lo + hi) / 2.0;
        } else {
            lo = mid;
            mid = if hi.is_infinite() { mid * 2.0 } else { (lo + hi) / 2.0 };
        }
    }
    Err(Error::BandwidthSearch { point })
}

/// Directed memberships symmetrized with the probabilistic t-conorm
/// `w + w^T - w * w^T`.
pub fn fuzzy_simplicial_set(knn: &KnnGraph) -> Result<FuzzyGraph> {
    let (n, k) = (knn.n, knn.k);
    let mut rho = vec![0.0; n];
    let mut sigma = vec![0.0; n];
    let mut saturated = Vec::new();
    // per-point neighbor lists sorted by index, for reverse lookups
    let mut sorted: Vec<(u32, f64)> = Vec::with_capacity(n * k);
    for i in 0..n {
        let (r, s, sat) = smooth_knn(knn.distances_of(i), i)?;
        rho[i] = r;
        sigma[i] = s;
        if sat {
            saturated.push(i);
        }
        let start = sorted.len();
        for (&j, &d) in knn.neighbors(i).iter().zip(knn.distances_of(i)) {
            sorted.push((j, membership(d, r, s)));
        }
        sorted[start..].sort_unstable_by_key(|e| e.0);
    }
    let lookup = |i: usize, j: u32| -> f64 {
        let row = &sorted[i * k..][..k];
        match row.binary_search_by_key(&j, |e| e.0) {
            Ok(p) => row[p].1,
            Err(_) => 0.0,
        }
    };
    let mut edges: Vec<(u32, u32, f64)> = Vec::with_capacity(2 * n * k);
    for i in 0..n {
        for &(j, w) in &sorted[i * k..][..k] {
            let back = lookup(j as usize, i as u32);
            let s = w + back - w * back;
            if s <= 0.0 {
                continue;
            }
            edges.push((i as u32, j, s));
            if back == 0.0 {
                edges.push((j, i as u32, s));
            }
        }
    }
    edges.sort_unstable_by_key(|e| (e.0, e.1));
    Ok(FuzzyGraph {
        n,
        rho,
        sigma,
        saturated,
        rows: edges.iter().map(|e| e.0).collect(),
        cols: edges.iter().map(|e| e.1).collect(),
        weights: edges.iter().map(|e| e.2).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_neighbor_has_full_membership() {
        let d = [0.5, 0.9, 1.3, 2.0, 2.2];
        let (rho, sigma, sat) = smooth_knn(&d, 0).unwrap();
        assert!(!sat);
        assert_eq!(rho, 0.5);
        assert_eq!(membership(d[0], rho, sigma), 1.0);
        assert!((membership_sum(&d, rho, sigma) - 5f64.log2()).abs() < 1e-5);
    }

    #[test]
    fn one_sided_edge_symmetrizes_to_one() {
        // w = 1 one way, 0 the other
        let (w, back) = (1.0f64, 0.0f64);
        assert_eq!(w + back - w * back, 1.0);
    }

    #[test]
    fn identical_neighbors_saturate() {
        let d = [0.0; 15];
        let (_, sigma, sat) = smooth_knn(&d, 3).unwrap();
        assert!(sat && sigma > 0.0);
    }
}
