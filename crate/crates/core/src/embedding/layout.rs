//! Low-dimensional curve fit and the negative-sampling layout optimizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::fuzzy::FuzzyGraph;
use crate::error::{Error, Result};

pub const SPREAD: f64 = 1.0;
pub const FIT_POINTS: usize = 300;
const CLIP: f64 = 4.0;

/// Target curve: 1 below `min_dist`, then `exp(-(d - min_dist) / spread)`.
pub fn fit_target(d: f64, min_dist: f64) -> f64 {
    if d < min_dist {
        1.0
    } else {
        (-(d - min_dist) / SPREAD).exp()
    }
}

/// `1 / (1 + a d^(2b))`.
pub fn low_dim_similarity(d: f64, a: f64, b: f64) -> f64 {
    1.0 / (1.0 + a * d.powf(2.0 * b))
}

/// The `FIT_POINTS` evenly spaced distances in `[0, 3 * spread]`.
pub fn fit_grid() -> Vec<f64> {
    let hi = 3.0 * SPREAD;
    (0..FIT_POINTS)
        .map(|i| hi * i as f64 / (FIT_POINTS - 1) as f64)
        .collect()
}

fn fit_residuals(a: f64, b: f64, xs: &[f64], ys: &[f64]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| (low_dim_similarity(x, a, b) - y).powi(2))
        .sum()
}

/// Least-squares `(a, b)` of `1 / (1 + a d^(2b))` against the target curve,
/// by Levenberg-Marquardt from `(1, 1)`.
pub fn fit_ab(min_dist: f64) -> Result<(f64, f64)> {
    if !(0.0..SPREAD).contains(&min_dist) {
        return Err(Error::InvalidArgument(format!("min_dist {min_dist} must lie in [0, {SPREAD})")));
    }
    let xs = fit_grid();
    let ys: Vec<f64> = xs.iter().map(|&x| fit_target(x, min_dist)).collect();
    let (mut a, mut b) = (1.0f64, 1.0f64);
    let mut cost = fit_residuals(a, b, &xs, &ys);
    let mut lambda = 1e-3;
    for _ in 0..10_000 {
        // normal equations of the linearized problem
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x == 0.0 {
                continue;
            }
            let p = x.powf(2.0 * b);
            let den = 1.0 + a * p;
            let r = 1.0 / den - y;
            let da = -p / (den * den);
            let db = -a * p * 2.0 * x.ln() / (den * den);
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * r;
            gb += db * r;
        }
        let mut improved = false;
        while lambda < 1e16 {
            let (m11, m22) = (jaa * (1.0 + lambda), jbb * (1.0 + lambda));
            let det = m11 * m22 - jab * jab;
            let step_a = -(m22 * ga - jab * gb) / det;
            let step_b = -(m11 * gb - jab * ga) / det;
            let (na, nb) = (a + step_a, b + step_b);
            let c = fit_residuals(na, nb, &xs, &ys);
            if c.is_finite() && c <= cost {
                let done = (cost - c) <= 1e-15 * cost.max(1e-300) && step_a.abs() < 1e-12 && step_b.abs() < 1e-12;
                a = na;
                b = nb;
                cost = c;
                lambda = (lambda / 10.0).max(1e-12);
                improved = !done;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok((a, b))
}

/// Optimizer settings for one layout run.
#[derive(Clone, Copy, Debug)]
pub struct LayoutSettings {
    pub n_epochs: usize,
    pub learning_rate: f64,
    pub negative_sample_rate: usize,
    pub a: f64,
    pub b: f64,
    pub seed: u64,
}

#[inline]
fn clip(v: f64) -> f64 {
    v.clamp(-CLIP, CLIP)
}

/// Edges kept for optimization (weights below `max / n_epochs` would never
/// be sampled) and the epoch spacing of their samples.
fn sampling_schedule(graph: &FuzzyGraph, n_epochs: usize) -> Vec<(usize, usize, f64)> {
    let max = graph.weights.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 || n_epochs == 0 {
        return Vec::new();
    }
    let floor = max / n_epochs as f64;
    graph
        .rows
        .iter()
        .zip(&graph.cols)
        .zip(&graph.weights)
        .filter(|(_, &w)| w >= floor)
        .map(|((&i, &j), &w)| (i as usize, j as usize, max / w))
        .collect()
}

/// Stochastic layout: attraction along sampled edges, repulsion from
/// `negative_sample_rate` random points per sample, gradients clipped to
/// `[-4, 4]` and the learning rate annealed linearly to 0. Sequential and
/// deterministic per seed.
pub fn optimize_layout(graph: &FuzzyGraph, init: &[[f64; 2]], s: &LayoutSettings) -> Result<Vec<[f64; 2]>> {
    if init.len() != graph.n {
        return Err(Error::Shape(format!("init has {} points, graph {}", init.len(), graph.n)));
    }
    let mut emb = init.to_vec();
    let edges = sampling_schedule(graph, s.n_epochs);
    if edges.is_empty() {
        return Ok(emb);
    }
    let n = emb.len();
    let (a, b) = (s.a, s.b);
    let neg_rate = s.negative_sample_rate as f64;
    let mut next_sample: Vec<f64> = edges.iter().map(|e| e.2).collect();
    let mut next_negative: Vec<f64> = edges.iter().map(|e| e.2 / neg_rate).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    for epoch in 0..s.n_epochs {
        let alpha = s.learning_rate * (1.0 - epoch as f64 / s.n_epochs as f64);
        let t = epoch as f64;
        for (e, &(j, k, eps)) in edges.iter().enumerate() {
            if next_sample[e] > t {
                continue;
            }
            let d2 = dist2(&emb[j], &emb[k]);
            if d2 > 0.0 {
                let coeff = -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0);
                for d in 0..2 {
                    let g = clip(coeff * (emb[j][d] - emb[k][d]));
                    emb[j][d] += g * alpha;
                    emb[k][d] -= g * alpha;
                }
            }
            next_sample[e] += eps;

            let eps_neg = eps / neg_rate;
            let n_neg = ((t - next_negative[e]) / eps_neg).floor().max(0.0) as usize;
            for _ in 0..n_neg {
                let k = rng.random_range(0..n);
                let d2 = dist2(&emb[j], &emb[k]);
                let coeff = if d2 > 0.0 {
                    2.0 * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0))
                } else if j == k {
                    continue;
                } else {
                    0.0
                };
                for d in 0..2 {
                    let g = if coeff > 0.0 { clip(coeff * (emb[j][d] - emb[k][d])) } else { CLIP };
                    emb[j][d] += g * alpha;
                }
            }
            next_negative[e] += n_neg as f64 * eps_neg;
        }
        if emb.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::LayoutDiverged { epoch });
        }
    }
    Ok(emb)
}

#[inline]
fn dist2(p: &[f64; 2], q: &[f64; 2]) -> f64 {
    let (dx, dy) = (p[0] - q[0], p[1] - q[1]);
    dx * dx + dy * dy
}

/// Fuzzy cross-entropy between the graph and the layout over all edges plus
/// `negatives` fixed random non-adjacent pairs (drawn from `seed`, so the
/// sample is the same for every layout of the graph).
pub fn layout_loss(graph: &FuzzyGraph, coords: &[[f64; 2]], a: f64, b: f64, negatives: usize, seed: u64) -> f64 {
    let q = |i: usize, j: usize| {
        let d2 = dist2(&coords[i], &coords[j]);
        (1.0 / (1.0 + a * d2.powf(b))).clamp(1e-12, 1.0 - 1e-12)
    };
    let mut loss = 0.0;
    for ((&i, &j), &w) in graph.rows.iter().zip(&graph.cols).zip(&graph.weights) {
        let qij = q(i as usize, j as usize);
        loss -= w * qij.ln() + (1.0 - w) * (1.0 - qij).ln();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = graph.n;
    let mut drawn = 0;
    let mut attempts = 0;
    while drawn < negatives && attempts < 100 * negatives.max(1) && n > 1 {
        attempts += 1;
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j || graph.weight(i, j) > 0.0 {
            continue;
        }
        loss -= (1.0 - q(i, j)).ln();
        drawn += 1;
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fitted_curve_is_one_at_zero() {
        let (a, b) = fit_ab(0.1).unwrap();
        assert!((low_dim_similarity(0.0, a, b) - 1.0).abs() < 1e-6);
        assert!((a - 1.5769).abs() < 1e-3 && (b - 0.8951).abs() < 1e-3, "{a} {b}");
        let (a, b) = fit_ab(0.8).unwrap();
        assert!((a - 0.2321).abs() < 1e-3 && (b - 1.6812).abs() < 1e-3, "{a} {b}");
        assert!(fit_ab(1.0).is_err());
    }

    #[test]
    fn no_edges_no_epochs_returns_init() {
        let g = FuzzyGraph {
            n: 2,
            rho: vec![0.0; 2],
            sigma: vec![1.0; 2],
            saturated: vec![],
            rows: vec![],
            cols: vec![],
            weights: vec![],
        };
        let init = [[1.0, 2.0], [3.0, -4.0]];
        let s = LayoutSettings {
            n_epochs: 0,
            learning_rate: 1.0,
            negative_sample_rate: 5,
            a: 1.0,
            b: 1.0,
            seed: 0,
        };
        assert_eq!(optimize_layout(&g, &init, &s).unwrap(), init);
    }
}
