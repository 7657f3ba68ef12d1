//! Orthogonal Procrustes alignment of 2-D configurations.

use crate::error::{Error, Result};

/// Center and scale to unit Frobenius norm.
pub fn standardize(points: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    let n = points.len() as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for p in points {
        cx += p[0];
        cy += p[1];
    }
    cx /= n;
    cy /= n;
    let centered: Vec<[f64; 2]> = points.iter().map(|p| [p[0] - cx, p[1] - cy]).collect();
    let norm = centered.iter().map(|p| p[0] * p[0] + p[1] * p[1]).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateConfiguration);
    }
    Ok(centered.iter().map(|p| [p[0] / norm, p[1] / norm]).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// The reference, standardized.
    pub reference: Vec<[f64; 2]>,
    /// The target, standardized, rotated or reflected and scaled onto the
    /// reference.
    pub aligned: Vec<[f64; 2]>,
    /// Sum of squared differences between the two.
    pub disparity: f64,
    /// `[[q11, q12], [q21, q22]]`, applied as `row * Q`.
    pub transform: [[f64; 2]; 2],
    pub scale: f64,
    pub reflected: bool,
}

/// Remove translation, uniform scale, rotation and reflection between
/// `target` and `reference`.
///
/// With both sets standardized and `C = target^T reference`, the best
/// rotation attains `sqrt((c11 + c22)^2 + (c21 - c12)^2)` and the best
/// reflection `sqrt((c11 - c22)^2 + (c12 + c21)^2)`; the larger one is the
/// nuclear norm of `C` and becomes the scale.
pub fn procrustes_align(reference: &[[f64; 2]], target: &[[f64; 2]]) -> Result<Alignment> {
    if reference.len() != target.len() {
        return Err(Error::Shape(format!(
            "procrustes needs equal point counts, got {} and {}",
            reference.len(),
            target.len()
        )));
    }
    if reference.len() < 2 {
        return Err(Error::DegenerateConfiguration);
    }
    let a = standardize(reference)?;
    let b = standardize(target)?;
    let mut c = [[0.0f64; 2]; 2];
    for (p, q) in b.iter().zip(&a) {
        for r in 0..2 {
            for s in 0..2 {
                c[r][s] += p[r] * q[s];
            }
        }
    }
    let rot = (c[0][0] + c[1][1]).hypot(c[1][0] - c[0][1]);
    let refl = (c[0][0] - c[1][1]).hypot(c[0][1] + c[1][0]);
    let (transform, scale, reflected) = if rot >= refl {
        let t = (c[1][0] - c[0][1]).atan2(c[0][0] + c[1][1]);
        let (s, co) = t.sin_cos();
        ([[co, -s], [s, co]], rot, false)
    } else {
        let t = (c[0][1] + c[1][0]).atan2(c[0][0] - c[1][1]);
        let (s, co) = t.sin_cos();
        ([[co, s], [s, -co]], refl, true)
    };
    let aligned: Vec<[f64; 2]> = b
        .iter()
        .map(|p| {
            [
                scale * (p[0] * transform[0][0] + p[1] * transform[1][0]),
                scale * (p[0] * transform[0][1] + p[1] * transform[1][1]),
            ]
        })
        .collect();
    let disparity = a
        .iter()
        .zip(&aligned)
        .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
        .sum();
    Ok(Alignment {
        reference: a,
        aligned,
        disparity,
        transform,
        scale,
        reflected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sets_have_zero_disparity() {
        let p = [[0.0, 0.0], [1.0, 0.2], [0.3, 2.0], [-1.0, 0.5]];
        let r = procrustes_align(&p, &p).unwrap();
        assert!(r.disparity.abs() < 1e-12);
        assert!(!r.reflected);
    }

    #[test]
    fn mirror_image_is_undone() {
        let p = [[0.0, 0.0], [1.0, 0.2], [0.3, 2.0], [-1.0, 0.5]];
        let m: Vec<[f64; 2]> = p.iter().map(|q| [-q[0], q[1]]).collect();
        let r = procrustes_align(&p, &m).unwrap();
        assert!(r.reflected);
        assert!(r.disparity < 1e-12);
    }

    #[test]
    fn coincident_points_are_degenerate() {
        let p = [[1.0, 1.0]; 3];
        let q = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(procrustes_align(&q, &p), Err(Error::DegenerateConfiguration)));
    }
}
