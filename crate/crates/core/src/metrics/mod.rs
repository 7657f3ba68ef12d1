//! Class separation of embeddings and class selectivity of units.

mod correlation;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ablation::{UnitImpactMatrix, UnitRef};
use crate::activations::ActivationMatrix;
use crate::dataset::CLASSES;
use crate::embedding::{knn_graph, knn_graph_f64, Embedding2D, KnnGraph};
use crate::error::{Error, Result};
use crate::nn::{EvalReport, LayerTag};

pub use correlation::{pearson, spearman, t_test_p_value, CorrelationKind, CorrelationResult};

pub const DEFAULT_NH_K: usize = 6;

/// Mean fraction of each point's neighbors sharing its label, or with
/// `strict` the fraction of points whose neighbors all share it.
pub fn neighborhood_hit_graph(knn: &KnnGraph, labels: &[u8], strict: bool) -> Result<f64> {
    if labels.len() != knn.n {
        return Err(Error::Shape(format!("{} labels for {} points", labels.len(), knn.n)));
    }
    let mut hits = 0u64;
    let mut full = 0u64;
    for i in 0..knn.n {
        let h = knn.neighbors(i).iter().filter(|&&j| labels[j as usize] == labels[i]).count();
        hits += h as u64;
        full += u64::from(h == knn.k);
    }
    Ok(if strict {
        full as f64 / knn.n as f64
    } else {
        hits as f64 / (knn.n * knn.k) as f64
    })
}

/// NH restricted to the points of each class; 0 for absent classes.
pub fn neighborhood_hit_per_class(knn: &KnnGraph, labels: &[u8]) -> Result<[f64; CLASSES]> {
    if labels.len() != knn.n {
        return Err(Error::Shape(format!("{} labels for {} points", labels.len(), knn.n)));
    }
    let mut hits = [0u64; CLASSES];
    let mut count = [0u64; CLASSES];
    for i in 0..knn.n {
        let c = labels[i] as usize;
        if c >= CLASSES {
            return Err(Error::InvalidArgument(format!("label {c} out of range")));
        }
        hits[c] += knn.neighbors(i).iter().filter(|&&j| labels[j as usize] == labels[i]).count() as u64;
        count[c] += 1;
    }
    Ok(std::array::from_fn(|c| {
        if count[c] == 0 {
            0.0
        } else {
            hits[c] as f64 / (count[c] * knn.k as u64) as f64
        }
    }))
}

/// NH over `f64` points of dimension `dim`.
pub fn neighborhood_hit(coords: &[f64], dim: usize, labels: &[u8], k: usize, strict: bool) -> Result<f64> {
    neighborhood_hit_graph(&knn_graph_f64(coords, dim, k)?, labels, strict)
}

/// NH over raw `f32` points (activations or pixels).
pub fn neighborhood_hit_points(points: &[f32], dim: usize, labels: &[u8], k: usize, strict: bool) -> Result<f64> {
    neighborhood_hit_graph(&knn_graph(points, dim, k)?, labels, strict)
}

/// NH of a horizontal embedding by its class labels.
pub fn embedding_nh(e: &Embedding2D, k: usize) -> Result<f64> {
    let labels: Option<Vec<u8>> = e.labels.iter().copied().collect();
    let labels = labels.ok_or_else(|| Error::InvalidArgument(format!("embedding {} has unlabeled points", e.meta.id)))?;
    neighborhood_hit(&e.flat_coords(), 2, &labels, k, false)
}

/// Per-class NH of a labeled embedding.
pub fn embedding_nh_per_class(e: &Embedding2D, k: usize) -> Result<[f64; CLASSES]> {
    let labels: Option<Vec<u8>> = e.labels.iter().copied().collect();
    let labels = labels.ok_or_else(|| Error::InvalidArgument(format!("embedding {} has unlabeled points", e.meta.id)))?;
    neighborhood_hit_per_class(&knn_graph_f64(&e.flat_coords(), 2, k)?, &labels)
}

/// `(top - rest) / (top + rest)`, 0 on a zero denominator.
pub fn selectivity_ratio(top: f64, rest: f64) -> f64 {
    let den = top + rest;
    if den == 0.0 {
        0.0
    } else {
        (top - rest) / den
    }
}

fn first_max_by(v: &[f64; CLASSES], key: impl Fn(f64) -> f64) -> usize {
    let mut best = 0;
    for c in 1..CLASSES {
        if key(v[c]) > key(v[best]) {
            best = c;
        }
    }
    best
}

fn mean_else(v: &[f64; CLASSES], skip: usize) -> f64 {
    let s: f64 = v.iter().enumerate().filter(|&(c, _)| c != skip).map(|(_, x)| x).sum();
    s / (CLASSES - 1) as f64
}

pub trait Selective {
    fn class(&self) -> u8;
    fn score(&self) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectivityRecord {
    pub unit: usize,
    pub layer: Option<LayerTag>,
    pub class_means: [f64; CLASSES],
    pub selectivity: f64,
    pub argmax: u8,
}

impl Selective for SelectivityRecord {
    fn class(&self) -> u8 {
        self.argmax
    }
    fn score(&self) -> f64 {
        self.selectivity
    }
}

/// Per-column class means of a row-major `rows x cols` matrix. Classes
/// without images get mean 0.
pub fn class_means(values: &[f32], rows: usize, cols: usize, labels: &[u8]) -> Result<Vec<[f64; CLASSES]>> {
    if values.len() != rows * cols || labels.len() != rows {
        return Err(Error::Shape(format!("{} values, {} labels for {rows}x{cols}", values.len(), labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= CLASSES) {
        return Err(Error::InvalidArgument(format!("label {l} out of range")));
    }
    let mut counts = [0usize; CLASSES];
    for &l in labels {
        counts[l as usize] += 1;
    }
    const COLS: usize = 256;
    let mut sums = vec![[0.0f64; CLASSES]; cols];
    sums.par_chunks_mut(COLS).enumerate().for_each(|(b, block)| {
        let c0 = b * COLS;
        for (r, &l) in labels.iter().enumerate() {
            let row = &values[r * cols + c0..][..block.len()];
            for (s, &v) in block.iter_mut().zip(row) {
                s[l as usize] += v as f64;
            }
        }
    });
    for s in &mut sums {
        for c in 0..CLASSES {
            s[c] = if counts[c] > 0 { s[c] / counts[c] as f64 } else { 0.0 };
        }
    }
    Ok(sums)
}

/// AS of one unit from its class means.
pub fn selectivity_of(means: &[f64; CLASSES]) -> (f64, u8) {
    let top = first_max_by(means, |x| x);
    (selectivity_ratio(means[top], mean_else(means, top)), top as u8)
}

/// AS of every column of a row-major matrix.
pub fn activational_selectivity_raw(values: &[f32], rows: usize, cols: usize, labels: &[u8]) -> Result<Vec<SelectivityRecord>> {
    Ok(class_means(values, rows, cols, labels)?
        .into_iter()
        .enumerate()
        .map(|(unit, class_means)| {
            let (selectivity, argmax) = selectivity_of(&class_means);
            SelectivityRecord {
                unit,
                layer: None,
                class_means,
                selectivity,
                argmax,
            }
        })
        .collect())
}

/// AS of every unit column of an activation matrix over its own labels.
pub fn activational_selectivity(m: &ActivationMatrix) -> Result<Vec<SelectivityRecord>> {
    let mut recs = activational_selectivity_raw(&m.values, m.rows, m.cols, &m.labels)?;
    for (r, l) in recs.iter_mut().zip(m.column_layers()) {
        r.layer = Some(l);
    }
    Ok(recs)
}

/// Which class entry counts as the peak change.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AesPeak {
    /// Largest magnitude, sign kept.
    #[default]
    Magnitude,
    /// Largest signed value.
    Signed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Impact {
    Negative,
    None,
    Positive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpactRecord {
    pub unit: UnitRef,
    pub deltas: [f64; CLASSES],
    pub raw: f64,
    /// Direction of the peak change.
    pub sign: Impact,
    /// `|raw|` over the largest `|raw|` among units of the same sign.
    pub magnitude: f64,
    pub argmax: u8,
}

impl Selective for ImpactRecord {
    fn class(&self) -> u8 {
        self.argmax
    }
    fn score(&self) -> f64 {
        self.magnitude
    }
}

/// Raw AES and peak class of one delta row.
pub fn aes_of(deltas: &[f64; CLASSES], peak: AesPeak) -> (f64, u8) {
    let top = match peak {
        AesPeak::Magnitude => first_max_by(deltas, f64::abs),
        AesPeak::Signed => first_max_by(deltas, |x| x),
    };
    (selectivity_ratio(deltas[top], mean_else(deltas, top)), top as u8)
}

/// AES per unit, split by the sign of the peak change and rescaled per sign
/// so the most extreme unit of each sign has magnitude 1.
pub fn ablation_effect_selectivity(m: &UnitImpactMatrix, peak: AesPeak) -> Vec<ImpactRecord> {
    let mut recs: Vec<ImpactRecord> = m
        .units
        .iter()
        .zip(&m.deltas)
        .map(|(&unit, deltas)| {
            let (raw, argmax) = aes_of(deltas, peak);
            let d = deltas[argmax as usize];
            let sign = if raw == 0.0 || d == 0.0 {
                Impact::None
            } else if d < 0.0 {
                Impact::Negative
            } else {
                Impact::Positive
            };
            ImpactRecord {
                unit,
                deltas: *deltas,
                raw,
                sign,
                magnitude: 0.0,
                argmax,
            }
        })
        .collect();
    for s in [Impact::Negative, Impact::Positive] {
        let max = recs.iter().filter(|r| r.sign == s).map(|r| r.raw.abs()).fold(0.0, f64::max);
        for r in recs.iter_mut().filter(|r| r.sign == s) {
            r.magnitude = r.raw.abs() / max;
        }
    }
    recs
}

/// `1 - per-class accuracy`.
pub fn per_class_error(eval: &EvalReport) -> [f64; CLASSES] {
    eval.per_class_accuracy.map(|a| 1.0 - a)
}

/// Units per argmax class, skipping units whose score is 0.
pub fn selective_counts<R: Selective>(records: &[R]) -> [usize; CLASSES] {
    let mut counts = [0; CLASSES];
    for r in records.iter().filter(|r| r.score() != 0.0) {
        counts[r.class() as usize] += 1;
    }
    counts
}

/// Min-max scale each layer's values to `[0, 1]`; constant layers map to 0.
pub fn normalize_per_layer(values: &[f64], layers: &[LayerTag]) -> Result<Vec<f64>> {
    if values.len() != layers.len() {
        return Err(Error::Shape(format!("{} values for {} layer tags", values.len(), layers.len())));
    }
    let mut lo = [f64::INFINITY; LayerTag::ALL.len()];
    let mut hi = [f64::NEG_INFINITY; LayerTag::ALL.len()];
    for (&v, &l) in values.iter().zip(layers) {
        lo[l.index()] = lo[l.index()].min(v);
        hi[l.index()] = hi[l.index()].max(v);
    }
    Ok(values
        .iter()
        .zip(layers)
        .map(|(&v, &l)| {
            let span = hi[l.index()] - lo[l.index()];
            if span > 0.0 {
                (v - lo[l.index()]) / span
            } else {
                0.0
            }
        })
        .collect())
}

fn layer_field(l: Option<LayerTag>) -> String {
    l.map(|l| l.to_string()).unwrap_or_default()
}

/// `unit,layer,argmax,as,mean_0..mean_9`.
pub fn write_selectivity_csv<W: Write>(records: &[SelectivityRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["unit".to_string(), "layer".into(), "argmax".into(), "as".into()];
    header.extend((0..CLASSES).map(|c| format!("mean_{c}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.unit.to_string(), layer_field(r.layer), r.argmax.to_string(), r.selectivity.to_string()];
        row.extend(r.class_means.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))
}

/// `layer,unit,argmax,sign,raw,magnitude,delta_0..delta_9`.
pub fn write_impact_csv<W: Write>(records: &[ImpactRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["layer".to_string(), "unit".into(), "argmax".into(), "sign".into(), "raw".into(), "magnitude".into()];
    header.extend((0..CLASSES).map(|c| format!("delta_{c}")));
    w.write_record(&header)?;
    for r in records {
        let sign = match r.sign {
            Impact::Negative => "negative",
            Impact::None => "none",
            Impact::Positive => "positive",
        };
        let mut row = vec![
            r.unit.layer.to_string(),
            r.unit.unit.to_string(),
            r.argmax.to_string(),
            sign.to_string(),
            r.raw.to_string(),
            r.magnitude.to_string(),
        ];
        row.extend(r.deltas.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_selectivities() {
        let mut m = [0.2f64; CLASSES];
        m[4] = 0.6;
        let (s, c) = selectivity_of(&m);
        assert!((s - 0.5).abs() < 1e-15);
        assert_eq!(c, 4);
        assert_eq!(selectivity_of(&[0.0; CLASSES]), (0.0, 0));
        let mut d = [-0.05f64; CLASSES];
        d[1] = -0.20;
        let (raw, c) = aes_of(&d, AesPeak::Magnitude);
        assert!((raw - 0.6).abs() < 1e-12, "{raw}");
        assert_eq!(c, 1);
        assert_eq!(aes_of(&[0.0; CLASSES], AesPeak::Magnitude).0, 0.0);
    }

    #[test]
    fn flat_layer_normalizes_to_zero() {
        let v = normalize_per_layer(&[3.0, 3.0, 1.0, 5.0], &[LayerTag::Fc1, LayerTag::Fc1, LayerTag::Fc2, LayerTag::Fc2]).unwrap();
        assert_eq!(v, [0.0, 0.0, 0.0, 1.0]);
    }
}
