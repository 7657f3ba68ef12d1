//! Unit ablation: masks, randomized campaigns over a fraction of a layer,
//! and single-unit sweeps.
//!
//! Ablating a unit zeroes its incoming weights and bias. Through the ReLU
//! (and, for conv kernels, the max-pool) its output is then exactly zero, so
//! campaigns and sweeps cache the healthy activations of the ablated layer
//! and only recompute the layers after it. The result is bit-identical to
//! evaluating the ablated model from scratch.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{batch_indices, BatchPlan, LabeledImageSet, CLASSES};
use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::nn::network::{argmax_rows, Capture, EVAL_CHUNK};
use crate::nn::{nll_loss, Arch, EvalReport, LayerTag, ModelState, Network};

/// Images recomputed per block; a multiple of the evaluation chunk so the
/// chunking matches a plain forward pass.
const BLOCK: usize = 128 * EVAL_CHUNK;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationMask {
    pub layer: LayerTag,
    /// Sorted, unique unit indices (kernels for conv layers, neurons for dense).
    pub units: Vec<usize>,
    pub fraction: Option<f64>,
    pub seed: Option<u64>,
}

impl AblationMask {
    pub fn new(arch: &Arch, layer: LayerTag, mut units: Vec<usize>) -> Result<Self> {
        units.sort_unstable();
        let mask = AblationMask {
            layer,
            units,
            fraction: None,
            seed: None,
        };
        mask.validate(arch)?;
        Ok(mask)
    }

    pub fn empty(layer: LayerTag) -> Self {
        AblationMask {
            layer,
            units: Vec::new(),
            fraction: None,
            seed: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn validate(&self, arch: &Arch) -> Result<()> {
        let size = arch.units(self.layer);
        for (i, &u) in self.units.iter().enumerate() {
            if u >= size {
                return Err(Error::UnitOutOfRange {
                    layer: self.layer.to_string(),
                    index: u,
                    size,
                });
            }
            if i > 0 && self.units[i - 1] >= u {
                return Err(Error::InvalidArgument(format!(
                    "mask units for {} must be unique and sorted",
                    self.layer
                )));
            }
        }
        Ok(())
    }
}

/// `floor(fraction * layer size)` units drawn without replacement.
pub fn random_mask(arch: &Arch, layer: LayerTag, fraction: f64, seed: u64) -> Result<AblationMask> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside [0, 1]")));
    }
    let size = arch.units(layer);
    // absorb representation error such as 0.29 * 100 = 28.999999999999996
    let count = ((fraction * size as f64) + 1e-9).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut units = rand::seq::index::sample(&mut rng, size, count.min(size)).into_vec();
    units.sort_unstable();
    Ok(AblationMask {
        layer,
        units,
        fraction: Some(fraction),
        seed: Some(seed),
    })
}

/// Zero the incoming weights and bias of every masked unit in place.
pub fn ablate_in_place<T: Real>(model: &mut Network<T>, mask: &AblationMask) -> Result<()> {
    mask.validate(&model.arch)?;
    let fan_in = model.arch.fan(mask.layer).0;
    let p = model.layer_mut(mask.layer);
    for &u in &mask.units {
        p.weight[u * fan_in..(u + 1) * fan_in].fill(T::ZERO);
        p.bias[u] = T::ZERO;
    }
    Ok(())
}

/// Copy of `model` with the mask applied; the original is left untouched.
pub fn apply_ablation(model: &ModelState, mask: &AblationMask) -> Result<ModelState> {
    let mut out = model.clone();
    ablate_in_place(&mut out, mask)?;
    Ok(out)
}

/// Columns of a layer's activation rows that belong to one unit.
pub fn unit_columns(layer: LayerTag, unit: usize) -> Range<usize> {
    if layer.is_conv() {
        let plane = Arch::pooled_side(layer.index()).pow(2);
        unit * plane..(unit + 1) * plane
    } else {
        unit..unit + 1
    }
}

/// Healthy activations at one layer over an evaluation plan.
struct Prefix<'a> {
    model: &'a ModelState,
    layer: LayerTag,
    /// Output rows of `layer`, or for the output layer the rows entering it.
    rows: Vec<f32>,
    width: usize,
    labels: Vec<u8>,
    indices: Vec<usize>,
}

impl<'a> Prefix<'a> {
    fn new(model: &'a ModelState, set: &LabeledImageSet, plan: &BatchPlan, layer: LayerTag) -> Result<Self> {
        let indices: Vec<usize> = batch_indices(set.len(), plan).concat();
        let (images, labels) = set.gather(&indices);
        let source = if layer == LayerTag::Out { LayerTag::Fc2 } else { layer };
        let mut out = model.forward(&images, Capture::of(&[source]))?;
        Ok(Prefix {
            model,
            layer,
            rows: out.captured.remove(&source).unwrap_or_default(),
            width: model.arch.activation_width(source),
            labels,
            indices,
        })
    }

    fn evaluate(&self, units: &[usize]) -> Result<EvalReport> {
        let arch = &self.model.arch;
        let mut log_probs = Vec::with_capacity(self.labels.len() * arch.classes);
        if self.layer == LayerTag::Out {
            let mut m = self.model.clone();
            ablate_in_place(&mut m, &AblationMask::new(arch, LayerTag::Out, units.to_vec())?)?;
            for block in self.rows.chunks(BLOCK * self.width) {
                log_probs.extend(m.forward_from(LayerTag::Out, block, Capture::NONE)?.log_probs);
            }
        } else {
            let next = LayerTag::ALL[self.layer.index() + 1];
            let cols: Vec<Range<usize>> = units.iter().map(|&u| unit_columns(self.layer, u)).collect();
            let mut buf = Vec::with_capacity(BLOCK * self.width);
            for block in self.rows.chunks(BLOCK * self.width) {
                buf.clear();
                buf.extend_from_slice(block);
                for row in buf.chunks_exact_mut(self.width) {
                    for c in &cols {
                        row[c.clone()].fill(0.0);
                    }
                }
                log_probs.extend(self.model.forward_from(next, &buf, Capture::NONE)?.log_probs);
            }
        }
        let preds = argmax_rows(&log_probs, arch.classes);
        let loss = nll_loss(&log_probs, &self.labels, arch.classes) as f64;
        Ok(EvalReport::from_predictions(&preds, &self.labels, &self.indices, loss))
    }
}

/// Evaluate `model` with `mask` applied over the images `plan` consumes.
/// Bit-identical to `evaluate(apply_ablation(model, mask), ...)`.
pub fn evaluate_ablated(
    model: &ModelState,
    set: &LabeledImageSet,
    plan: &BatchPlan,
    mask: &AblationMask,
) -> Result<EvalReport> {
    mask.validate(&model.arch)?;
    Prefix::new(model, set, plan, mask.layer)?.evaluate(&mask.units)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub units: Vec<usize>,
    pub overall_accuracy: f64,
    pub per_class_accuracy: [f64; CLASSES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub layer: LayerTag,
    pub fraction: f64,
    pub trials: usize,
    /// Trial `i` draws its mask with `seed + i`.
    pub seed: u64,
    pub images: usize,
    pub baseline_overall: f64,
    pub baseline_per_class: [f64; CLASSES],
    pub per_trial: Vec<TrialRecord>,
    /// Mean over trials of ablated minus healthy accuracy, in percentage points.
    pub mean_change_pp: [f64; CLASSES],
    pub mean_overall_change_pp: f64,
}

impl CampaignResult {
    /// Per-trial accuracies as CSV: `trial,seed,units,overall,class_0..class_9`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["trial".to_string(), "seed".into(), "units".into(), "overall".into()];
        header.extend((0..CLASSES).map(|c| format!("class_{c}")));
        w.write_record(&header)?;
        for (i, t) in self.per_trial.iter().enumerate() {
            let mut rec = vec![i.to_string(), t.seed.to_string(), t.units.len().to_string(), t.overall_accuracy.to_string()];
            rec.extend(t.per_class_accuracy.iter().map(|a| a.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
        Ok(())
    }
}

/// Ablate a random `fraction` of `layer` in `trials` independent trials and
/// average the per-class accuracy change against the healthy model.
pub fn run_campaign(
    model: &ModelState,
    set: &LabeledImageSet,
    plan: &BatchPlan,
    layer: LayerTag,
    fraction: f64,
    trials: usize,
    seed: u64,
) -> Result<CampaignResult> {
    if trials == 0 {
        return Err(Error::InvalidArgument("a campaign needs at least one trial".into()));
    }
    let prefix = Prefix::new(model, set, plan, layer)?;
    let baseline = prefix.evaluate(&[])?;
    let mut per_trial = Vec::with_capacity(trials);
    let mut sum = [0.0f64; CLASSES];
    let mut overall = 0.0;
    for i in 0..trials {
        let s = seed.wrapping_add(i as u64);
        let mask = random_mask(&model.arch, layer, fraction, s)?;
        let r = prefix.evaluate(&mask.units)?;
        for c in 0..CLASSES {
            sum[c] += r.per_class_accuracy[c] - baseline.per_class_accuracy[c];
        }
        overall += r.overall_accuracy - baseline.overall_accuracy;
        per_trial.push(TrialRecord {
            seed: s,
            units: mask.units,
            overall_accuracy: r.overall_accuracy,
            per_class_accuracy: r.per_class_accuracy,
        });
    }
    let n = trials as f64;
    Ok(CampaignResult {
        layer,
        fraction,
        trials,
        seed,
        images: baseline.images,
        baseline_overall: baseline.overall_accuracy,
        baseline_per_class: baseline.per_class_accuracy,
        per_trial,
        mean_change_pp: sum.map(|s| 100.0 * s / n),
        mean_overall_change_pp: 100.0 * overall / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitRef {
    pub layer: LayerTag,
    pub unit: usize,
}

/// Per-class accuracy change (fraction, negative = harmful) of ablating
/// each unit alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitImpactMatrix {
    pub units: Vec<UnitRef>,
    pub deltas: Vec<[f64; CLASSES]>,
    pub baseline_per_class: [f64; CLASSES],
    pub images: usize,
}

impl UnitImpactMatrix {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// `layer,unit,delta_0..delta_9`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["layer".to_string(), "unit".into()];
        header.extend((0..CLASSES).map(|c| format!("delta_{c}")));
        w.write_record(&header)?;
        for (u, d) in self.units.iter().zip(&self.deltas) {
            let mut rec = vec![u.layer.to_string(), u.unit.to_string()];
            rec.extend(d.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
        Ok(())
    }
}

/// Layers a sweep covers: every hidden layer, plus the output layer on request.
pub fn sweep_layers(include_output: bool) -> Vec<LayerTag> {
    let mut v = LayerTag::HIDDEN.to_vec();
    if include_output {
        v.push(LayerTag::Out);
    }
    v
}

/// One single-unit ablation per unit of `layers`, in layer then unit order.
pub fn unit_sweep(
    model: &ModelState,
    set: &LabeledImageSet,
    plan: &BatchPlan,
    layers: &[LayerTag],
) -> Result<UnitImpactMatrix> {
    let mut units = Vec::new();
    let mut deltas = Vec::new();
    let mut baseline_per_class = [0.0; CLASSES];
    let mut images = 0;
    for &layer in layers {
        let prefix = Prefix::new(model, set, plan, layer)?;
        let base = prefix.evaluate(&[])?;
        baseline_per_class = base.per_class_accuracy;
        images = base.images;
        for u in 0..model.arch.units(layer) {
            let r = prefix.evaluate(&[u])?;
            let mut d = [0.0; CLASSES];
            for c in 0..CLASSES {
                d[c] = r.per_class_accuracy[c] - base.per_class_accuracy[c];
            }
            units.push(UnitRef { layer, unit: u });
            deltas.push(d);
        }
    }
    Ok(UnitImpactMatrix {
        units,
        deltas,
        baseline_per_class,
        images,
    })
}
