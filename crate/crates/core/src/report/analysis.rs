use serde::{Deserialize, Serialize};

use crate::ablation::CampaignResult;
use crate::dataset::CLASSES;
use crate::embedding::{knn_graph_f64, Embedding2D};
use crate::error::{Error, Result};
use crate::metrics::{
    neighborhood_hit_graph, neighborhood_hit_per_class, pearson, per_class_error, selective_counts, spearman,
    CorrelationResult, Impact, ImpactRecord, SelectivityRecord,
};
use crate::nn::EvalReport;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// JSON Schema of [`AnalysisReport`].
pub const REPORT_SCHEMA: &str = include_str!("../../schema/analysis_report.schema.json");

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub tool: String,
    pub version: String,
    pub master_seed: u64,
    pub config_sha256: String,
    pub checkpoint_sha256: String,
    pub dataset: String,
    /// The effective run configuration.
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub name: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracySection {
    pub images: usize,
    pub overall: f64,
    pub per_class: [f64; CLASSES],
    pub per_class_error: [f64; CLASSES],
    pub misclassified: usize,
}

impl AccuracySection {
    fn of(e: &EvalReport) -> Self {
        Self {
            images: e.images,
            overall: e.overall_accuracy,
            per_class: e.per_class_accuracy,
            per_class_error: per_class_error(e),
            misclassified: e.misclassified_indices.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub layer: String,
    pub fraction: f64,
    pub trials: usize,
    pub seed: u64,
    pub images: usize,
    pub baseline_overall: f64,
    pub mean_overall_change_pp: f64,
    pub mean_change_pp: [f64; CLASSES],
    /// Largest minus smallest per-class mean change.
    pub spread_pp: f64,
    pub most_affected_class: u8,
    pub least_affected_class: u8,
}

impl CampaignSummary {
    fn of(c: &CampaignResult) -> Self {
        let d = &c.mean_change_pp;
        let (mut lo, mut hi) = (0, 0);
        for k in 1..CLASSES {
            if d[k] < d[lo] {
                lo = k;
            }
            if d[k] > d[hi] {
                hi = k;
            }
        }
        Self {
            layer: c.layer.to_string(),
            fraction: c.fraction,
            trials: c.trials,
            seed: c.seed,
            images: c.images,
            baseline_overall: c.baseline_overall,
            mean_overall_change_pp: c.mean_overall_change_pp,
            mean_change_pp: *d,
            spread_pp: d[hi] - d[lo],
            most_affected_class: lo as u8,
            least_affected_class: hi as u8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNh {
    pub embedding: String,
    pub layer: Option<String>,
    pub nh: f64,
    pub nh_strict: f64,
    pub per_class: [f64; CLASSES],
}

impl LayerNh {
    pub fn of(e: &Embedding2D, k: usize) -> Result<Self> {
        let labels: Option<Vec<u8>> = e.labels.iter().copied().collect();
        let labels = labels.ok_or_else(|| Error::InvalidArgument(format!("embedding {} has unlabeled points", e.meta.id)))?;
        let knn = knn_graph_f64(&e.flat_coords(), 2, k)?;
        Ok(Self {
            embedding: e.meta.id.clone(),
            layer: e.meta.source_layer.map(|l| l.to_string()),
            nh: neighborhood_hit_graph(&knn, &labels, false)?,
            nh_strict: neighborhood_hit_graph(&knn, &labels, true)?,
            per_class: neighborhood_hit_per_class(&knn, &labels)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblatedSection {
    pub description: String,
    pub accuracy: AccuracySection,
    pub nh: Vec<LayerNh>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectiveCounts {
    pub by_as: Option<[usize; CLASSES]>,
    pub by_aes: Option<[usize; CLASSES]>,
    pub aes_negative: Option<[usize; CLASSES]>,
    pub aes_positive: Option<[usize; CLASSES]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedCorrelation {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub result: Option<CorrelationResult>,
    /// Why `result` is missing.
    pub error: Option<String>,
}

impl NamedCorrelation {
    fn new(name: &str, x_label: &str, y_label: &str, x: Vec<f64>, y: Vec<f64>, r: Result<CorrelationResult>) -> Self {
        let (result, error) = match r {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Self {
            name: name.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            x,
            y,
            result,
            error,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub provenance: ReportProvenance,
    pub accuracy: AccuracySection,
    pub campaigns: Vec<CampaignSummary>,
    pub nh_k: usize,
    pub nh: Vec<LayerNh>,
    pub ablated: Option<AblatedSection>,
    pub selective_counts: SelectiveCounts,
    pub correlations: Vec<NamedCorrelation>,
    pub artifacts: Vec<ArtifactRef>,
}

impl AnalysisReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

pub struct AblatedInputs<'a> {
    pub description: String,
    pub eval: &'a EvalReport,
    pub embeddings: &'a [Embedding2D],
}

/// Everything the report aggregates. Embeddings are labeled horizontal
/// ones; `data_embedding` is the embedding of the raw test images.
pub struct ReportInputs<'a> {
    pub provenance: ReportProvenance,
    pub eval: &'a EvalReport,
    pub campaigns: &'a [CampaignResult],
    pub data_embedding: Option<&'a Embedding2D>,
    pub layer_embeddings: &'a [Embedding2D],
    pub selectivity: Option<&'a [SelectivityRecord]>,
    pub impact: Option<&'a [ImpactRecord]>,
    pub ablated: Option<AblatedInputs<'a>>,
    pub nh_k: usize,
    pub artifacts: Vec<ArtifactRef>,
}

fn as_f64(v: [usize; CLASSES]) -> Vec<f64> {
    v.iter().map(|&c| c as f64).collect()
}

pub fn analysis_report(inp: ReportInputs) -> Result<AnalysisReport> {
    let k = inp.nh_k;
    let mut nh = Vec::new();
    let data_nh = inp.data_embedding.map(|e| LayerNh::of(e, k)).transpose()?;
    nh.extend(data_nh.clone());
    for e in inp.layer_embeddings {
        nh.push(LayerNh::of(e, k)?);
    }
    let ablated = inp
        .ablated
        .map(|a| -> Result<AblatedSection> {
            Ok(AblatedSection {
                description: a.description,
                accuracy: AccuracySection::of(a.eval),
                nh: a.embeddings.iter().map(|e| LayerNh::of(e, k)).collect::<Result<_>>()?,
            })
        })
        .transpose()?;

    let by_as = inp.selectivity.map(selective_counts);
    let by_aes = inp.impact.map(selective_counts);
    let split = |s: Impact| {
        inp.impact.map(|recs| {
            let kept: Vec<ImpactRecord> = recs.iter().filter(|r| r.sign == s).cloned().collect();
            selective_counts(&kept)
        })
    };
    let counts = SelectiveCounts {
        by_as,
        by_aes,
        aes_negative: split(Impact::Negative),
        aes_positive: split(Impact::Positive),
    };

    let mut correlations = Vec::new();
    let error = per_class_error(inp.eval);
    if !inp.campaigns.is_empty() {
        let drop: Vec<f64> = (0..CLASSES).map(|c| -inp.campaigns.iter().map(|r| r.mean_change_pp[c]).sum::<f64>()).collect();
        let x = error.to_vec();
        let r = spearman(&x, &drop);
        correlations.push(NamedCorrelation::new(
            "error_vs_ablation_drop",
            "per-class error of the healthy network",
            "per-class accuracy drop summed over ablated layers (pp)",
            x,
            drop,
            r,
        ));
    }
    if let Some(d) = &data_nh {
        let y = d.per_class.to_vec();
        if let Some(c) = by_as {
            let x = as_f64(c);
            let r = pearson(&x, &y);
            correlations.push(NamedCorrelation::new(
                "as_selective_units_vs_nh",
                "units most selective for the class by AS",
                "per-class NH of the test-set embedding",
                x,
                y.clone(),
                r,
            ));
        }
        if let Some(c) = by_aes {
            let x = as_f64(c);
            let r = pearson(&x, &y);
            correlations.push(NamedCorrelation::new(
                "aes_selective_units_vs_nh",
                "units with the most class-specific ablation impact",
                "per-class NH of the test-set embedding",
                x,
                y,
                r,
            ));
        }
    }

    Ok(AnalysisReport {
        schema_version: REPORT_SCHEMA_VERSION,
        provenance: inp.provenance,
        accuracy: AccuracySection::of(inp.eval),
        campaigns: inp.campaigns.iter().map(CampaignSummary::of).collect(),
        nh_k: k,
        nh,
        ablated,
        selective_counts: counts,
        correlations,
        artifacts: inp.artifacts,
    })
}
