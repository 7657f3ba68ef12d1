//! SVG scatter plots, stacked-bar tables and the JSON analysis report.

mod analysis;
mod svg;

pub use analysis::{
    analysis_report, AblatedInputs, AblatedSection, AccuracySection, AnalysisReport, ArtifactRef, CampaignSummary, LayerNh,
    NamedCorrelation, ReportInputs, ReportProvenance, SelectiveCounts, REPORT_SCHEMA, REPORT_SCHEMA_VERSION,
};
pub use svg::{render_scatter, Viewport, HEIGHT, MARGIN, POINT_RADIUS, TOP, WIDTH};

use serde::{Deserialize, Serialize};

use crate::ablation::CampaignResult;
use crate::activations::LayerRange;
use crate::dataset::CLASSES;
use crate::embedding::Embedding2D;
use crate::error::{Error, Result};
use crate::metrics::{Impact, ImpactRecord, SelectivityRecord};
use crate::nn::{Arch, LayerTag};

pub type Rgb = [u8; 3];

/// Class colors, `0..9`.
pub const CLASS_PALETTE: [Rgb; CLASSES] = [
    [0x1f, 0x77, 0xb4],
    [0xff, 0x7f, 0x0e],
    [0x2c, 0xa0, 0x2c],
    [0xd6, 0x27, 0x28],
    [0x94, 0x67, 0xbd],
    [0x8c, 0x56, 0x4b],
    [0xe3, 0x77, 0xc2],
    [0x7f, 0x7f, 0x7f],
    [0xbc, 0xbd, 0x22],
    [0x17, 0xbe, 0xcf],
];

/// Layer colors in network order, conv1 to out.
pub const LAYER_PALETTE: [Rgb; 6] = [
    [0x4e, 0x79, 0xa7],
    [0xf2, 0x8e, 0x2b],
    [0xe1, 0x57, 0x59],
    [0x76, 0xb7, 0xb2],
    [0x59, 0xa1, 0x4f],
    [0xed, 0xc9, 0x48],
];

pub const NEGATIVE_IMPACT: Rgb = [0xc0, 0x1b, 0x1b];
pub const POSITIVE_IMPACT: Rgb = [0x1b, 0x4f, 0xc0];
/// Units not selected by an AS or AES scheme.
pub const UNSELECTED: Rgb = [0xc8, 0xc8, 0xc8];
/// Zero end of the saturation ramp.
pub const RAMP_BASE: Rgb = [0xf2, 0xf2, 0xf2];
pub const OVERLAY: Rgb = [0, 0, 0];

/// Linear ramp from `RAMP_BASE` at 0 to `full` at 1, per channel, rounded
/// to the nearest integer. `s` is clamped to `[0, 1]`.
pub fn saturate(full: Rgb, s: f64) -> Rgb {
    let s = if s.is_nan() { 0.0 } else { s.clamp(0.0, 1.0) };
    std::array::from_fn(|i| (RAMP_BASE[i] as f64 + s * (full[i] as f64 - RAMP_BASE[i] as f64)).round() as u8)
}

pub fn hex(c: Rgb) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ColorScheme {
    ByClass,
    ByLayer,
    /// Layer hue, saturation from a per-point value in `[0, 1]`.
    ByLayerAndMagnitude { values: Vec<f64> },
    /// Units most selective for `class` in its color, saturation = AS;
    /// other units grey.
    ByAs { class: u8, selectivity: Vec<f64>, argmax: Vec<u8> },
    /// Units whose peak impact is on `class` in red (accuracy drops) or blue
    /// (accuracy rises), saturation = rescaled AES; other units grey.
    ByAes {
        class: u8,
        magnitude: Vec<f64>,
        sign: Vec<Impact>,
        argmax: Vec<u8>,
    },
}

impl ColorScheme {
    pub fn name(&self) -> &'static str {
        match self {
            ColorScheme::ByClass => "by_class",
            ColorScheme::ByLayer => "by_layer",
            ColorScheme::ByLayerAndMagnitude { .. } => "by_layer_and_magnitude",
            ColorScheme::ByAs { .. } => "by_as",
            ColorScheme::ByAes { .. } => "by_aes",
        }
    }

    /// One color per point of `e`.
    pub fn colors(&self, e: &Embedding2D) -> Result<Vec<Rgb>> {
        let n = e.len();
        let need = |len: usize, what: &str| {
            if len == n {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{} scheme has {len} {what} for {n} points", self.name())))
            }
        };
        let class_of = |i: usize| -> Result<usize> {
            match e.labels[i] {
                Some(c) if (c as usize) < CLASSES => Ok(c as usize),
                _ => Err(Error::InvalidArgument(format!("point {i} has no class label for the palette"))),
            }
        };
        let layer_of = |i: usize| -> Result<usize> {
            e.layers[i]
                .map(LayerTag::index)
                .ok_or_else(|| Error::InvalidArgument(format!("point {i} has no layer tag for the palette")))
        };
        let check_class = |c: u8| {
            if (c as usize) < CLASSES {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("class {c} out of range")))
            }
        };
        match self {
            ColorScheme::ByClass => (0..n).map(|i| Ok(CLASS_PALETTE[class_of(i)?])).collect(),
            ColorScheme::ByLayer => (0..n).map(|i| Ok(LAYER_PALETTE[layer_of(i)?])).collect(),
            ColorScheme::ByLayerAndMagnitude { values } => {
                need(values.len(), "values")?;
                (0..n).map(|i| Ok(saturate(LAYER_PALETTE[layer_of(i)?], values[i]))).collect()
            }
            ColorScheme::ByAs { class, selectivity, argmax } => {
                check_class(*class)?;
                need(selectivity.len(), "selectivities")?;
                need(argmax.len(), "argmax classes")?;
                Ok((0..n)
                    .map(|i| {
                        if argmax[i] == *class && selectivity[i] > 0.0 {
                            saturate(CLASS_PALETTE[*class as usize], selectivity[i])
                        } else {
                            UNSELECTED
                        }
                    })
                    .collect())
            }
            ColorScheme::ByAes {
                class,
                magnitude,
                sign,
                argmax,
            } => {
                check_class(*class)?;
                need(magnitude.len(), "magnitudes")?;
                need(sign.len(), "signs")?;
                need(argmax.len(), "argmax classes")?;
                Ok((0..n)
                    .map(|i| match (argmax[i] == *class, sign[i]) {
                        (true, Impact::Negative) => saturate(NEGATIVE_IMPACT, magnitude[i]),
                        (true, Impact::Positive) => saturate(POSITIVE_IMPACT, magnitude[i]),
                        _ => UNSELECTED,
                    })
                    .collect())
            }
        }
    }

    /// AS coloring for `class`, one record per point.
    pub fn by_as(class: u8, records: &[SelectivityRecord]) -> ColorScheme {
        ColorScheme::ByAs {
            class,
            selectivity: records.iter().map(|r| r.selectivity).collect(),
            argmax: records.iter().map(|r| r.argmax).collect(),
        }
    }

    /// AES coloring for `class` of the activation-matrix columns laid out by
    /// `layers`; every column of a conv kernel takes that kernel's record.
    /// Columns of units without a record are grey.
    pub fn by_aes(class: u8, layers: &[LayerRange], arch: &Arch, records: &[ImpactRecord]) -> Result<ColorScheme> {
        let cols = layers.iter().map(|l| l.end).max().unwrap_or(0);
        let mut magnitude = vec![0.0; cols];
        let mut sign = vec![Impact::None; cols];
        let mut argmax = vec![u8::MAX; cols];
        for r in records {
            let range = layers
                .iter()
                .find(|l| l.layer == r.unit.layer)
                .ok_or(Error::UnknownLayer(r.unit.layer.to_string()))?;
            let size = arch.units(r.unit.layer);
            if r.unit.unit >= size {
                return Err(Error::UnitOutOfRange {
                    layer: r.unit.layer.to_string(),
                    index: r.unit.unit,
                    size,
                });
            }
            let per_unit = range.width() / size;
            let start = range.start + r.unit.unit * per_unit;
            for c in start..start + per_unit {
                magnitude[c] = r.magnitude;
                sign[c] = r.sign;
                argmax[c] = r.argmax;
            }
        }
        Ok(ColorScheme::ByAes {
            class,
            magnitude,
            sign,
            argmax,
        })
    }
}

/// One scatter plot.
#[derive(Clone, Debug)]
pub struct FigureSpec<'a> {
    pub title: String,
    pub embedding: &'a Embedding2D,
    pub scheme: ColorScheme,
    /// Points drawn last, in black (misclassified images).
    pub overlay: Vec<usize>,
    /// Extra line under the title, e.g. the NH-score.
    pub annotation: Option<String>,
}

impl FigureSpec<'_> {
    pub fn validate(&self) -> Result<()> {
        if let Some(&i) = self.overlay.iter().find(|&&i| i >= self.embedding.len()) {
            return Err(Error::InvalidArgument(format!(
                "overlay index {i} outside embedding of {} points",
                self.embedding.len()
            )));
        }
        Ok(())
    }
}

/// Class x layer table of mean accuracy changes in percentage points, one
/// column per campaign: `class,<layer>,...`.
pub fn stacked_bar_data(campaigns: &[CampaignResult]) -> Result<String> {
    for (i, c) in campaigns.iter().enumerate() {
        if campaigns[..i].iter().any(|p| p.layer == c.layer) {
            return Err(Error::InvalidArgument(format!("two campaigns for layer {}", c.layer)));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["class".to_string()];
    header.extend(campaigns.iter().map(|c| c.layer.to_string()));
    w.write_record(&header)?;
    for class in 0..CLASSES {
        let mut row = vec![class.to_string()];
        row.extend(campaigns.iter().map(|c| c.mean_change_pp[class].to_string()));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_ends_and_monotone() {
        assert_eq!(saturate(CLASS_PALETTE[3], 0.0), RAMP_BASE);
        assert_eq!(saturate(CLASS_PALETTE[3], 1.0), CLASS_PALETTE[3]);
        let mut prev = saturate(NEGATIVE_IMPACT, 0.0);
        for i in 1..=100 {
            let c = saturate(NEGATIVE_IMPACT, i as f64 / 100.0);
            // NEGATIVE_IMPACT is darker than the base in every channel
            assert!(c.iter().zip(&prev).all(|(a, b)| a <= b));
            prev = c;
        }
        assert_eq!(hex([0, 128, 255]), "#0080ff");
    }
}
