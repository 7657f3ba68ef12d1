use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::embedding::UmapParams;
use crate::error::{Error, Result};
use crate::metrics::{AesPeak, DEFAULT_NH_K};
use crate::nn::LayerTag;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Full,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::Usage(format!("unknown profile `{other}` (expected desk or full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub name: String,
    /// Directory holding the four IDX files.
    pub dir: PathBuf,
    /// Stratified subset of the training images; `None` keeps all.
    pub train_subset: Option<usize>,
    /// Stratified subset of the test images; `None` keeps all.
    pub test_subset: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub eval_each_epoch: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Evaluation batch size; a trailing partial batch is dropped.
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub layers: Vec<LayerTag>,
    pub fraction: f64,
    pub trials: usize,
    pub sweep: bool,
    /// Stratified evaluation rows the sweep scores; `None` uses all.
    pub sweep_rows: Option<usize>,
    pub sweep_include_output: bool,
    /// Layer whose trial-0 mask drives the ablated-model embeddings.
    pub figure_layer: Option<LayerTag>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureSection {
    /// Stratified evaluation rows captured; `None` captures all.
    pub rows: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSection {
    /// Stratified capture rows embedded per layer; `None` uses all.
    pub horizontal_rows: Option<usize>,
    /// Stratified capture rows the units are embedded over; `None` uses all.
    pub vertical_rows: Option<usize>,
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub n_epochs: Option<usize>,
    pub negative_sample_rate: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub nh_k: usize,
    pub aes_peak: AesPeak,
}

/// Everything a run depends on. The output directory is not part of it, so
/// the same configuration written to two places gives identical reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    pub profile: Profile,
    pub master_seed: u64,
    pub data: DataConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub ablation: AblationSection,
    pub capture: CaptureSection,
    pub embedding: EmbeddingSection,
    pub metrics: MetricsSection,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> RunConfig {
        let desk = profile == Profile::Desk;
        RunConfig {
            config_version: CONFIG_VERSION,
            profile,
            master_seed: 0,
            data: DataConfig {
                name: "mnist".into(),
                dir: PathBuf::from("data/mnist"),
                train_subset: None,
                test_subset: None,
            },
            train: TrainSection {
                epochs: if desk { 5 } else { 100 },
                learning_rate: 0.001,
                momentum: 0.9,
                batch_size: 64,
                eval_each_epoch: true,
            },
            eval: EvalSection { batch_size: 32 },
            ablation: AblationSection {
                layers: LayerTag::HIDDEN.to_vec(),
                fraction: 0.5,
                trials: if desk { 10 } else { 100 },
                sweep: true,
                sweep_rows: desk.then_some(1024),
                sweep_include_output: false,
                figure_layer: Some(LayerTag::Conv1),
            },
            capture: CaptureSection {
                rows: desk.then_some(2048),
            },
            embedding: EmbeddingSection {
                horizontal_rows: desk.then_some(1024),
                vertical_rows: None,
                n_neighbors: 15,
                min_dist: 0.1,
                n_epochs: None,
                negative_sample_rate: 5,
                learning_rate: 1.0,
            },
            metrics: MetricsSection {
                nh_k: DEFAULT_NH_K,
                aes_peak: AesPeak::Magnitude,
            },
        }
    }

    /// Profile defaults overlaid with a (possibly partial) JSON object. The
    /// profile comes from `profile` if given, else from the object, else desk.
    pub fn from_json(text: &str, profile: Option<Profile>) -> Result<RunConfig> {
        let patch: Value = serde_json::from_str(text).map_err(|e| Error::Usage(format!("config is not valid JSON: {e}")))?;
        if !patch.is_object() {
            return Err(Error::Usage("config must be a JSON object".into()));
        }
        let base_profile = match (profile, patch.get("profile")) {
            (Some(p), _) => p,
            (None, Some(v)) => serde_json::from_value(v.clone()).map_err(|e| Error::Usage(format!("config profile: {e}")))?,
            (None, None) => Profile::Desk,
        };
        let mut merged = serde_json::to_value(RunConfig::for_profile(base_profile))?;
        merge(&mut merged, &patch);
        if let Some(p) = profile {
            merged["profile"] = serde_json::to_value(p)?;
        }
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Usage(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        if self.train.epochs == 0 {
            return Err(Error::Usage("train.epochs must be >= 1".into()));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Usage("eval.batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ablation.fraction) {
            return Err(Error::Usage("ablation.fraction must lie in [0, 1]".into()));
        }
        if self.ablation.trials == 0 {
            return Err(Error::Usage("ablation.trials must be >= 1".into()));
        }
        if let Some(l) = self.ablation.figure_layer {
            if !self.ablation.layers.contains(&l) {
                return Err(Error::Usage(format!("ablation.figure_layer {l} is not among ablation.layers")));
            }
        }
        if self.metrics.nh_k == 0 {
            return Err(Error::Usage("metrics.nh_k must be >= 1".into()));
        }
        if let (Some(h), Some(c)) = (self.embedding.horizontal_rows, self.capture.rows) {
            if h > c {
                return Err(Error::Usage(format!("embedding.horizontal_rows {h} exceeds capture.rows {c}")));
            }
        }
        if let (Some(v), Some(c)) = (self.embedding.vertical_rows, self.capture.rows) {
            if v > c {
                return Err(Error::Usage(format!("embedding.vertical_rows {v} exceeds capture.rows {c}")));
            }
        }
        self.umap_params(0).validate().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(())
    }

    pub fn umap_params(&self, seed: u64) -> UmapParams {
        let e = &self.embedding;
        UmapParams {
            n_neighbors: e.n_neighbors,
            min_dist: e.min_dist,
            n_epochs: e.n_epochs,
            negative_sample_rate: e.negative_sample_rate,
            learning_rate: e.learning_rate,
            seed,
            ..UmapParams::default()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Hash of the canonical serialization.
    pub fn sha256(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    /// Seed of a named stage: the first 8 bytes (little-endian) of
    /// `sha256(master_seed as 8 LE bytes ++ stage)`.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.master_seed, stage)
    }
}

pub fn derive_seed(master: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("sha256 is 32 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Recursive object merge; non-object values in `patch` replace.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_overlays_profile() {
        let c = RunConfig::from_json(r#"{"train": {"epochs": 2}, "master_seed": 9}"#, None).unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.master_seed, 9);
        assert_eq!(c.profile, Profile::Desk);
        let f = RunConfig::from_json("{}", Some(Profile::Full)).unwrap();
        assert_eq!(f, RunConfig::for_profile(Profile::Full));
        assert!(matches!(RunConfig::from_json(r#"{"bogus": 1}"#, None), Err(Error::Usage(_))));
    }

    #[test]
    fn stage_seeds_differ_and_repeat() {
        let c = RunConfig::for_profile(Profile::Desk);
        assert_eq!(c.stage_seed("train"), c.stage_seed("train"));
        assert_ne!(c.stage_seed("train"), c.stage_seed("capture"));
        assert_ne!(derive_seed(0, "train"), derive_seed(1, "train"));
    }
}
