//! Stage-by-stage runs over one output directory.
//!
//! Every stage writes `<out>/<stage>/manifest.json` listing the sha256 of
//! the files it read and wrote. A stage reads upstream files only through
//! their manifests and fails when a file is missing or its hash changed.

mod config;

pub use config::{
    derive_seed, sha256_file, sha256_hex, AblationSection, CaptureSection, DataConfig, EmbeddingSection, EvalSection,
    MetricsSection, Profile, RunConfig, TrainSection, CONFIG_VERSION,
};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ablation::{
    apply_ablation, evaluate_ablated, random_mask, run_campaign, sweep_layers, unit_sweep, AblationMask,
    CampaignResult, UnitImpactMatrix,
};
use crate::activations::{capture_rows, layer_ranges, ActivationMatrix};
use crate::dataset::{batch_indices, load_split, normalize, stratified_indices, BatchPlan, LabeledImageSet};
use crate::embedding::{horizontal_reduce, shared_init, vertical_reduce, Embedding2D};
use crate::error::{Error, Result};
use crate::metrics::{
    ablation_effect_selectivity, activational_selectivity, write_impact_csv, write_selectivity_csv, ImpactRecord,
    SelectivityRecord,
};
use crate::nn::{build_network, checkpoint, evaluate, load_checkpoint, train, Arch, EvalReport, LayerTag, TrainConfig};
use crate::report::{
    analysis_report, render_scatter, stacked_bar_data, AblatedInputs, ArtifactRef, ColorScheme, FigureSpec, LayerNh,
    ReportInputs, ReportProvenance,
};

pub const TOOL: &str = "unitlens";
pub const STAGES: [&str; 8] = ["train", "eval", "ablate", "sweep", "capture", "embed", "metrics", "report"];

pub const CHECKPOINT: &str = "train/model.ckpt";
pub const HISTORY: &str = "train/history.csv";
pub const EVAL: &str = "eval/eval.json";
pub const FIGURE_MASK: &str = "ablate/figure_mask.json";
pub const FIGURE_EVAL: &str = "ablate/figure_eval.json";
pub const IMPACT: &str = "sweep/impact.json";
pub const ACTIVATIONS: &str = "capture/activations.bin";
pub const SELECTIVITY: &str = "metrics/selectivity.json";
pub const IMPACT_SELECTIVITY: &str = "metrics/impact_selectivity.json";
pub const NH: &str = "metrics/nh.json";
pub const REPORT: &str = "report/report.json";
pub const STACKED_BAR: &str = "report/stacked_bar.csv";
pub const SHARED_INIT: &str = "embed/shared_init.csv";
pub const VERTICAL: &str = "embed/vertical.csv";

pub fn campaign_path(layer: LayerTag) -> String {
    format!("ablate/campaign_{layer}.json")
}

pub fn horizontal_path(layer: LayerTag) -> String {
    format!("embed/horizontal_{layer}.csv")
}

pub fn ablated_path(layer: LayerTag) -> String {
    format!("embed/ablated_{layer}.csv")
}

fn sidecar(rel: &str) -> String {
    format!("{rel}.json")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    /// The configuration file exactly as given, if one was.
    pub config_input: Option<String>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

impl Manifest {
    pub fn output(&self, rel: &str) -> Option<&FileHash> {
        self.outputs.iter().find(|f| f.path == rel)
    }
}

pub fn manifest_path(out: &Path, stage: &str) -> PathBuf {
    out.join(stage).join("manifest.json")
}

/// A configuration bound to an output directory.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub config_input: Option<String>,
    pub verbose: bool,
    config_sha256: String,
}

/// Files a stage read or wrote, in order.
#[derive(Default)]
struct Ledger {
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

impl Run {
    /// Bind `cfg` to `out`, writing the effective configuration to
    /// `out/config.json` and the input file verbatim to `out/config.input.json`.
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>, config_input: Option<String>) -> Result<Run> {
        cfg.validate()?;
        let out = out.into();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        write_file(&out.join("config.json"), cfg.to_json()?.as_bytes())?;
        if let Some(text) = &config_input {
            write_file(&out.join("config.input.json"), text.as_bytes())?;
        }
        Ok(Run {
            config_sha256: cfg.sha256()?,
            cfg,
            out,
            config_input,
            verbose: false,
        })
    }

    pub fn config_sha256(&self) -> &str {
        &self.config_sha256
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn note(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn manifest(&self, stage: &str) -> Result<Manifest> {
        let p = manifest_path(&self.out, stage);
        if !p.exists() {
            return Err(Error::MissingArtifact {
                path: p,
                hint: format!("run `{TOOL} {stage}` first"),
            });
        }
        read_json(&p)
    }

    /// Path of an upstream file after checking it against its manifest.
    fn upstream(&self, stage: &str, rel: &str, ledger: &mut Ledger) -> Result<PathBuf> {
        let m = self.manifest(stage)?;
        let p = self.path(rel);
        let Some(rec) = m.output(rel) else {
            return Err(Error::MissingArtifact {
                path: p,
                hint: format!("the `{stage}` stage did not produce it; check the configuration and rerun `{TOOL} {stage}`"),
            });
        };
        if !p.exists() {
            return Err(Error::MissingArtifact {
                path: p,
                hint: format!("rerun `{TOOL} {stage}`"),
            });
        }
        let found = sha256_file(&p)?;
        if found != rec.sha256 {
            return Err(Error::Provenance {
                path: p,
                recorded: rec.sha256.clone(),
                found,
            });
        }
        ledger.inputs.push(rec.clone());
        Ok(p)
    }

    fn upstream_json<T: DeserializeOwned>(&self, stage: &str, rel: &str, ledger: &mut Ledger) -> Result<T> {
        read_json(&self.upstream(stage, rel, ledger)?)
    }

    fn upstream_embedding(&self, rel: &str, ledger: &mut Ledger) -> Result<Embedding2D> {
        let p = self.upstream("embed", rel, ledger)?;
        self.upstream("embed", &sidecar(rel), ledger)?;
        Embedding2D::load(&p)
    }

    fn emit(&self, rel: &str, bytes: &[u8], ledger: &mut Ledger) -> Result<()> {
        write_file(&self.path(rel), bytes)?;
        ledger.outputs.push(FileHash {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn emit_json<T: Serialize>(&self, rel: &str, value: &T, ledger: &mut Ledger) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.emit(rel, s.as_bytes(), ledger)
    }

    fn emit_embedding(&self, rel: &str, e: &Embedding2D, ledger: &mut Ledger) -> Result<()> {
        let mut csv = Vec::new();
        e.write_csv(&mut csv)?;
        self.emit(rel, &csv, ledger)?;
        self.emit_json(&sidecar(rel), &e.meta, ledger)
    }

    fn finish(&self, stage: &str, ledger: Ledger) -> Result<Manifest> {
        let m = Manifest {
            stage: stage.into(),
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: self.config_sha256.clone(),
            config_input: self.config_input.clone(),
            inputs: ledger.inputs,
            outputs: ledger.outputs,
        };
        let p = manifest_path(&self.out, stage);
        let mut s = serde_json::to_string_pretty(&m)?;
        s.push('\n');
        write_file(&p, s.as_bytes())?;
        Ok(m)
    }

    fn dataset_dir(&self) -> Result<&Path> {
        let dir = self.cfg.data.dir.as_path();
        if !dir.is_dir() {
            return Err(Error::Usage(format!(
                "dataset directory {} does not exist; set data.dir or pass --data",
                dir.display()
            )));
        }
        Ok(dir)
    }

    /// The normalized training or test split, subset as configured.
    pub fn load_data(&self, train: bool) -> Result<LabeledImageSet> {
        let set = normalize(&load_split(self.dataset_dir()?, train)?);
        let (subset, stage) = if train {
            (self.cfg.data.train_subset, "data/train")
        } else {
            (self.cfg.data.test_subset, "data/test")
        };
        let mut set = match subset {
            Some(n) => set.select(&stratified_indices(&set.labels, n, self.cfg.stage_seed(stage))),
            None => set,
        };
        set.name = self.cfg.data.name.clone();
        Ok(set)
    }

    /// Hashes of the IDX files of a split, recorded as stage inputs.
    fn dataset_inputs(&self, train: bool, ledger: &mut Ledger) -> Result<()> {
        let dir = self.dataset_dir()?;
        let prefix = if train { "train" } else { "t10k" };
        for kind in ["images-idx3", "labels-idx1"] {
            let name = format!("{prefix}-{kind}-ubyte");
            ledger.inputs.push(FileHash {
                path: format!("{}/{name}", self.cfg.data.name),
                sha256: sha256_file(&dir.join(&name))?,
            });
        }
        Ok(())
    }

    pub fn eval_plan(&self) -> BatchPlan {
        BatchPlan::evaluation(self.cfg.eval.batch_size)
    }

    /// Test-set rows the evaluation plan scores.
    pub fn eval_rows(&self, test: &LabeledImageSet) -> Vec<usize> {
        batch_indices(test.len(), &self.eval_plan()).concat()
    }

    /// Stratified subset of `rows` (ascending), or all of them.
    fn subset_rows(test: &LabeledImageSet, rows: &[usize], n: Option<usize>, seed: u64) -> Vec<usize> {
        match n {
            Some(n) => {
                let labels: Vec<u8> = rows.iter().map(|&r| test.labels[r]).collect();
                stratified_indices(&labels, n, seed).into_iter().map(|i| rows[i]).collect()
            }
            None => rows.to_vec(),
        }
    }

    fn load_model(&self, ledger: &mut Ledger) -> Result<(crate::nn::ModelState, String)> {
        let p = self.upstream("train", CHECKPOINT, ledger)?;
        let sha = ledger.inputs.last().map(|f| f.sha256.clone()).unwrap_or_default();
        Ok((load_checkpoint(&p)?, sha))
    }

    pub fn run_stage(&self, stage: &str) -> Result<Manifest> {
        match stage {
            "train" => self.train(),
            "eval" => self.eval(),
            "ablate" => self.ablate(),
            "sweep" => self.sweep(),
            "capture" => self.capture(),
            "embed" => self.embed(),
            "metrics" => self.metrics(),
            "report" => self.report(),
            other => Err(Error::Usage(format!("unknown stage `{other}`"))),
        }
    }

    /// Every stage in order; the sweep is skipped when disabled.
    pub fn pipeline(&self) -> Result<Vec<Manifest>> {
        let mut out = Vec::new();
        for stage in STAGES {
            if stage == "sweep" && !self.cfg.ablation.sweep {
                continue;
            }
            self.note(format!("== {stage}"));
            out.push(self.run_stage(stage)?);
        }
        Ok(out)
    }

    pub fn train(&self) -> Result<Manifest> {
        let mut ledger = Ledger::default();
        let train_set = self.load_data(true)?;
        let test = self.load_data(false)?;
        self.dataset_inputs(true, &mut ledger)?;
        self.dataset_inputs(false, &mut ledger)?;
        let t = &self.cfg.train;
        let tc = TrainConfig {
            epochs: 1,
            learning_rate: t.learning_rate as f32,
            momentum: t.momentum as f32,
            batch_size: t.batch_size,
            seed: self.cfg.stage_seed("train"),
            eval_each_epoch: t.eval_each_epoch,
        };
        let mut model = build_network::<f32>(Arch::canonical(), self.cfg.stage_seed("init"));
        let mut history = Vec::with_capacity(t.epochs);
        // one epoch per call continues the same shuffle stream
        for _ in 0..t.epochs {
            let (m, h) = train(model, &train_set, Some(&test), &tc)?;
            model = m;
            let r = &h[0];
            self.note(format!(
                "epoch {}: loss {:.4}, train acc {:.4}, test acc {}",
                r.epoch,
                r.train_loss,
                r.train_accuracy,
                r.test_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
            ));
            history.extend(h);
        }
        self.emit(CHECKPOINT, &checkpoint::encode(&model), &mut ledger)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "train_loss", "train_accuracy", "test_accuracy"])?;
        for r in &history {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.train_accuracy.to_string(),
                r.test_accuracy.map_or(String::new(), |a| a.to_string()),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        self.emit(HISTORY, &bytes, &mut ledger)?;
        self.finish("train", ledger)
    }

    pub fn eval(&self) -> Result<Manifest> {
        let mut ledger = Ledger::default();
        let (model, _) = self.load_model(&mut ledger)?;
        let test = self.load_data(false)?;
        self.dataset_inputs(false, &mut ledger)?;
        let r = evaluate(&model, &test, &self.eval_plan())?;
        self.note(format!("accuracy {:.4} on {} images", r.overall_accuracy, r.images));
        self.emit_json(EVAL, &r, &mut ledger)?;
        self.finish("eval", ledger)
    }

    pub fn ablate(&self) -> Result<Manifest> {
        let mut ledger = Ledger::default();
        let (model, _) = self.load_model(&mut ledger)?;
        let test = self.load_data(false)?;
        self.dataset_inputs(false, &mut ledger)?;
        let a = &self.cfg.ablation;
        let plan = self.eval_plan();
        for &layer in &a.layers {
            let seed = self.cfg.stage_seed(&format!("ablate/{layer}"));
            let c = run_campaign(&model, &test, &plan, layer, a.fraction, a.trials, seed)?;
            self.note(format!(
                "{layer}: mean overall change {:+.2} pp over {} trials",
                c.mean_overall_change_pp, c.trials
            ));
            self.emit_json(&campaign_path(layer), &c, &mut ledger)?;
            let mut csv = Vec::new();
            c.write_csv(&mut csv)?;
            self.emit(&format!("ablate/campaign_{layer}.csv"), &csv, &mut ledger)?;
            if a.figure_layer == Some(layer) {
                let mask = random_mask(&model.arch, layer, a.fraction, seed)?;
                let r = evaluate_ablated(&model, &test, &plan, &mask)?;
                self.emit_json(FIGURE_MASK, &mask, &mut ledger)?;
                self.emit_json(FIGURE_EVAL, &r, &mut ledger)?;
            }
        }
        self.finish("ablate", ledger)
    }

    pub fn sweep(&self) -> Result<Manifest> {
        let a = &self.cfg.ablation;
        if !a.sweep {
            return Err(Error::Usage("the sweep is disabled (ablation.sweep = false)".into()));
        }
        let mut ledger = Ledger::default();
        let (model, _) = self.load_model(&mut ledger)?;
        let test = self.load_data(false)?;
        self.dataset_inputs(false, &mut ledger)?;
        let rows = Self::subset_rows(&test, &self.eval_rows(&test), a.sweep_rows, self.cfg.stage_seed("sweep/rows"));
        let sub = test.select(&rows);
        let plan = BatchPlan {
            drop_last: false,
            ..self.eval_plan()
        };
        let m = unit_sweep(&model, &sub, &plan, &sweep_layers(a.sweep_include_output))?;
        self.note(format!("{} units over {} images", m.len(), m.images));
        self.emit_json(IMPACT, &m, &mut ledger)?;
        let mut csv = Vec::new();
        m.write_csv(&mut csv)?;
        self.emit("sweep/impact.csv", &csv, &mut ledger)?;
        self.finish("sweep", ledger)
    }

    pub fn capture(&self) -> Result<Manifest> {
        let mut ledger = Ledger::default();
        let (model, sha) = self.load_model(&mut ledger)?;
        let test = self.load_data(false)?;
        self.dataset_inputs(false, &mut ledger)?;
        let rows = Self::subset_rows(
            &test,
            &self.eval_rows(&test),
            self.cfg.capture.rows,
            self.cfg.stage_seed("capture/rows"),
        );
        let m = capture_rows(&model, &test, &rows, &sha)?;
        self.note(format!("{} x {} activations", m.rows, m.cols));
        let p = self.path(ACTIVATIONS);
        fs::create_dir_all(self.path("capture")).map_err(|e| Error::io(self.path("capture"), e))?;
        m.save(&p)?;
        ledger.outputs.push(FileHash {
            path: ACTIVATIONS.into(),
            sha256: sha256_file(&p)?,
        });
        self.finish("capture", ledger)
    }

    pub fn embed(&self) -> Result<Manifest> {
        let mut ledger = Ledger::default();
        let matrix = ActivationMatrix::load(&self.upstream("capture", ACTIVATIONS, &mut ledger)?)?;
        let test = self.load_data(false)?;
        self.dataset_inputs(false, &mut ledger)?;
        let e = &self.cfg.embedding;
        let params = self.cfg.umap_params(self.cfg.stage_seed("embed"));

        let h = match e.horizontal_rows {
            Some(n) => matrix.subsample(n, self.cfg.stage_seed("embed/horizontal-rows"))?,
            None => matrix.clone(),
        };
        let (images, _) = test.gather(&h.row_index);
        let init = shared_init(&images, &h.labels, &h.row_index, &params)?;
        self.note(format!("shared init over {} images", init.len()));
        self.emit_embedding(SHARED_INIT, &init, &mut ledger)?;
        for l in horizontal_reduce(&h, &LayerTag::ALL, &init, &params)? {
            let layer = l.meta.source_layer.expect("horizontal embeddings carry their layer");
            self.emit_embedding(&horizontal_path(layer), &l, &mut ledger)?;
        }
        self.note("horizontal embeddings done");

        let v = match e.vertical_rows {
            Some(n) => matrix.subsample(n, self.cfg.stage_seed("embed/vertical-rows"))?,
            None => matrix,
        };
        let vertical = vertical_reduce(&v, &self.cfg.umap_params(self.cfg.stage_seed("embed/vertical")))?;
        self.note(format!("vertical embedding of {} units over {} images", vertical.len(), v.rows));
        self.emit_embedding(VERTICAL, &vertical, &mut ledger)?;

        if let Some(fl) = self.cfg.ablation.figure_layer {
            let mask: AblationMask = self.upstream_json("ablate", FIGURE_MASK, &mut ledger)?;
            let (model, _) = self.load_model(&mut ledger)?;
            let ablated = apply_ablation(&model, &mask)?;
            let a = capture_rows(&ablated, &test, &h.row_index, &format!("ablated-{fl}"))?;
            for mut l in horizontal_reduce(&a, &LayerTag::ALL, &init, &params)? {
                let layer = l.meta.source_layer.expect("horizontal embeddings carry their layer");
                l.meta.id = format!("ablated-{fl}/{}", l.meta.id);
                if let Some(lin) = &mut l.meta.lineage {
                    if lin.reference != init.meta.id {
                        lin.reference = format!("ablated-{fl}/{}", lin.reference);
                    }
                }
                self.emit_embedding(&ablated_path(layer), &l, &mut ledger)?;
            }
            self.note(format!("ablated-{fl} embeddings done"));
        }
        self.finish("embed", ledger)
    }

    fn embedding_paths(&self) -> Vec<String> {
        let mut v = vec![SHARED_INIT.to_string()];
        v.extend(LayerTag::ALL.iter().map(|&l| horizontal_path(l)));
        if self.cfg.ablation.figure_layer.is_some() {
            v.extend(LayerTag::ALL.iter().map(|&l| ablated_path(l)));
        }
        v
    }

    pub fn metrics(&self) -> Result<Manifest> {
        let mut ledger = Ledger::default();
        let matrix = ActivationMatrix::load(&self.upstream("capture", ACTIVATIONS, &mut ledger)?)?;
        let sel = activational_selectivity(&matrix)?;
        drop(matrix);
        self.emit_json(SELECTIVITY, &sel, &mut ledger)?;
        let mut csv = Vec::new();
        write_selectivity_csv(&sel, &mut csv)?;
        self.emit("metrics/selectivity.csv", &csv, &mut ledger)?;

        if self.cfg.ablation.sweep {
            let m: UnitImpactMatrix = self.upstream_json("sweep", IMPACT, &mut ledger)?;
            let recs = ablation_effect_selectivity(&m, self.cfg.metrics.aes_peak);
            self.emit_json(IMPACT_SELECTIVITY, &recs, &mut ledger)?;
            let mut csv = Vec::new();
            write_impact_csv(&recs, &mut csv)?;
            self.emit("metrics/impact_selectivity.csv", &csv, &mut ledger)?;
        }

        let mut nh = Vec::new();
        for rel in self.embedding_paths() {
            let e = self.upstream_embedding(&rel, &mut ledger)?;
            nh.push(LayerNh::of(&e, self.cfg.metrics.nh_k)?);
        }
        for n in &nh {
            self.note(format!("NH {}: {:.4}", n.embedding, n.nh));
        }
        self.emit_json(NH, &nh, &mut ledger)?;
        self.finish("metrics", ledger)
    }

    pub fn report(&self) -> Result<Manifest> {
        let mut ledger = Ledger::default();
        let cfg = &self.cfg;
        self.upstream("train", CHECKPOINT, &mut ledger)?;
        let checkpoint_sha256 = ledger.inputs[0].sha256.clone();
        let eval: EvalReport = self.upstream_json("eval", EVAL, &mut ledger)?;
        let campaigns: Vec<CampaignResult> = cfg
            .ablation
            .layers
            .iter()
            .map(|&l| self.upstream_json("ablate", &campaign_path(l), &mut ledger))
            .collect::<Result<_>>()?;
        let init = self.upstream_embedding(SHARED_INIT, &mut ledger)?;
        let layers: Vec<Embedding2D> = LayerTag::ALL
            .iter()
            .map(|&l| self.upstream_embedding(&horizontal_path(l), &mut ledger))
            .collect::<Result<_>>()?;
        let vertical = self.upstream_embedding(VERTICAL, &mut ledger)?;
        let selectivity: Vec<SelectivityRecord> = self.upstream_json("metrics", SELECTIVITY, &mut ledger)?;
        let impact: Option<Vec<ImpactRecord>> = if cfg.ablation.sweep {
            Some(self.upstream_json("metrics", IMPACT_SELECTIVITY, &mut ledger)?)
        } else {
            None
        };
        let ablated = match cfg.ablation.figure_layer {
            Some(fl) => {
                let r: EvalReport = self.upstream_json("ablate", FIGURE_EVAL, &mut ledger)?;
                let mask: AblationMask = self.upstream_json("ablate", FIGURE_MASK, &mut ledger)?;
                let es: Vec<Embedding2D> = LayerTag::ALL
                    .iter()
                    .map(|&l| self.upstream_embedding(&ablated_path(l), &mut ledger))
                    .collect::<Result<_>>()?;
                Some((fl, r, mask, es))
            }
            None => None,
        };

        let mut figures: Vec<(String, String)> = Vec::new();
        let k = cfg.metrics.nh_k;
        let nh_note = |e: &Embedding2D| -> Result<String> { Ok(format!("NH = {:.4} (k = {k})", LayerNh::of(e, k)?.nh)) };
        let overlay = |e: &Embedding2D, miss: &[usize]| -> Vec<usize> {
            e.point_ids
                .iter()
                .enumerate()
                .filter(|(_, id)| miss.binary_search(id).is_ok())
                .map(|(i, _)| i)
                .collect()
        };
        let mut miss = eval.misclassified_indices.clone();
        miss.sort_unstable();
        let mut figure = |name: String, spec: FigureSpec| -> Result<()> {
            figures.push((name, render_scatter(&spec)?));
            Ok(())
        };
        figure(
            "report/figures/data_by_class.svg".into(),
            FigureSpec {
                title: "Test images, by class".into(),
                embedding: &init,
                scheme: ColorScheme::ByClass,
                overlay: overlay(&init, &miss),
                annotation: Some(nh_note(&init)?),
            },
        )?;
        for e in &layers {
            let layer = e.meta.source_layer.expect("horizontal embeddings carry their layer");
            figure(
                format!("report/figures/horizontal_{layer}.svg"),
                FigureSpec {
                    title: format!("Layer {layer}, by class; misclassified in black"),
                    embedding: e,
                    scheme: ColorScheme::ByClass,
                    overlay: overlay(e, &miss),
                    annotation: Some(nh_note(e)?),
                },
            )?;
        }
        if let Some((fl, r, mask, es)) = &ablated {
            let mut amiss = r.misclassified_indices.clone();
            amiss.sort_unstable();
            for e in es {
                let layer = e.meta.source_layer.expect("horizontal embeddings carry their layer");
                figure(
                    format!("report/figures/ablated_{fl}_{layer}.svg"),
                    FigureSpec {
                        title: format!("Layer {layer} with {} of {fl} ablated", mask.units.len()),
                        embedding: e,
                        scheme: ColorScheme::ByClass,
                        overlay: overlay(e, &amiss),
                        annotation: Some(nh_note(e)?),
                    },
                )?;
            }
        }
        figure(
            "report/figures/vertical_by_layer.svg".into(),
            FigureSpec {
                title: "Hidden units, by layer".into(),
                embedding: &vertical,
                scheme: ColorScheme::ByLayer,
                overlay: Vec::new(),
                annotation: None,
            },
        )?;
        let ranges = layer_ranges(&Arch::canonical());
        for class in 0..crate::dataset::CLASSES as u8 {
            figure(
                format!("report/figures/vertical_as_class{class}.svg"),
                FigureSpec {
                    title: format!("Units most selective for class {class} (AS)"),
                    embedding: &vertical,
                    scheme: ColorScheme::by_as(class, &selectivity),
                    overlay: Vec::new(),
                    annotation: None,
                },
            )?;
            if let Some(recs) = &impact {
                figure(
                    format!("report/figures/vertical_aes_class{class}.svg"),
                    FigureSpec {
                        title: format!("Units whose ablation changes class {class} most (AES)"),
                        embedding: &vertical,
                        scheme: ColorScheme::by_aes(class, &ranges, &Arch::canonical(), recs)?,
                        overlay: Vec::new(),
                        annotation: Some("red: accuracy drops, blue: accuracy rises".into()),
                    },
                )?;
            }
        }

        let bars = stacked_bar_data(&campaigns)?;
        self.emit(STACKED_BAR, bars.as_bytes(), &mut ledger)?;
        for (name, svg) in &figures {
            self.emit(name, svg.as_bytes(), &mut ledger)?;
        }

        let mut seen = std::collections::HashSet::new();
        let artifacts: Vec<ArtifactRef> = ledger
            .inputs
            .iter()
            .chain(&ledger.outputs)
            .filter(|f| seen.insert(f.path.clone()))
            .map(|f| ArtifactRef {
                name: f.path.rsplit('/').next().unwrap_or(&f.path).to_string(),
                path: f.path.clone(),
                sha256: f.sha256.clone(),
            })
            .collect();

        let provenance = ReportProvenance {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            master_seed: cfg.master_seed,
            config_sha256: self.config_sha256.clone(),
            checkpoint_sha256,
            dataset: cfg.data.name.clone(),
            config: serde_json::to_value(cfg)?,
        };
        let report = analysis_report(ReportInputs {
            provenance,
            eval: &eval,
            campaigns: &campaigns,
            data_embedding: Some(&init),
            layer_embeddings: &layers,
            selectivity: Some(&selectivity),
            impact: impact.as_deref(),
            ablated: ablated.as_ref().map(|(fl, r, mask, es)| AblatedInputs {
                description: format!("{} of {} {fl} units ablated (trial 0 mask)", mask.units.len(), Arch::canonical().units(*fl)),
                eval: r,
                embeddings: es,
            }),
            nh_k: k,
            artifacts,
        })?;
        self.emit(REPORT, report.to_json()?.as_bytes(), &mut ledger)?;
        self.finish("report", ledger)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        what: "stage artifact",
        reason: format!("{}: {e}", path.display()),
    })
}
