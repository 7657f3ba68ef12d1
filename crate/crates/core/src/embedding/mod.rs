//! UMAP-style 2-D embeddings of activation matrices, per image (horizontal)
//! or per unit (vertical), with a shared initialization and Procrustes
//! alignment along the network.

pub mod fuzzy;
pub mod knn;
pub mod layout;
pub mod procrustes;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationMatrix;
use crate::dataset::PIXELS;
use crate::error::{Error, Result};
use crate::nn::LayerTag;

pub use fuzzy::{fuzzy_simplicial_set, FuzzyGraph};
pub use knn::{knn_graph, knn_graph_f64, KnnGraph};
pub use layout::{fit_ab, layout_loss, optimize_layout, LayoutSettings};
pub use procrustes::{procrustes_align, Alignment};

/// `min_dist` of the data-space embedding every horizontal layout starts from.
pub const SHARED_INIT_MIN_DIST: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UmapParams {
    pub n_neighbors: usize,
    pub min_dist: f64,
    /// `None`: 500 for up to 10,000 points, 200 above.
    pub n_epochs: Option<usize>,
    pub negative_sample_rate: usize,
    pub learning_rate: f64,
    pub metric: Metric,
    pub seed: u64,
}

impl Default for UmapParams {
    fn default() -> Self {
        Self {
            n_neighbors: 15,
            min_dist: 0.1,
            n_epochs: None,
            negative_sample_rate: 5,
            learning_rate: 1.0,
            metric: Metric::Euclidean,
            seed: 0,
        }
    }
}

impl UmapParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_neighbors < 2 {
            return Err(Error::InvalidArgument("n_neighbors must be >= 2".into()));
        }
        if !(0.0..layout::SPREAD).contains(&self.min_dist) {
            return Err(Error::InvalidArgument(format!("min_dist {} must lie in [0, 1)", self.min_dist)));
        }
        if self.negative_sample_rate == 0 || !(self.learning_rate > 0.0) || self.n_epochs == Some(0) {
            return Err(Error::InvalidArgument(
                "negative_sample_rate, learning_rate and n_epochs must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn epochs_for(&self, n: usize) -> usize {
        self.n_epochs.unwrap_or(if n <= 10_000 { 500 } else { 200 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// One point per image.
    Horizontal,
    /// One point per unit.
    Vertical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub reference: String,
    pub disparity: f64,
}

/// Everything about an embedding except its per-point rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub id: String,
    pub axis: Axis,
    pub source_layer: Option<LayerTag>,
    pub params: UmapParams,
    pub n_epochs: usize,
    pub a: f64,
    pub b: f64,
    pub lineage: Option<Lineage>,
    /// Points whose bandwidth search could not reach its target.
    pub saturated_points: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding2D {
    pub meta: EmbeddingMeta,
    pub coords: Vec<[f64; 2]>,
    /// Image index (horizontal) or activation-matrix column (vertical).
    pub point_ids: Vec<usize>,
    pub labels: Vec<Option<u8>>,
    pub layers: Vec<Option<LayerTag>>,
}

impl Embedding2D {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn flat_coords(&self) -> Vec<f64> {
        self.coords.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    /// `id,x,y,label,layer`; coordinates print in shortest round-trip form.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "x", "y", "label", "layer"])?;
        for i in 0..self.len() {
            w.write_record([
                self.point_ids[i].to_string(),
                self.coords[i][0].to_string(),
                self.coords[i][1].to_string(),
                self.labels[i].map(|l| l.to_string()).unwrap_or_default(),
                self.layers[i].map(|l| l.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
        Ok(())
    }

    /// CSV plus a JSON sidecar at `<csv path>.json`.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        let file = fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
        self.write_csv(std::io::BufWriter::new(file))?;
        let side = sidecar_path(csv_path);
        fs::write(&side, serde_json::to_vec_pretty(&self.meta)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(csv_path: &Path) -> Result<Embedding2D> {
        let side = sidecar_path(csv_path);
        let meta: EmbeddingMeta =
            serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
        let mut r = csv::Reader::from_path(csv_path)?;
        let mut e = Embedding2D {
            meta,
            coords: Vec::new(),
            point_ids: Vec::new(),
            labels: Vec::new(),
            layers: Vec::new(),
        };
        let bad = |what: &str| Error::Corrupt {
            what: "embedding csv",
            reason: what.to_string(),
        };
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            e.point_ids.push(rec[0].parse().map_err(|_| bad("id"))?);
            let x: f64 = rec[1].parse().map_err(|_| bad("x"))?;
            let y: f64 = rec[2].parse().map_err(|_| bad("y"))?;
            e.coords.push([x, y]);
            e.labels.push(if rec[3].is_empty() { None } else { Some(rec[3].parse().map_err(|_| bad("label"))?) });
            e.layers.push(if rec[4].is_empty() { None } else { Some(rec[4].parse()?) });
        }
        Ok(e)
    }
}

pub fn sidecar_path(csv_path: &Path) -> std::path::PathBuf {
    let mut s = csv_path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Result of one UMAP run.
#[derive(Clone, Debug)]
pub struct UmapRun {
    pub coords: Vec<[f64; 2]>,
    pub graph: FuzzyGraph,
    pub a: f64,
    pub b: f64,
    pub n_epochs: usize,
}

/// Affinely map each axis of `init` onto `[0, 10]`.
pub fn rescale_init(init: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in init {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    init.iter()
        .map(|p| {
            let mut q = [0.0; 2];
            for d in 0..2 {
                let span = hi[d] - lo[d];
                q[d] = if span > 0.0 { 10.0 * (p[d] - lo[d]) / span } else { 0.0 };
            }
            q
        })
        .collect()
}

/// Uniform coordinates in `[-10, 10)^2`.
pub fn random_init(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_1417);
    (0..n)
        .map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)])
        .collect()
}

/// Embed the `points.len() / dim` rows of `points`. A supplied init is
/// rescaled to `[0, 10]` per axis first; otherwise the start is random.
pub fn umap(points: &[f32], dim: usize, init: Option<&[[f64; 2]]>, params: &UmapParams) -> Result<UmapRun> {
    params.validate()?;
    let n = points.len() / dim.max(1);
    let knn = knn_graph(points, dim, params.n_neighbors)?;
    let graph = fuzzy_simplicial_set(&knn)?;
    let (a, b) = fit_ab(params.min_dist)?;
    let start = match init {
        Some(c) if c.len() != n => {
            return Err(Error::Shape(format!("init has {} points, data {n}", c.len())));
        }
        Some(c) => rescale_init(c),
        None => random_init(n, params.seed),
    };
    let n_epochs = params.epochs_for(n);
    let settings = LayoutSettings {
        n_epochs,
        learning_rate: params.learning_rate,
        negative_sample_rate: params.negative_sample_rate,
        a,
        b,
        seed: params.seed,
    };
    let coords = optimize_layout(&graph, &start, &settings)?;
    Ok(UmapRun {
        coords,
        graph,
        a,
        b,
        n_epochs,
    })
}

fn meta_for(id: String, axis: Axis, layer: Option<LayerTag>, params: &UmapParams, run: &UmapRun) -> EmbeddingMeta {
    EmbeddingMeta {
        id,
        axis,
        source_layer: layer,
        params: params.clone(),
        n_epochs: run.n_epochs,
        a: run.a,
        b: run.b,
        lineage: None,
        saturated_points: run.graph.saturated.len(),
    }
}

/// Data-space embedding of the images themselves (`min_dist` 0.8, random
/// start) shared as the start of every horizontal layer embedding.
pub fn shared_init(images: &[f32], labels: &[u8], point_ids: &[usize], params: &UmapParams) -> Result<Embedding2D> {
    let n = images.len() / PIXELS;
    if labels.len() != n || point_ids.len() != n {
        return Err(Error::Shape("labels and ids must match the image count".into()));
    }
    let p = UmapParams {
        min_dist: SHARED_INIT_MIN_DIST,
        ..params.clone()
    };
    let run = umap(images, PIXELS, None, &p)?;
    Ok(Embedding2D {
        meta: meta_for("shared-init".into(), Axis::Horizontal, None, &p, &run),
        coords: run.coords,
        point_ids: point_ids.to_vec(),
        labels: labels.iter().map(|&l| Some(l)).collect(),
        layers: vec![None; n],
    })
}

/// Per-layer image embeddings started from `init`, each aligned to the
/// previous aligned layer (the first to `init`).
pub fn horizontal_reduce(
    matrix: &ActivationMatrix,
    layers: &[LayerTag],
    init: &Embedding2D,
    params: &UmapParams,
) -> Result<Vec<Embedding2D>> {
    if init.point_ids != matrix.row_index {
        return Err(Error::Shape(
            "shared init and activation matrix must cover the same images in the same order".into(),
        ));
    }
    let mut out: Vec<Embedding2D> = Vec::with_capacity(layers.len());
    for &layer in layers {
        let slice = matrix.slice_layer(layer)?;
        let p = UmapParams {
            seed: params.seed.wrapping_add(layer.index() as u64 + 1),
            ..params.clone()
        };
        let run = umap(&slice.to_dense(), slice.width, Some(&init.coords), &p)?;
        let reference = out.last().unwrap_or(init);
        let al = procrustes_align(&reference.coords, &run.coords)?;
        let mut meta = meta_for(format!("horizontal/{layer}"), Axis::Horizontal, Some(layer), &p, &run);
        meta.lineage = Some(Lineage {
            reference: reference.meta.id.clone(),
            disparity: al.disparity,
        });
        out.push(Embedding2D {
            meta,
            coords: al.aligned,
            point_ids: matrix.row_index.clone(),
            labels: matrix.labels.iter().map(|&l| Some(l)).collect(),
            layers: vec![Some(layer); matrix.rows],
        });
    }
    Ok(out)
}

/// One point per hidden unit, embedded from its activations over the
/// matrix's images.
pub fn vertical_reduce(matrix: &ActivationMatrix, params: &UmapParams) -> Result<Embedding2D> {
    let points = matrix.transposed();
    let run = umap(&points, matrix.rows, None, params)?;
    Ok(Embedding2D {
        meta: meta_for("vertical".into(), Axis::Vertical, None, params, &run),
        coords: run.coords,
        point_ids: (0..matrix.cols).collect(),
        labels: vec![None; matrix.cols],
        layers: matrix.column_layers().into_iter().map(Some).collect(),
    })
}
