//! IDX ingestion, normalization and deterministic batching for the
//! MNIST-family datasets (MNIST, KMNIST, Fashion-MNIST share one layout).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
pub const CLASSES: usize = 10;

/// Images of shape `(N, 1, 28, 28)` stored row-major, plus integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub name: String,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
}

impl LabeledImageSet {
    pub fn new(name: impl Into<String>, images: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() * PIXELS {
            return Err(Error::CountMismatch {
                images: images.len() / PIXELS,
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= CLASSES)
        {
            return Err(Error::LabelRange { index, label });
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * PIXELS..(i + 1) * PIXELS]
    }

    /// Copy of the rows named by `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> LabeledImageSet {
        let mut images = Vec::with_capacity(indices.len() * PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        LabeledImageSet {
            name: self.name.clone(),
            images,
            labels,
        }
    }

    /// Gather a batch into contiguous image and label buffers.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f32>, Vec<u8>) {
        let s = self.select(indices);
        (s.images, s.labels)
    }

    pub fn class_counts(&self) -> [usize; CLASSES] {
        let mut c = [0; CLASSES];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Raw pixels widened to `f32` in `[0, 255]`.
pub fn load_idx_images(path: &Path) -> Result<(usize, Vec<f32>)> {
    let bytes = read_file(path)?;
    check_magic(&bytes, IMAGE_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    if rows != SIDE || cols != SIDE {
        return Err(Error::Geometry { rows, cols });
    }
    let expected = 16 + n * PIXELS;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok((n, bytes[16..expected].iter().map(|&b| b as f32).collect()))
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    check_magic(&bytes, LABEL_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

/// Load an image file and its label file into a raw (un-normalized) set.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet> {
    let (n, images) = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let name = images_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_string());
    LabeledImageSet::new(name, images, labels)
}

/// Load `{train,t10k}-{images-idx3,labels-idx1}-ubyte` from a directory.
pub fn load_split(dir: &Path, train: bool) -> Result<LabeledImageSet> {
    let prefix = if train { "train" } else { "t10k" };
    let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    for p in [&images, &labels] {
        if !p.exists() {
            return Err(Error::MissingArtifact {
                path: p.clone(),
                hint: "run scripts/prepare_data.sh or point --data at an IDX directory".into(),
            });
        }
    }
    let mut set = load_idx(&images, &labels)?;
    if let Some(name) = dir.file_name() {
        set.name = name.to_string_lossy().into_owned();
    }
    Ok(set)
}

/// Write raw pixels (rounded to bytes) and labels as an IDX pair.
pub fn write_idx(set: &LabeledImageSet, images_path: &Path, labels_path: &Path) -> Result<()> {
    let mut img = Vec::with_capacity(16 + set.images.len());
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(set.len() as u32).to_be_bytes());
    img.extend_from_slice(&(SIDE as u32).to_be_bytes());
    img.extend_from_slice(&(SIDE as u32).to_be_bytes());
    img.extend(set.images.iter().map(|&p| p.round().clamp(0.0, 255.0) as u8));
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;

    let mut lab = Vec::with_capacity(8 + set.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(set.len() as u32).to_be_bytes());
    lab.extend_from_slice(&set.labels);
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// `(p / 255 - 0.5) / 0.5`, mapping `[0, 255]` onto `[-1, 1]`.
pub fn normalize_pixel(p: f32) -> f32 {
    (p / 255.0 - 0.5) / 0.5
}

pub fn normalize(set: &LabeledImageSet) -> LabeledImageSet {
    LabeledImageSet {
        name: set.name.clone(),
        images: set.images.iter().map(|&p| normalize_pixel(p)).collect(),
        labels: set.labels.clone(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub shuffle: bool,
    pub seed: u64,
    pub drop_last: bool,
}

impl BatchPlan {
    /// Shuffled stream with the trailing partial batch kept.
    pub fn training(batch_size: usize, seed: u64) -> Self {
        Self {
            batch_size,
            shuffle: true,
            seed,
            drop_last: false,
        }
    }

    /// Fixed-order stream with the trailing partial batch dropped.
    pub fn evaluation(batch_size: usize) -> Self {
        Self {
            batch_size,
            shuffle: false,
            seed: 0,
            drop_last: true,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    /// Number of images this plan consumes from a set of `n`.
    pub fn consumed(&self, n: usize) -> usize {
        if self.drop_last {
            n / self.batch_size * self.batch_size
        } else {
            n
        }
    }
}

/// Index batches over `n` items. With `shuffle`, the permutation is a pure
/// function of `plan.seed`.
pub fn batch_indices(n: usize, plan: &BatchPlan) -> Vec<Vec<usize>> {
    assert!(plan.batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    if plan.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        order.shuffle(&mut rng);
    }
    order
        .chunks(plan.batch_size)
        .filter(|c| !plan.drop_last || c.len() == plan.batch_size)
        .map(|c| c.to_vec())
        .collect()
}

/// Materialized `(images, labels)` batches.
pub fn batches(set: &LabeledImageSet, plan: &BatchPlan) -> Vec<(Vec<f32>, Vec<u8>)> {
    batch_indices(set.len(), plan)
        .iter()
        .map(|idx| set.gather(idx))
        .collect()
}

/// Pick `n` indices with per-class quotas proportional to class frequency
/// (largest-remainder rounding), each class sampled without replacement
/// under `seed`. Returned in ascending index order.
pub fn stratified_indices(labels: &[u8], n: usize, seed: u64) -> Vec<usize> {
    if n >= labels.len() {
        return (0..labels.len()).collect();
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); CLASSES];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let total = labels.len() as f64;
    let exact: Vec<f64> = by_class
        .iter()
        .map(|c| c.len() as f64 * n as f64 / total)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut rest = n - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..CLASSES).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            rest -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(n);
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        picked.extend_from_slice(&members[..quota[c]]);
    }
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimal IDX writer independent of `write_idx`.
    fn raw_idx(dir: &Path, pixels: &[u8], labels: &[u8], n_header: u32) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img");
        let lp = dir.join("lab");
        let mut b = vec![0, 0, 8, 3];
        b.extend_from_slice(&n_header.to_be_bytes());
        b.extend_from_slice(&[0, 0, 0, 28, 0, 0, 0, 28]);
        b.extend_from_slice(pixels);
        fs::write(&ip, b).unwrap();
        let mut l = vec![0, 0, 8, 1];
        l.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        l.extend_from_slice(labels);
        fs::write(&lp, l).unwrap();
        (ip, lp)
    }

    #[test]
    fn four_image_file_round_trips_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..4 * PIXELS).map(|i| (i * 7 % 256) as u8).collect();
        let (ip, lp) = raw_idx(dir.path(), &pixels, &[3, 1, 4, 1], 4);
        let set = load_idx(&ip, &lp).unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(set.labels, vec![3, 1, 4, 1]);
        for (a, &b) in set.images.iter().zip(&pixels) {
            assert_eq!(*a, b as f32);
        }
    }

    #[test]
    fn empty_payload_is_empty_set() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = raw_idx(dir.path(), &[], &[], 0);
        let set = load_idx(&ip, &lp).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn label_ten_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = raw_idx(dir.path(), &vec![0; PIXELS], &[10], 1);
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::LabelRange { index: 0, label: 10 })
        ));
    }

    #[test]
    fn malformed_inputs_get_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = raw_idx(dir.path(), &vec![0; PIXELS], &[1], 2);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Truncated { .. })));

        let (ip, lp) = raw_idx(dir.path(), &vec![0; 2 * PIXELS], &[1], 2);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::CountMismatch { .. })));

        let mut bytes = fs::read(&ip).unwrap();
        bytes[3] = 0x01;
        fs::write(&ip, bytes).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn normalization_endpoints() {
        assert!((normalize_pixel(0.0) + 1.0).abs() < 1e-6);
        assert!((normalize_pixel(255.0) - 1.0).abs() < 1e-6);
        assert!(normalize_pixel(127.5).abs() < 1e-6);
        assert!((normalize_pixel(64.0) - (-0.498_039_2)).abs() < 1e-6);
    }

    #[test]
    fn test_plan_consumes_9984_of_10000() {
        let plan = BatchPlan::evaluation(32);
        let b = batch_indices(10_000, &plan);
        assert_eq!(b.len(), 312);
        assert_eq!(b.iter().map(Vec::len).sum::<usize>(), 9_984);
        assert_eq!(plan.consumed(10_000), 9_984);
    }

    #[test]
    fn single_full_batch() {
        let b = batch_indices(64, &BatchPlan::evaluation(64));
        assert_eq!(b.len(), 1);
        let b = batch_indices(65, &BatchPlan::training(64, 1));
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].len(), 1);
    }

    #[test]
    fn same_seed_same_order() {
        let p = BatchPlan::training(7, 99);
        assert_eq!(batch_indices(100, &p), batch_indices(100, &p));
        assert_ne!(batch_indices(100, &p), batch_indices(100, &p.with_seed(100)));
    }

    #[test]
    fn stratified_keeps_class_proportions() {
        let labels: Vec<u8> = (0..1000).map(|i| (i % 10) as u8).collect();
        let idx = stratified_indices(&labels, 100, 3);
        assert_eq!(idx.len(), 100);
        let mut counts = [0; 10];
        for &i in &idx {
            counts[labels[i] as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10));
        assert_eq!(idx, stratified_indices(&labels, 100, 3));
    }
}
