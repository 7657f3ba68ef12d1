//! Images x units activation matrices.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic    8 bytes "ULNSACTM"
//! version  u32
//! rows     u64
//! cols     u64
//! layers   u32 count, then per layer: tag u8, start u64, end u64
//! out      u32 width of the output block (0 if absent)
//! meta     u32 length, then JSON {provenance, row_index, labels}
//! values   rows * cols f32, row-major
//! out      rows * out width f32, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{batch_indices, stratified_indices, BatchPlan, LabeledImageSet};
use crate::error::{Error, Result};
use crate::nn::network::EVAL_CHUNK;
use crate::nn::{Arch, Capture, LayerTag, ModelState};

pub const MAGIC: &[u8; 8] = b"ULNSACTM";
pub const VERSION: u32 = 1;

const BLOCK: usize = 64 * EVAL_CHUNK;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRange {
    pub layer: LayerTag,
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub fn width(&self) -> usize {
        self.end - self.start
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

/// A stratified row subsample applied to a matrix after capture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subsample {
    pub seed: u64,
    pub from_rows: usize,
    pub rows: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureProvenance {
    /// Content hash or other identifier of the captured checkpoint.
    pub checkpoint: String,
    pub dataset: String,
    /// Subsamples in the order they were applied.
    pub subsamples: Vec<Subsample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub values: Vec<f32>,
    /// Column ranges per hidden layer, in network order, partitioning `0..cols`.
    pub layers: Vec<LayerRange>,
    /// Test-set index of each row.
    pub row_index: Vec<usize>,
    pub labels: Vec<u8>,
    /// Output-layer log-probabilities, `rows x out_width`, kept apart from
    /// the hidden units.
    pub out: Option<Vec<f32>>,
    pub out_width: usize,
    pub provenance: CaptureProvenance,
}

/// One layer's columns of an activation matrix.
#[derive(Clone, Copy, Debug)]
pub struct LayerSlice<'a> {
    pub layer: LayerTag,
    data: &'a [f32],
    stride: usize,
    offset: usize,
    pub width: usize,
    pub rows: usize,
}

impl<'a> LayerSlice<'a> {
    pub fn row(&self, i: usize) -> &'a [f32] {
        &self.data[i * self.stride + self.offset..][..self.width]
    }

    /// Contiguous `rows x width` copy.
    pub fn to_dense(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(self.rows * self.width);
        for i in 0..self.rows {
            v.extend_from_slice(self.row(i));
        }
        v
    }
}

impl ActivationMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..][..self.cols]
    }

    pub fn layer_range(&self, layer: LayerTag) -> Option<LayerRange> {
        self.layers.iter().copied().find(|r| r.layer == layer)
    }

    /// Layer tag of every column.
    pub fn column_layers(&self) -> Vec<LayerTag> {
        let mut v = Vec::with_capacity(self.cols);
        for r in &self.layers {
            v.extend(std::iter::repeat_n(r.layer, r.width()));
        }
        v
    }

    /// Columns of one layer. The output layer comes from the separate
    /// output block when it was captured.
    pub fn slice_layer(&self, layer: LayerTag) -> Result<LayerSlice<'_>> {
        if let Some(r) = self.layer_range(layer) {
            return Ok(LayerSlice {
                layer,
                data: &self.values,
                stride: self.cols,
                offset: r.start,
                width: r.width(),
                rows: self.rows,
            });
        }
        match (&self.out, layer) {
            (Some(out), LayerTag::Out) => Ok(LayerSlice {
                layer,
                data: out,
                stride: self.out_width,
                offset: 0,
                width: self.out_width,
                rows: self.rows,
            }),
            _ => Err(Error::UnknownLayer(format!("{layer} is not part of this activation matrix"))),
        }
    }

    /// Keep the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> ActivationMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        let out = self.out.as_ref().map(|o| {
            rows.iter()
                .flat_map(|&r| o[r * self.out_width..][..self.out_width].iter().copied())
                .collect()
        });
        ActivationMatrix {
            rows: rows.len(),
            cols: self.cols,
            values,
            layers: self.layers.clone(),
            row_index: rows.iter().map(|&r| self.row_index[r]).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            out,
            out_width: self.out_width,
            provenance: self.provenance.clone(),
        }
    }

    /// Class-stratified subsample of `n` rows (original order kept),
    /// recorded in the provenance.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<ActivationMatrix> {
        if n > self.rows {
            return Err(Error::InvalidArgument(format!(
                "cannot subsample {n} rows from {}",
                self.rows
            )));
        }
        let mut m = self.select_rows(&stratified_indices(&self.labels, n, seed));
        m.provenance.subsamples.push(Subsample {
            seed,
            from_rows: self.rows,
            rows: n,
        });
        Ok(m)
    }

    /// Units x images copy of the hidden columns.
    pub fn transposed(&self) -> Vec<f32> {
        let mut t = vec![0.0; self.values.len()];
        for (i, row) in self.values.chunks_exact(self.cols).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                t[j * self.rows + i] = v;
            }
        }
        t
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for r in &self.layers {
            w.write_all(&[r.layer.index() as u8])?;
            w.write_all(&(r.start as u64).to_le_bytes())?;
            w.write_all(&(r.end as u64).to_le_bytes())?;
        }
        let out_width = if self.out.is_some() { self.out_width } else { 0 };
        w.write_all(&(out_width as u32).to_le_bytes())?;
        let meta = serde_json::to_vec(&Meta {
            provenance: self.provenance.clone(),
            row_index: self.row_index.clone(),
            labels: self.labels.clone(),
        })
        .map_err(std::io::Error::other)?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        let mut buf = Vec::with_capacity(4 * self.cols);
        for block in [Some(&self.values), self.out.as_ref()].into_iter().flatten() {
            for chunk in block.chunks(self.cols.max(1)) {
                buf.clear();
                for v in chunk {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ActivationMatrix> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let expected = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut r = BufReader::new(file);
        let m = read_from(&mut r, expected).map_err(|e| match e {
            ReadError::Io(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => corrupt("truncated file".into()),
            ReadError::Io(e) => Error::io(path, e),
            ReadError::Format(e) => e,
        })?;
        Ok(m)
    }

    /// Debug export: `row,image,label` followed by the selected columns.
    pub fn write_csv<W: Write>(&self, out: W, layer: Option<LayerTag>, max_rows: usize) -> Result<()> {
        let cols = match layer {
            Some(l) => {
                self.layer_range(l)
                    .ok_or_else(|| Error::UnknownLayer(l.to_string()))?
                    .range()
            }
            None => 0..self.cols,
        };
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["row".to_string(), "image".into(), "label".into()];
        header.extend(cols.clone().map(|c| format!("u{c}")));
        w.write_record(&header)?;
        for i in 0..self.rows.min(max_rows) {
            let mut rec = vec![i.to_string(), self.row_index[i].to_string(), self.labels[i].to_string()];
            rec.extend(self.row(i)[cols.clone()].iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    provenance: CaptureProvenance,
    row_index: Vec<usize>,
    labels: Vec<u8>,
}

enum ReadError {
    Io(std::io::Error),
    Format(Error),
}

impl From<std::io::Error> for ReadError {
    fn from(e: std::io::Error) -> Self {
        ReadError::Io(e)
    }
}

impl From<Error> for ReadError {
    fn from(e: Error) -> Self {
        ReadError::Format(e)
    }
}

fn corrupt(reason: String) -> Error {
    Error::Corrupt {
        what: "activation matrix",
        reason,
    }
}

fn read_from<R: Read>(r: &mut R, file_len: u64) -> std::result::Result<ActivationMatrix, ReadError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic".into()).into());
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    let mut u32_ = |r: &mut R| -> std::io::Result<u32> {
        r.read_exact(&mut b4)?;
        Ok(u32::from_le_bytes(b4))
    };
    let version = u32_(r)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")).into());
    }
    let mut u64_ = |r: &mut R| -> std::io::Result<u64> {
        r.read_exact(&mut b8)?;
        Ok(u64::from_le_bytes(b8))
    };
    let rows = u64_(r)? as usize;
    let cols = u64_(r)? as usize;
    let n_layers = u32_(r)? as usize;
    if n_layers > LayerTag::ALL.len() {
        return Err(corrupt(format!("{n_layers} layers")).into());
    }
    let mut layers = Vec::with_capacity(n_layers);
    let mut header = 8 + 4 + 16 + 4 + 4 + 4;
    for _ in 0..n_layers {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let layer = *LayerTag::ALL
            .get(tag[0] as usize)
            .ok_or_else(|| corrupt(format!("layer tag {}", tag[0])))?;
        let start = u64_(r)? as usize;
        let end = u64_(r)? as usize;
        layers.push(LayerRange { layer, start, end });
        header += 17;
    }
    let mut next = 0;
    for l in &layers {
        if l.start != next || l.end < l.start {
            return Err(Error::Shape(format!("layer table does not partition the columns at {}", l.layer)).into());
        }
        next = l.end;
    }
    if next != cols {
        return Err(Error::Shape(format!("layer table covers {next} columns, header says {cols}")).into());
    }
    let out_width = u32_(r)? as usize;
    let meta_len = u32_(r)? as usize;
    header += meta_len;
    let payload = 4 * (rows as u64) * (cols as u64 + out_width as u64);
    if header as u64 + payload != file_len {
        return Err(Error::Shape(format!(
            "file holds {} bytes, dimensions {rows}x{cols} (+{out_width}) imply {}",
            file_len,
            header as u64 + payload
        ))
        .into());
    }
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta: Meta = serde_json::from_slice(&meta).map_err(|e| corrupt(format!("metadata: {e}")))?;
    if meta.row_index.len() != rows || meta.labels.len() != rows {
        return Err(Error::Shape("row metadata does not match the row count".into()).into());
    }
    let read_block = |r: &mut R, n: usize| -> std::result::Result<Vec<f32>, ReadError> {
        let mut out = Vec::with_capacity(n);
        let mut buf = vec![0u8; 4 * 4096];
        let mut left = n;
        while left > 0 {
            let take = left.min(4096);
            r.read_exact(&mut buf[..4 * take])?;
            out.extend(buf[..4 * take].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
            left -= take;
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(corrupt("non-finite activation".into()).into());
        }
        Ok(out)
    };
    let values = read_block(r, rows * cols)?;
    let out = if out_width > 0 { Some(read_block(r, rows * out_width)?) } else { None };
    Ok(ActivationMatrix {
        rows,
        cols,
        values,
        layers,
        row_index: meta.row_index,
        labels: meta.labels,
        out,
        out_width,
        provenance: meta.provenance,
    })
}

/// Column ranges of the hidden layers of `arch`, in network order.
pub fn layer_ranges(arch: &Arch) -> Vec<LayerRange> {
    let mut layers = Vec::new();
    let mut start = 0;
    for tag in LayerTag::HIDDEN {
        let w = arch.activation_width(tag);
        layers.push(LayerRange {
            layer: tag,
            start,
            end: start + w,
        });
        start += w;
    }
    layers
}

/// Record every hidden unit (plus the output block) for the test-set images
/// at `indices`, one row per image in the given order.
pub fn capture_rows(
    model: &ModelState,
    set: &LabeledImageSet,
    indices: &[usize],
    checkpoint: &str,
) -> Result<ActivationMatrix> {
    let arch = &model.arch;
    let layers = layer_ranges(arch);
    let cols = layers.last().map_or(0, |r| r.end);
    let rows = indices.len();
    let mut values = vec![0.0f32; rows * cols];
    let mut out = Vec::with_capacity(rows * arch.classes);
    for (bi, block) in indices.chunks(BLOCK).enumerate() {
        let (images, _) = set.gather(block);
        let f = model.forward(&images, Capture::all())?;
        for r in &layers {
            let src = &f.captured[&r.layer];
            let w = r.width();
            for (i, chunk) in src.chunks_exact(w).enumerate() {
                let row = bi * BLOCK + i;
                values[row * cols + r.start..][..w].copy_from_slice(chunk);
            }
        }
        out.extend_from_slice(&f.log_probs);
    }
    Ok(ActivationMatrix {
        rows,
        cols,
        values,
        layers,
        row_index: indices.to_vec(),
        labels: indices.iter().map(|&i| set.labels[i]).collect(),
        out: Some(out),
        out_width: arch.classes,
        provenance: CaptureProvenance {
            checkpoint: checkpoint.to_string(),
            dataset: set.name.clone(),
            subsamples: Vec::new(),
        },
    })
}

/// Capture over the images a (non-shuffling) evaluation plan consumes.
pub fn capture(model: &ModelState, set: &LabeledImageSet, plan: &BatchPlan, checkpoint: &str) -> Result<ActivationMatrix> {
    let indices: Vec<usize> = batch_indices(set.len(), plan).concat();
    capture_rows(model, set, &indices, checkpoint)
}
