//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "ULNSCKPT"
//! version    u32
//! arch       conv[3], fc[2], classes            (u32 each)
//! meta       epoch u32, seed u64, name_len u32, name bytes
//! layers     count u32, then per row: kind u8, activation u8, inputs u32, outputs u32
//! tensors    per parameterized layer: rank u32, dims u32..., bias_len u32
//! payload    weights+biases of every layer, then the same for velocities (f32)
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::arch::{Activation, Arch, LayerKind, LayerTag};
use crate::nn::network::{LayerParams, ModelState, TrainMeta};

pub const MAGIC: &[u8; 8] = b"ULNSCKPT";
pub const VERSION: u32 = 1;

fn kind_code(k: LayerKind) -> u8 {
    match k {
        LayerKind::Conv5x5 => 0,
        LayerKind::Maxpool2x2 => 1,
        LayerKind::FullyConnected => 2,
        LayerKind::Output => 3,
    }
}

fn act_code(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::LogSoftmax => 1,
        Activation::None => 2,
    }
}

pub fn encode(model: &ModelState) -> Vec<u8> {
    let arch = &model.arch;
    let mut out = Vec::with_capacity(16 + 8 * arch.param_count());
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in arch.conv.iter().chain(&arch.fc).chain(std::iter::once(&arch.classes)) {
        u32le(&mut out, *v);
    }
    out.extend_from_slice(&model.meta.epoch.to_le_bytes());
    out.extend_from_slice(&model.meta.seed.to_le_bytes());
    u32le(&mut out, model.meta.dataset.len());
    out.extend_from_slice(model.meta.dataset.as_bytes());
    let specs = arch.layer_specs();
    u32le(&mut out, specs.len());
    for s in &specs {
        out.push(kind_code(s.kind));
        out.push(act_code(s.activation));
        u32le(&mut out, s.inputs);
        u32le(&mut out, s.outputs);
    }
    for tag in LayerTag::ALL {
        let shape = arch.weight_shape(tag);
        u32le(&mut out, shape.len());
        for d in shape {
            u32le(&mut out, d);
        }
        u32le(&mut out, arch.units(tag));
    }
    for p in model.params.iter().chain(&model.velocity) {
        for v in p.weight.iter().chain(&p.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt(format!(
                "truncated at byte {} (need {} more, have {})",
                self.pos,
                n,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn corrupt(reason: String) -> Error {
    Error::Corrupt {
        what: "checkpoint",
        reason,
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let arch = Arch {
        conv: [dims[0], dims[1], dims[2]],
        fc: [dims[3], dims[4]],
        classes: dims[5],
    };
    if arch.classes != crate::dataset::CLASSES || dims.contains(&0) {
        return Err(Error::Shape(format!("implausible architecture {arch:?}")));
    }
    let epoch = r.u32()?;
    let seed = r.u64()?;
    let name_len = r.u32()? as usize;
    let dataset = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| corrupt("dataset name is not UTF-8".into()))?;

    let specs = arch.layer_specs();
    let count = r.u32()? as usize;
    if count != specs.len() {
        return Err(Error::Shape(format!("layer table has {count} rows, expected {}", specs.len())));
    }
    for s in &specs {
        let kind = r.u8()?;
        let act = r.u8()?;
        let found = (kind, act, r.u32()? as usize, r.u32()? as usize);
        if found != (kind_code(s.kind), act_code(s.activation), s.inputs, s.outputs) {
            return Err(Error::Shape(format!("layer table row {found:?} does not match {s:?}")));
        }
    }
    for tag in LayerTag::ALL {
        let rank = r.u32()? as usize;
        if rank > 4 {
            return Err(Error::Shape(format!("{tag}: rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let bias = r.u32()? as usize;
        if shape != arch.weight_shape(tag) || bias != arch.units(tag) {
            return Err(Error::Shape(format!("{tag}: stored weight shape {shape:?}, bias {bias}")));
        }
    }
    let read_set = |r: &mut Reader| -> Result<Vec<LayerParams<f32>>> {
        LayerTag::ALL
            .iter()
            .map(|&t| {
                let (fi, fo) = arch.fan(t);
                Ok(LayerParams {
                    weight: r.f32s(fi * fo)?,
                    bias: r.f32s(fo)?,
                })
            })
            .collect()
    };
    let params = read_set(&mut r)?;
    let velocity = read_set(&mut r)?;
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let model = ModelState {
        arch,
        params,
        velocity,
        meta: TrainMeta {
            epoch,
            seed,
            dataset,
        },
    };
    if !model.all_finite() {
        return Err(corrupt("non-finite parameter".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
