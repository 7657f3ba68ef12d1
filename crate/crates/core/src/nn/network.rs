use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PIXELS;
use crate::error::{Error, Result};
use crate::linalg::{gemm, Real, Trans};
use crate::nn::arch::{Arch, LayerTag, KERNEL_AREA};
use crate::nn::ops;

/// Images per work item. Gradients are reduced chunk by chunk in index
/// order, so results do not depend on how many threads run the chunks.
pub const TRAIN_CHUNK: usize = 16;
pub const EVAL_CHUNK: usize = 8;

/// Weight and bias of one parameterized layer. Conv weights are stored
/// `(out, in, 5, 5)`, dense weights `(out, in)`, both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LayerParams<T> {
    fn zeros(arch: &Arch, tag: LayerTag) -> Self {
        let (fan_in, fan_out) = arch.fan(tag);
        Self {
            weight: vec![T::ZERO; fan_in * fan_out],
            bias: vec![T::ZERO; fan_out],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epoch: u32,
    pub seed: u64,
    pub dataset: String,
}

/// Parameters, optimizer velocity and training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Real> {
    pub arch: Arch,
    pub params: Vec<LayerParams<T>>,
    pub velocity: Vec<LayerParams<T>>,
    pub meta: TrainMeta,
}

pub type ModelState = Network<f32>;

/// Log-probabilities and captured rows of one evaluation chunk.
type ChunkOut<T> = (Vec<T>, BTreeMap<LayerTag, Vec<T>>);

/// Per-layer gradients, same layout as [`Network::params`].
pub type Gradients<T> = Vec<LayerParams<T>>;

/// Layers whose activations a forward pass should hand back.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Capture(u8);

impl Capture {
    pub const NONE: Capture = Capture(0);

    pub fn of(tags: &[LayerTag]) -> Self {
        Capture(tags.iter().fold(0, |m, t| m | (1 << t.index())))
    }

    pub fn all() -> Self {
        Self::of(&LayerTag::ALL)
    }

    pub fn contains(self, tag: LayerTag) -> bool {
        self.0 & (1 << tag.index()) != 0
    }
}

pub struct BatchStep<T> {
    pub loss: T,
    pub grads: Gradients<T>,
    pub correct: usize,
}

pub struct ForwardOutput<T> {
    /// `(B, classes)` log-probabilities.
    pub log_probs: Vec<T>,
    /// Per captured layer, `(B, width)` post-activation rows.
    pub captured: BTreeMap<LayerTag, Vec<T>>,
}

/// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
pub fn build_network<T: Real>(arch: Arch, seed: u64) -> Network<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = LayerTag::ALL
        .iter()
        .map(|&tag| {
            let mut p = LayerParams::zeros(&arch, tag);
            let bound = 1.0 / (arch.fan(tag).0 as f64).sqrt();
            for w in p.weight.iter_mut().chain(p.bias.iter_mut()) {
                *w = T::from_f64(rng.random_range(-bound..bound));
            }
            p
        })
        .collect();
    Network {
        arch,
        params,
        velocity: LayerTag::ALL
            .iter()
            .map(|&t| LayerParams::zeros(&arch, t))
            .collect(),
        meta: TrainMeta {
            epoch: 0,
            seed,
            dataset: String::new(),
        },
    }
}

pub fn zero_gradients<T: Real>(arch: &Arch) -> Gradients<T> {
    LayerTag::ALL
        .iter()
        .map(|&t| LayerParams::zeros(arch, t))
        .collect()
}

#[derive(Default)]
struct ConvBuf<T> {
    col: Vec<T>,
    /// Post-ReLU, pre-pool `(C, B, s, s)`.
    act: Vec<T>,
    pooled: Vec<T>,
    argmax: Vec<u32>,
}

/// Reusable buffers for one chunk: forward intermediates (kept for the
/// backward pass) and backward scratch. Every kernel fully overwrites its
/// output, so buffers are only resized, never cleared.
pub struct Workspace<T> {
    staged: Vec<T>,
    conv: [ConvBuf<T>; 3],
    /// Post-pool map of the last conv layer, flattened `(B, features)`.
    flat: Vec<T>,
    fc1: Vec<T>,
    fc2: Vec<T>,
    log_probs: Vec<T>,
    d_logits: Vec<T>,
    d_fc2: Vec<T>,
    d_fc1: Vec<T>,
    d_flat: Vec<T>,
    d_pooled: Vec<T>,
    d_act: Vec<T>,
    d_col: Vec<T>,
}

impl<T> Default for Workspace<T> {
    fn default() -> Self {
        Self {
            staged: Vec::new(),
            conv: std::array::from_fn(|_| ConvBuf {
                col: Vec::new(),
                act: Vec::new(),
                pooled: Vec::new(),
                argmax: Vec::new(),
            }),
            flat: Vec::new(),
            fc1: Vec::new(),
            fc2: Vec::new(),
            log_probs: Vec::new(),
            d_logits: Vec::new(),
            d_fc2: Vec::new(),
            d_fc1: Vec::new(),
            d_flat: Vec::new(),
            d_pooled: Vec::new(),
            d_act: Vec::new(),
            d_col: Vec::new(),
        }
    }
}

fn sized<U: Copy>(v: &mut Vec<U>, n: usize, zero: U) -> &mut [U] {
    v.resize(n, zero);
    &mut v[..]
}

/// Per-chunk workspaces and gradients reused across training steps.
pub struct StepScratch<T> {
    lanes: Vec<(Workspace<T>, Gradients<T>)>,
    /// Batch gradient after [`Network::batch_step_with`].
    pub grads: Gradients<T>,
}

impl<T: Real> StepScratch<T> {
    pub fn new(arch: &Arch) -> Self {
        Self {
            lanes: Vec::new(),
            grads: zero_gradients(arch),
        }
    }
}

fn check_finite<T: Real>(xs: &[T], tag: LayerTag) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericFailure {
            layer: tag.name().to_string(),
        })
    }
}

fn zero_into<T: Real>(g: &mut Gradients<T>) {
    for p in g {
        p.weight.fill(T::ZERO);
        p.bias.fill(T::ZERO);
    }
}

impl<T: Real> Network<T> {
    pub fn layer(&self, tag: LayerTag) -> &LayerParams<T> {
        &self.params[tag.index()]
    }

    pub fn layer_mut(&mut self, tag: LayerTag) -> &mut LayerParams<T> {
        &mut self.params[tag.index()]
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .chain(&self.velocity)
            .all(|p| p.weight.iter().chain(&p.bias).all(|v| v.is_finite()))
    }

    /// Width of the rows fed into `tag`.
    pub fn input_width(&self, tag: LayerTag) -> usize {
        match tag.index() {
            0 => PIXELS,
            i => self.arch.activation_width(LayerTag::ALL[i - 1]),
        }
    }

    /// Run layers `start..` on one chunk of `b` input rows, leaving every
    /// intermediate in `ws`.
    fn run_chunk(
        &self,
        ws: &mut Workspace<T>,
        input: &[T],
        start: LayerTag,
        b: usize,
        capture: Capture,
        captured: &mut BTreeMap<LayerTag, Vec<T>>,
    ) -> Result<()> {
        let arch = &self.arch;
        let s = start.index();
        if s > 0 && s < 3 {
            let plane = Arch::conv_input_side(s).pow(2);
            let c = arch.conv_in_channels(s);
            ops::unflatten(input, c, b, plane, sized(&mut ws.staged, input.len(), T::ZERO));
        }
        for i in s.min(3)..3 {
            let tag = LayerTag::ALL[i];
            let cin = arch.conv_in_channels(i);
            let cout = arch.conv[i];
            let side = Arch::conv_input_side(i);
            let n = b * side * side;
            let k = cin * KERNEL_AREA;
            let (before, rest) = ws.conv.split_at_mut(i);
            let buf = &mut rest[0];
            let x: &[T] = match (i == s, i) {
                (true, 0) => input,
                (true, _) => &ws.staged,
                (false, _) => &before[i - 1].pooled,
            };
            let col = sized(&mut buf.col, k * n, T::ZERO);
            ops::im2col(x, cin, b, side, col);
            let p = self.layer(tag);
            let act = sized(&mut buf.act, cout * n, T::ZERO);
            ops::conv_forward(&p.weight, &p.bias, &buf.col, cout, k, n, act);
            check_finite(act, tag)?;
            ops::relu_inplace(act);
            let os = side / 2;
            let pooled = sized(&mut buf.pooled, cout * b * os * os, T::ZERO);
            let argmax = sized(&mut buf.argmax, cout * b * os * os, 0);
            ops::maxpool_forward(&buf.act, cout * b, side, pooled, argmax);
            if capture.contains(tag) {
                let rows = captured.entry(tag).or_default();
                let at = rows.len();
                rows.resize(at + pooled.len(), T::ZERO);
                ops::flatten(pooled, cout, b, os * os, &mut rows[at..]);
            }
        }

        let features = arch.flat_features();
        let flat = sized(&mut ws.flat, b * features, T::ZERO);
        if s <= 2 {
            ops::flatten(&ws.conv[2].pooled, arch.conv[2], b, Arch::pooled_side(2).pow(2), flat);
        } else if s == 3 {
            flat.copy_from_slice(input);
        }

        let dense = |x: &[T], tag: LayerTag, y: &mut Vec<T>, captured: &mut BTreeMap<LayerTag, Vec<T>>| -> Result<()> {
            let (fin, fout) = arch.fan(tag);
            let p = self.layer(tag);
            let y = sized(y, b * fout, T::ZERO);
            ops::dense_forward(x, &p.weight, &p.bias, b, fin, fout, y);
            check_finite(y, tag)?;
            if tag == LayerTag::Out {
                ops::log_softmax_inplace(y, fout);
                check_finite(y, tag)?;
            } else {
                ops::relu_inplace(y);
            }
            if capture.contains(tag) {
                captured.entry(tag).or_default().extend_from_slice(y);
            }
            Ok(())
        };
        if s <= 3 {
            dense(&ws.flat, LayerTag::Fc1, &mut ws.fc1, captured)?;
        }
        match s {
            0..=3 => dense(&ws.fc1, LayerTag::Fc2, &mut ws.fc2, captured)?,
            4 => dense(input, LayerTag::Fc2, &mut ws.fc2, captured)?,
            _ => {}
        }
        if s <= 4 {
            dense(&ws.fc2, LayerTag::Out, &mut ws.log_probs, captured)?;
        } else {
            dense(input, LayerTag::Out, &mut ws.log_probs, captured)?;
        }
        Ok(())
    }

    /// Forward `images.len() / 784` images. Captured conv activations are
    /// post-ReLU, post-pool maps flattened channel-major; dense ones are
    /// post-ReLU vectors; `out` is the log-softmax output.
    pub fn forward(&self, images: &[T], capture: Capture) -> Result<ForwardOutput<T>> {
        self.forward_from(LayerTag::Conv1, images, capture)
    }

    /// Forward starting at layer `start`, given the rows that layer would
    /// receive (images for `conv1`, otherwise the previous layer's
    /// activations in the captured layout).
    pub fn forward_from(&self, start: LayerTag, input: &[T], capture: Capture) -> Result<ForwardOutput<T>> {
        let width = self.input_width(start);
        if !input.len().is_multiple_of(width) {
            return Err(Error::Shape(format!(
                "{} values is not a whole number of {width}-wide rows for {start}",
                input.len()
            )));
        }
        let n = input.len() / width;
        let parts: Vec<Result<ChunkOut<T>>> = input
            .par_chunks(EVAL_CHUNK * width)
            .map_init(Workspace::default, |ws, chunk| {
                let mut cap = BTreeMap::new();
                self.run_chunk(ws, chunk, start, chunk.len() / width, capture, &mut cap)?;
                Ok((ws.log_probs.clone(), cap))
            })
            .collect();
        let mut log_probs = Vec::with_capacity(n * self.arch.classes);
        let mut captured: BTreeMap<LayerTag, Vec<T>> = BTreeMap::new();
        for part in parts {
            let (lp, cap) = part?;
            log_probs.extend_from_slice(&lp);
            for (tag, rows) in cap {
                captured.entry(tag).or_default().extend_from_slice(&rows);
            }
        }
        Ok(ForwardOutput {
            log_probs,
            captured,
        })
    }

    /// Piecewise-linear region the inputs fall in: every ReLU on/off state
    /// and every max-pool winner. Two parameter settings with equal patterns
    /// lie on the same smooth piece of the loss surface.
    pub fn activation_pattern(&self, images: &[T]) -> Result<Vec<u32>> {
        let mut pattern = Vec::new();
        let mut ws = Workspace::default();
        for chunk in images.chunks(EVAL_CHUNK * PIXELS) {
            let mut sink = BTreeMap::new();
            self.run_chunk(&mut ws, chunk, LayerTag::Conv1, chunk.len() / PIXELS, Capture::NONE, &mut sink)?;
            for c in &ws.conv {
                pattern.extend(c.act.iter().map(|&v| (v > T::ZERO) as u32));
                pattern.extend_from_slice(&c.argmax);
            }
            for v in ws.fc1.iter().chain(&ws.fc2) {
                pattern.push((*v > T::ZERO) as u32);
            }
        }
        Ok(pattern)
    }

    /// Predicted class per image.
    pub fn predict(&self, images: &[T]) -> Result<Vec<u8>> {
        let out = self.forward(images, Capture::NONE)?;
        Ok(argmax_rows(&out.log_probs, self.arch.classes))
    }

    /// Backward one chunk; accumulates `scale * d(sum of chunk NLL)` into
    /// `grads` and returns the chunk's summed NLL and correct-prediction count.
    fn backward_chunk(
        &self,
        ws: &mut Workspace<T>,
        images: &[T],
        labels: &[u8],
        scale: T,
        grads: &mut Gradients<T>,
    ) -> Result<(T, usize)> {
        let arch = &self.arch;
        let b = labels.len();
        let mut sink = BTreeMap::new();
        self.run_chunk(ws, images, LayerTag::Conv1, b, Capture::NONE, &mut sink)?;
        let classes = arch.classes;

        let mut loss = T::ZERO;
        let correct = argmax_rows(&ws.log_probs, classes)
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        let d = sized(&mut ws.d_logits, b * classes, T::ZERO);
        for (i, &l) in labels.iter().enumerate() {
            let row = &ws.log_probs[i * classes..][..classes];
            loss -= row[l as usize];
            for c in 0..classes {
                let p = row[c].exp();
                d[i * classes + c] = scale * (if c == l as usize { p - T::ONE } else { p });
            }
        }

        // dense stack, last to first
        let dense_back = |d_out: &[T], x: &[T], tag: LayerTag, g: &mut LayerParams<T>, dx: &mut Vec<T>| {
            let (fin, fout) = arch.fan(tag);
            gemm(fout, b, fin, T::ONE, d_out, Trans::Yes, x, Trans::No, T::ONE, &mut g.weight);
            ops::add_col_sums(d_out, fout, &mut g.bias);
            let dx = sized(dx, b * fin, T::ZERO);
            gemm(b, fout, fin, T::ONE, d_out, Trans::No, &self.layer(tag).weight, Trans::No, T::ZERO, dx);
        };
        let (head, tail) = grads.split_at_mut(LayerTag::Fc1.index());
        dense_back(&ws.d_logits, &ws.fc2, LayerTag::Out, &mut tail[2], &mut ws.d_fc2);
        ops::relu_backward(&ws.fc2, &mut ws.d_fc2);
        dense_back(&ws.d_fc2, &ws.fc1, LayerTag::Fc2, &mut tail[1], &mut ws.d_fc1);
        ops::relu_backward(&ws.fc1, &mut ws.d_fc1);
        dense_back(&ws.d_fc1, &ws.flat, LayerTag::Fc1, &mut tail[0], &mut ws.d_flat);

        // conv stack
        let c3 = arch.conv[2];
        let plane = Arch::pooled_side(2).pow(2);
        let len = ws.d_flat.len();
        ops::unflatten(&ws.d_flat, c3, b, plane, sized(&mut ws.d_pooled, len, T::ZERO));
        for i in (0..3).rev() {
            let cb = &ws.conv[i];
            let cin = arch.conv_in_channels(i);
            let cout = arch.conv[i];
            let side = Arch::conv_input_side(i);
            let n = b * side * side;
            let k = cin * KERNEL_AREA;
            let dact = sized(&mut ws.d_act, cout * n, T::ZERO);
            ops::maxpool_backward(&ws.d_pooled, &cb.argmax, cout * b, side, dact);
            ops::relu_backward(&cb.act, dact);
            let g = &mut head[i];
            gemm(cout, n, k, T::ONE, dact, Trans::No, &cb.col, Trans::Yes, T::ONE, &mut g.weight);
            ops::add_row_sums(dact, n, &mut g.bias);
            if i > 0 {
                let dcol = sized(&mut ws.d_col, k * n, T::ZERO);
                gemm(k, cout, n, T::ONE, &self.params[i].weight, Trans::Yes, &ws.d_act, Trans::No, T::ZERO, dcol);
                ops::col2im(&ws.d_col, cin, b, side, sized(&mut ws.d_pooled, cin * n, T::ZERO));
            }
        }
        Ok((loss, correct))
    }

    /// Mean NLL over the batch and its gradient with respect to every
    /// parameter.
    pub fn loss_and_gradients(&self, images: &[T], labels: &[u8]) -> Result<(T, Gradients<T>)> {
        let step = self.batch_step(images, labels)?;
        Ok((step.loss, step.grads))
    }

    /// [`Self::loss_and_gradients`] plus the number of correctly classified
    /// images under the current parameters.
    pub fn batch_step(&self, images: &[T], labels: &[u8]) -> Result<BatchStep<T>> {
        let mut scratch = StepScratch::new(&self.arch);
        let (loss, correct) = self.batch_step_with(images, labels, &mut scratch)?;
        Ok(BatchStep {
            loss,
            grads: scratch.grads,
            correct,
        })
    }

    /// [`Self::batch_step`] reusing `scratch`; the gradient is left in
    /// `scratch.grads`. Returns the mean loss and the correct count.
    pub fn batch_step_with(&self, images: &[T], labels: &[u8], scratch: &mut StepScratch<T>) -> Result<(T, usize)> {
        let b = labels.len();
        assert_eq!(images.len(), b * PIXELS, "image/label count mismatch");
        let scale = T::ONE / T::from_f64(b.max(1) as f64);
        let chunks = b.div_ceil(TRAIN_CHUNK);
        while scratch.lanes.len() < chunks {
            scratch.lanes.push((Workspace::default(), zero_gradients(&self.arch)));
        }
        let parts: Vec<Result<(T, usize)>> = scratch.lanes[..chunks]
            .par_iter_mut()
            .zip(images.par_chunks(TRAIN_CHUNK * PIXELS))
            .zip(labels.par_chunks(TRAIN_CHUNK))
            .map(|(((ws, g), img), lab)| {
                zero_into(g);
                self.backward_chunk(ws, img, lab, scale, g)
            })
            .collect();
        zero_into(&mut scratch.grads);
        let mut loss = T::ZERO;
        let mut correct = 0;
        for (part, (_, g)) in parts.into_iter().zip(&scratch.lanes) {
            let (l, c) = part?;
            loss += l;
            correct += c;
            for (t, p) in scratch.grads.iter_mut().zip(g) {
                for (a, &v) in t.weight.iter_mut().zip(&p.weight) {
                    *a += v;
                }
                for (a, &v) in t.bias.iter_mut().zip(&p.bias) {
                    *a += v;
                }
            }
        }
        Ok((loss * scale, correct))
    }

    /// Classical momentum: `v <- m v + g`, `p <- p - lr v`.
    pub fn sgd_momentum_step(&mut self, grads: &Gradients<T>, lr: T, momentum: T) {
        for ((p, v), g) in self.params.iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((w, vw), &gw) in p.weight.iter_mut().zip(&mut v.weight).zip(&g.weight) {
                *vw = momentum * *vw + gw;
                *w -= lr * *vw;
            }
            for ((w, vw), &gw) in p.bias.iter_mut().zip(&mut v.bias).zip(&g.bias) {
                *vw = momentum * *vw + gw;
                *w -= lr * *vw;
            }
        }
    }

    /// Element-wise conversion to another precision (velocity included).
    pub fn cast<U: Real>(&self) -> Network<U> {
        let conv = |ps: &Vec<LayerParams<T>>| {
            ps.iter()
                .map(|p| LayerParams {
                    weight: p.weight.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                    bias: p.bias.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                })
                .collect()
        };
        Network {
            arch: self.arch,
            params: conv(&self.params),
            velocity: conv(&self.velocity),
            meta: self.meta.clone(),
        }
    }
}

/// Mean over rows of `-log_probs[label]`.
pub fn nll_loss<T: Real>(log_probs: &[T], labels: &[u8], classes: usize) -> T {
    let mut s = T::ZERO;
    for (row, &l) in log_probs.chunks_exact(classes).zip(labels) {
        s -= row[l as usize];
    }
    s / T::from_f64(labels.len().max(1) as f64)
}

/// Index of the largest entry per row, first one on ties.
pub fn argmax_rows<T: Real>(m: &[T], cols: usize) -> Vec<u8> {
    m.chunks_exact(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * PIXELS).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_parameters_give_uniform_log_probs() {
        let mut net = build_network::<f32>(Arch::tiny(2, 8), 1);
        for p in &mut net.params {
            p.weight.fill(0.0);
            p.bias.fill(0.0);
        }
        let x: Vec<f32> = images(3, 0).iter().map(|&v| v as f32).collect();
        let out = net.forward(&x, Capture::NONE).unwrap();
        for v in out.log_probs {
            assert!((v - (0.1f32).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn log_probs_exponentiate_to_one() {
        let net = build_network::<f32>(Arch::canonical(), 3);
        let x: Vec<f32> = images(2, 1).iter().map(|&v| v as f32).collect();
        let out = net.forward(&x, Capture::all()).unwrap();
        for row in out.log_probs.chunks(10) {
            let s: f32 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert_eq!(out.captured[&LayerTag::Conv1].len(), 2 * 12_544);
        assert_eq!(out.captured[&LayerTag::Fc2].len(), 2 * 512);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_network::<f32>(Arch::canonical(), 42);
        let b = build_network::<f32>(Arch::canonical(), 42);
        assert_eq!(a, b);
        assert_eq!(a.params[0].weight.len(), 64 * 25);
        let bound = 1.0 / 5.0;
        assert!(a.params[0].weight.iter().all(|w| w.abs() <= bound));
        assert!(a.velocity.iter().all(|v| v.weight.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn nll_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lp: Vec<f64> = (0..40).map(|_| rng.random_range(-5.0..0.0)).collect();
        let labels = [3u8, 0, 9, 4];
        let mut want = 0.0;
        for i in 0..4 {
            for c in 0..10 {
                if c == labels[i] as usize {
                    want += -lp[i * 10 + c];
                }
            }
        }
        want /= 4.0;
        assert!((nll_loss(&lp, &labels, 10) - want).abs() < 1e-12);
        let uniform = vec![(0.1f64).ln(); 20];
        assert!((nll_loss(&uniform, &[1, 2], 10) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn momentum_recurrence() {
        let mut net = build_network::<f64>(Arch::tiny(1, 2), 0);
        let start = net.clone();
        let mut g = zero_gradients::<f64>(&net.arch);
        g[5].bias.fill(0.5);
        net.sgd_momentum_step(&g, 0.1, 0.9);
        net.sgd_momentum_step(&g, 0.1, 0.9);
        for (a, b) in net.params[5].bias.iter().zip(&start.params[5].bias) {
            // -lr * g * (2 + m)
            assert!((a - b - (-0.1 * 0.5 * 2.9)).abs() < 1e-15);
        }
        // zero momentum is plain SGD
        let mut net = start.clone();
        net.sgd_momentum_step(&g, 0.1, 0.0);
        assert!((net.params[5].bias[0] - start.params[5].bias[0] + 0.05).abs() < 1e-15);
        // zero gradient, zero velocity
        let mut net = start.clone();
        net.sgd_momentum_step(&zero_gradients(&start.arch), 0.1, 0.9);
        assert_eq!(net, start);
    }

    #[test]
    fn dead_relu_unit_gets_no_gradient() {
        let mut net = build_network::<f64>(Arch::tiny(2, 8), 5);
        // fc1 neuron 3: zero weights, negative bias => never active
        let fin = net.arch.fan(LayerTag::Fc1).0;
        net.params[3].weight[3 * fin..4 * fin].fill(0.0);
        net.params[3].bias[3] = -1.0;
        let x = images(4, 2);
        let (_, g) = net.loss_and_gradients(&x, &[0, 1, 2, 3]).unwrap();
        assert!(g[3].weight[3 * fin..4 * fin].iter().all(|&v| v == 0.0));
        assert_eq!(g[3].bias[3], 0.0);
    }

    #[test]
    fn zero_loss_gives_zero_gradients() {
        // Output bias dominates: log-prob of class 0 rounds to exactly 0.
        let mut net = build_network::<f64>(Arch::tiny(2, 8), 5);
        net.params[5].weight.fill(0.0);
        net.params[5].bias.fill(-1e3);
        net.params[5].bias[0] = 1e3;
        let x = images(2, 3);
        let (loss, g) = net.loss_and_gradients(&x, &[0, 0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|p| p.weight.iter().chain(&p.bias).all(|&v| v == 0.0)));
    }

    #[test]
    fn non_finite_input_names_layer() {
        let net = build_network::<f32>(Arch::tiny(2, 8), 5);
        let mut x = vec![0.0f32; PIXELS];
        x[100] = f32::NAN;
        match net.forward(&x, Capture::NONE) {
            Err(Error::NumericFailure { layer }) => assert_eq!(layer, "conv1"),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn batching_does_not_change_outputs() {
        let net = build_network::<f32>(Arch::tiny(4, 16), 8);
        let x: Vec<f32> = images(40, 4).iter().map(|&v| v as f32).collect();
        let all = net.forward(&x, Capture::all()).unwrap();
        for i in [0, 17, 39] {
            let one = net.forward(&x[i * PIXELS..(i + 1) * PIXELS], Capture::all()).unwrap();
            for (tag, rows) in &one.captured {
                let w = rows.len();
                let full = &all.captured[tag][i * w..(i + 1) * w];
                for (a, b) in rows.iter().zip(full) {
                    assert!((a - b).abs() <= 1e-6);
                }
            }
        }
    }
}
