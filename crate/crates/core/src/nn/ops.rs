//! Layer kernels over a batch chunk.
//!
//! Feature maps are laid out channel-major across the chunk, `(C, B, H, W)`,
//! so one matrix product covers every image of the chunk. With a single
//! input channel this coincides with the usual `(B, 1, H, W)` image layout.

use crate::linalg::{gemm, Real, Trans};
use crate::nn::arch::{KERNEL, KERNEL_AREA, PAD};

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
#[inline]
fn valid_range(side: usize, k: usize) -> (usize, usize) {
    let lo = PAD.saturating_sub(k);
    let hi = (side + PAD).saturating_sub(k).min(side);
    (lo, hi.max(lo))
}

/// Unfold `(cin, b, side, side)` into a `(cin * 25, b * side * side)` patch
/// matrix for a 5x5 kernel with stride 1 and padding 2.
pub fn im2col<T: Real>(input: &[T], cin: usize, b: usize, side: usize, col: &mut [T]) {
    let hw = side * side;
    let n = b * hw;
    debug_assert_eq!(input.len(), cin * n);
    debug_assert_eq!(col.len(), cin * KERNEL_AREA * n);
    for ci in 0..cin {
        for ky in 0..KERNEL {
            let (ylo, yhi) = valid_range(side, ky);
            for kx in 0..KERNEL {
                let (xlo, xhi) = valid_range(side, kx);
                let row = &mut col[(ci * KERNEL_AREA + ky * KERNEL + kx) * n..][..n];
                for bi in 0..b {
                    let plane = &input[(ci * b + bi) * hw..][..hw];
                    let dst_plane = &mut row[bi * hw..][..hw];
                    for y in 0..side {
                        let dst = &mut dst_plane[y * side..][..side];
                        if y < ylo || y >= yhi {
                            dst.fill(T::ZERO);
                            continue;
                        }
                        let sy = y + ky - PAD;
                        let src = &plane[sy * side..][..side];
                        dst[..xlo].fill(T::ZERO);
                        dst[xhi..].fill(T::ZERO);
                        let off = xlo + kx - PAD;
                        dst[xlo..xhi].copy_from_slice(&src[off..off + (xhi - xlo)]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input.
pub fn col2im<T: Real>(col: &[T], cin: usize, b: usize, side: usize, out: &mut [T]) {
    let hw = side * side;
    let n = b * hw;
    out.fill(T::ZERO);
    for ci in 0..cin {
        for ky in 0..KERNEL {
            let (ylo, yhi) = valid_range(side, ky);
            for kx in 0..KERNEL {
                let (xlo, xhi) = valid_range(side, kx);
                let row = &col[(ci * KERNEL_AREA + ky * KERNEL + kx) * n..][..n];
                for bi in 0..b {
                    let plane = &mut out[(ci * b + bi) * hw..][..hw];
                    let src_plane = &row[bi * hw..][..hw];
                    for y in ylo..yhi {
                        let sy = y + ky - PAD;
                        let off = xlo + kx - PAD;
                        let dst = &mut plane[sy * side + off..][..xhi - xlo];
                        let src = &src_plane[y * side + xlo..][..xhi - xlo];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// `out (cout, n) = w (cout, k) * col (k, n) + bias`.
pub fn conv_forward<T: Real>(w: &[T], bias: &[T], col: &[T], cout: usize, k: usize, n: usize, out: &mut [T]) {
    for (row, &b) in out.chunks_exact_mut(n).zip(bias) {
        row.fill(b);
    }
    gemm(cout, k, n, T::ONE, w, Trans::No, col, Trans::No, T::ONE, out);
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if !(*v > T::ZERO) {
            *v = T::ZERO;
        }
    }
}

/// Zero `grad` wherever the forward output was not positive.
pub fn relu_backward<T: Real>(output: &[T], grad: &mut [T]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if !(y > T::ZERO) {
            *g = T::ZERO;
        }
    }
}

/// 2x2 max pool with stride 2 over `planes` square maps of side `side`
/// (trailing odd row/column dropped). Returns the argmax position of each
/// output within its input plane; ties go to the first position in
/// row-major window order.
pub fn maxpool_forward<T: Real>(input: &[T], planes: usize, side: usize, out: &mut [T], argmax: &mut [u32]) {
    let os = side / 2;
    let hw = side * side;
    let ohw = os * os;
    for p in 0..planes {
        let src = &input[p * hw..][..hw];
        let dst = &mut out[p * ohw..][..ohw];
        let arg = &mut argmax[p * ohw..][..ohw];
        for oy in 0..os {
            for ox in 0..os {
                let base = 2 * oy * side + 2 * ox;
                let mut best = base;
                for cand in [base + 1, base + side, base + side + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                dst[oy * os + ox] = src[best];
                arg[oy * os + ox] = best as u32;
            }
        }
    }
}

/// Route each pooled gradient to the single input position that won.
pub fn maxpool_backward<T: Real>(grad_out: &[T], argmax: &[u32], planes: usize, side: usize, grad_in: &mut [T]) {
    let os = side / 2;
    let hw = side * side;
    let ohw = os * os;
    grad_in.fill(T::ZERO);
    for p in 0..planes {
        let gi = &mut grad_in[p * hw..][..hw];
        for (g, &a) in grad_out[p * ohw..][..ohw].iter().zip(&argmax[p * ohw..][..ohw]) {
            gi[a as usize] += *g;
        }
    }
}

/// `(C, B, s, s)` -> `(B, C*s*s)`, channel-major then row-major per image.
pub fn flatten<T: Real>(maps: &[T], c: usize, b: usize, plane: usize, out: &mut [T]) {
    for ci in 0..c {
        for bi in 0..b {
            let src = &maps[(ci * b + bi) * plane..][..plane];
            out[bi * c * plane + ci * plane..][..plane].copy_from_slice(src);
        }
    }
}

pub fn unflatten<T: Real>(flat: &[T], c: usize, b: usize, plane: usize, out: &mut [T]) {
    for ci in 0..c {
        for bi in 0..b {
            out[(ci * b + bi) * plane..][..plane]
                .copy_from_slice(&flat[bi * c * plane + ci * plane..][..plane]);
        }
    }
}

/// `out (b, fout) = x (b, fin) * w^T + bias`, with `w` stored `(fout, fin)`.
pub fn dense_forward<T: Real>(x: &[T], w: &[T], bias: &[T], b: usize, fin: usize, fout: usize, out: &mut [T]) {
    for row in out.chunks_exact_mut(fout) {
        row.copy_from_slice(bias);
    }
    gemm(b, fin, fout, T::ONE, x, Trans::No, w, Trans::Yes, T::ONE, out);
}

/// Row-wise log-softmax in place.
pub fn log_softmax_inplace<T: Real>(x: &mut [T], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::ZERO;
        for &v in row.iter() {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
}

/// Column sums of a `(rows, cols)` matrix, accumulated into `acc`.
pub fn add_col_sums<T: Real>(m: &[T], cols: usize, acc: &mut [T]) {
    for row in m.chunks_exact(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

/// Row sums of a `(rows, cols)` matrix, accumulated into `acc`.
pub fn add_row_sums<T: Real>(m: &[T], cols: usize, acc: &mut [T]) {
    for (a, row) in acc.iter_mut().zip(m.chunks_exact(cols)) {
        let mut s = T::ZERO;
        for &v in row {
            s += v;
        }
        *a += s;
    }
}
