//! Slice-level kernels behind the tape operations.
//!
//! Layouts are row-major: activations are `[C, T, H, W]`, convolution
//! kernels `[C_out, C_in, kT, kH, kW]`. Convolution is cross-correlation
//! (no kernel flip). Spatial convolution is always "valid"; the temporal
//! axis may be zero-padded symmetrically.

use crate::{Element, Result, TensorError};

/// Geometry of a 3D convolution beyond the kernel shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Conv3dSpec {
    /// Zero frames added on each side of the temporal axis.
    pub temporal_pad: usize,
    /// Spatial stride `(h, w)`. The temporal stride is always 1.
    pub stride: (usize, usize),
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Conv3dSpec { temporal_pad: 0, stride: (1, 1) }
    }
}

impl Conv3dSpec {
    pub fn padded(temporal_pad: usize) -> Self {
        Conv3dSpec { temporal_pad, stride: (1, 1) }
    }

    pub fn strided(stride: usize) -> Self {
        Conv3dSpec { temporal_pad: 0, stride: (stride, stride) }
    }
}

/// How an odd-length axis is halved by 2x2x2 max pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Rounding {
    #[default]
    Floor,
    /// Zero-pads the trailing edge by one cell on odd axes.
    Ceil,
}

impl Rounding {
    pub fn halve(self, n: usize) -> usize {
        match self {
            Rounding::Floor => n / 2,
            Rounding::Ceil => n.div_ceil(2),
        }
    }
}

/// Output dims `[C_out, T', H', W']` of a 3D convolution.
pub fn conv3d_output_dims(input: &[usize], kernel: &[usize], spec: Conv3dSpec) -> Result<[usize; 4]> {
    const OP: &str = "conv3d";
    if input.len() != 4 {
        return Err(TensorError::shape(OP, format!("input must be [C,T,H,W], got {input:?}")));
    }
    if kernel.len() != 5 {
        return Err(TensorError::shape(OP, format!("kernel must be [Co,Ci,kT,kH,kW], got {kernel:?}")));
    }
    let (sh, sw) = spec.stride;
    if sh == 0 || sw == 0 {
        return Err(TensorError::invalid(OP, "stride must be positive"));
    }
    let [c, t, h, w] = [input[0], input[1], input[2], input[3]];
    let [co, ci, kt, kh, kw] = [kernel[0], kernel[1], kernel[2], kernel[3], kernel[4]];
    if ci != c {
        return Err(TensorError::shape(OP, format!("kernel expects {ci} input channels, input has {c}")));
    }
    let tp = t + 2 * spec.temporal_pad;
    if kt == 0 || kh == 0 || kw == 0 || kt > tp || kh > h || kw > w {
        return Err(TensorError::shape(
            OP,
            format!("kernel {kt}x{kh}x{kw} does not fit input {t}(+2*{})x{h}x{w}", spec.temporal_pad),
        ));
    }
    Ok([co, tp - kt + 1, (h - kh) / sh + 1, (w - kw) / sw + 1])
}

/// Output dims of 2x2x2 stride-2 max pooling with per-axis rounding.
pub fn maxpool3d_output_dims(input: &[usize], rounding: [Rounding; 3]) -> Result<[usize; 4]> {
    const OP: &str = "maxpool3d";
    if input.len() != 4 {
        return Err(TensorError::shape(OP, format!("input must be [C,T,H,W], got {input:?}")));
    }
    let out = [
        input[0],
        rounding[0].halve(input[1]),
        rounding[1].halve(input[2]),
        rounding[2].halve(input[3]),
    ];
    if out.contains(&0) {
        return Err(TensorError::shape(OP, format!("{input:?} pools to empty axis {out:?}")));
    }
    Ok(out)
}

#[inline]
fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let tail = ra.iter().zip(rb).fold(T::zero(), |s, (&x, &y)| s + x * y);
    acc.iter().copied().fold(tail, |s, v| s + v)
}

#[inline]
fn sum<T: Element>(a: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let chunks = a.chunks_exact(LANES);
    let tail = chunks.remainder().iter().copied().fold(T::zero(), |s, v| s + v);
    for x in chunks {
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    acc.iter().copied().fold(tail, |s, v| s + v)
}

struct ConvGeom {
    c: usize,
    t: usize,
    h: usize,
    w: usize,
    co: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    to: usize,
    ho: usize,
    wo: usize,
    pad: usize,
    sh: usize,
    sw: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], spec: Conv3dSpec) -> Result<Self> {
        let [co, to, ho, wo] = conv3d_output_dims(input, kernel, spec)?;
        Ok(ConvGeom {
            c: input[0],
            t: input[1],
            h: input[2],
            w: input[3],
            co,
            kt: kernel[2],
            kh: kernel[3],
            kw: kernel[4],
            to,
            ho,
            wo,
            pad: spec.temporal_pad,
            sh: spec.stride.0,
            sw: spec.stride.1,
        })
    }

    /// Output frames `to` whose source frame `to + kt - pad` is inside the clip.
    fn valid_frames(&self, kt: usize) -> std::ops::Range<usize> {
        let lo = self.pad.saturating_sub(kt);
        let hi = (self.t + self.pad).saturating_sub(kt).min(self.to);
        lo..hi.max(lo)
    }
}

/// Output positions per block, sized so a block of the column matrix and
/// the matching output rows stay in cache.
const CONV_BLOCK: usize = 512;

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c * self.kt * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.to * self.ho * self.wo
    }

    /// Visits every (patch row, output position range) pair with the input
    /// offset of each element: `f(k, p0, src_row_start, count)` for runs of
    /// `wo` consecutive outputs taken from one input row with stride `sw`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let mut k = 0;
        for i in 0..self.c {
            for kt in 0..self.kt {
                for kh in 0..self.kh {
                    for kw in 0..self.kw {
                        for to in self.valid_frames(kt) {
                            let ti = to + kt - self.pad;
                            for ho in 0..self.ho {
                                let src = ((i * self.t + ti) * self.h + ho * self.sh + kh) * self.w + kw;
                                f(k, (to * self.ho + ho) * self.wo, src);
                            }
                        }
                        k += 1;
                    }
                }
            }
        }
    }

    /// Column matrix `[patch_len, positions]`; padded frames stay zero.
    fn im2col<T: Element>(&self, input: &[T]) -> Vec<T> {
        let p = self.positions();
        let mut col = vec![T::zero(); self.patch_len() * p];
        let (wo, sw) = (self.wo, self.sw);
        self.for_each_run(|k, dst, src| {
            let out = &mut col[k * p + dst..][..wo];
            if sw == 1 {
                out.copy_from_slice(&input[src..src + wo]);
            } else {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = input[src + j * sw];
                }
            }
        });
        col
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters column gradients back onto
    /// the input.
    fn col2im<T: Element>(&self, col: &[T], input_len: usize) -> Vec<T> {
        let p = self.positions();
        let mut grad = vec![T::zero(); input_len];
        let (wo, sw) = (self.wo, self.sw);
        self.for_each_run(|k, dst, src| {
            let from = &col[k * p + dst..][..wo];
            if sw == 1 {
                for (g, &c) in grad[src..src + wo].iter_mut().zip(from) {
                    *g += c;
                }
            } else {
                for (j, &c) in from.iter().enumerate() {
                    grad[src + j * sw] += c;
                }
            }
        });
        grad
    }
}

/// 3D cross-correlation via a column matrix: every output channel is a
/// weighted sum of long contiguous column rows.
pub fn conv3d_forward<T: Element>(
    input: &[T],
    input_dims: &[usize],
    kernel: &[T],
    kernel_dims: &[usize],
    bias: &[T],
    spec: Conv3dSpec,
) -> Result<(Vec<T>, [usize; 4])> {
    let g = ConvGeom::new(input_dims, kernel_dims, spec)?;
    if bias.len() != g.co {
        return Err(TensorError::shape("conv3d", format!("bias has {} entries, need {}", bias.len(), g.co)));
    }
    let (kn, p) = (g.patch_len(), g.positions());
    let col = g.im2col(input);
    let mut out = vec![T::zero(); g.co * p];
    for p0 in (0..p).step_by(CONV_BLOCK) {
        let len = CONV_BLOCK.min(p - p0);
        for (o, weights) in kernel.chunks_exact(kn).enumerate() {
            let out_row = &mut out[o * p + p0..][..len];
            out_row.fill(bias[o]);
            for (k, &wgt) in weights.iter().enumerate() {
                axpy(wgt, &col[k * p + p0..][..len], out_row);
            }
        }
    }
    Ok((out, [g.co, g.to, g.ho, g.wo]))
}

/// Gradients of a 3D convolution. `grad_input` is only computed when asked
/// for, which skips the most expensive pass for leaf inputs such as clips.
pub fn conv3d_backward<T: Element>(
    input: &[T],
    input_dims: &[usize],
    kernel: &[T],
    kernel_dims: &[usize],
    spec: Conv3dSpec,
    grad_out: &[T],
    want_input: bool,
) -> Result<(Option<Vec<T>>, Vec<T>, Vec<T>)> {
    let g = ConvGeom::new(input_dims, kernel_dims, spec)?;
    let (kn, p) = (g.patch_len(), g.positions());
    let col = g.im2col(input);
    let grad_b: Vec<T> = grad_out.chunks_exact(p).map(sum).collect();
    let mut grad_k = vec![T::zero(); kernel.len()];
    for (o, gk) in grad_k.chunks_exact_mut(kn).enumerate() {
        let gout = &grad_out[o * p..][..p];
        for (k, gk) in gk.iter_mut().enumerate() {
            *gk = dot(gout, &col[k * p..][..p]);
        }
    }
    let grad_in = want_input.then(|| {
        let mut gcol = col;
        gcol.fill(T::zero());
        for p0 in (0..p).step_by(CONV_BLOCK) {
            let len = CONV_BLOCK.min(p - p0);
            for (o, weights) in kernel.chunks_exact(kn).enumerate() {
                let gout = &grad_out[o * p + p0..][..len];
                for (k, &wgt) in weights.iter().enumerate() {
                    axpy(wgt, gout, &mut gcol[k * p + p0..][..len]);
                }
            }
        }
        g.col2im(&gcol, input.len())
    });
    Ok((grad_in, grad_k, grad_b))
}

/// Sentinel argmax for windows whose maximum is a zero pad cell.
pub const PAD_ARGMAX: usize = usize::MAX;

/// 2x2x2 stride-2 max pooling. Returns the pooled values and, for every
/// output cell, the flat input index of the winning cell (first maximum in
/// ascending `(t, h, w)` scan order; [`PAD_ARGMAX`] if a pad cell won).
pub fn maxpool3d_forward<T: Element>(
    input: &[T],
    input_dims: &[usize],
    rounding: [Rounding; 3],
) -> Result<(Vec<T>, Vec<usize>, [usize; 4])> {
    let out_dims = maxpool3d_output_dims(input_dims, rounding)?;
    let [c, t, h, w] = [input_dims[0], input_dims[1], input_dims[2], input_dims[3]];
    let [_, to, ho, wo] = out_dims;
    let n = c * to * ho * wo;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for ch in 0..c {
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = PAD_ARGMAX;
                    for dt in 0..2 {
                        for dh in 0..2 {
                            for dw in 0..2 {
                                let (it, ih, iw) = (2 * ot + dt, 2 * oh + dh, 2 * ow + dw);
                                let (v, idx) = if it < t && ih < h && iw < w {
                                    let idx = ((ch * t + it) * h + ih) * w + iw;
                                    (input[idx], idx)
                                } else {
                                    (T::zero(), PAD_ARGMAX)
                                };
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx);
                }
            }
        }
    }
    Ok((out, arg, out_dims))
}

pub fn maxpool3d_backward<T: Element>(input_len: usize, argmax: &[usize], grad_out: &[T]) -> Vec<T> {
    let mut grad = vec![T::zero(); input_len];
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        if idx != PAD_ARGMAX {
            grad[idx] += g;
        }
    }
    grad
}

/// `weight[m, n] · x[n] + bias[m]`.
pub fn linear_forward<T: Element>(x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let n = x.len();
    weight
        .chunks_exact(n)
        .zip(bias)
        .map(|(row, &b)| b + dot(row, x))
        .collect()
}

/// Returns `(grad_x, grad_weight)`; the bias gradient equals `grad_out`.
pub fn linear_backward<T: Element>(x: &[T], weight: &[T], grad_out: &[T], want_x: bool) -> (Option<Vec<T>>, Vec<T>) {
    let n = x.len();
    let mut gw = vec![T::zero(); weight.len()];
    for (row, &g) in gw.chunks_exact_mut(n).zip(grad_out) {
        axpy(g, x, row);
    }
    let gx = want_x.then(|| {
        let mut gx = vec![T::zero(); n];
        for (row, &g) in weight.chunks_exact(n).zip(grad_out) {
            axpy(g, row, &mut gx);
        }
        gx
    });
    (gx, gw)
}

/// `a[m, k] · b[k, n]`.
pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            axpy(av, &b[p * n..(p + 1) * n], out_row);
        }
    }
    out
}

/// Transpose of a row-major `[m, n]` matrix.
pub fn transpose<T: Element>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
