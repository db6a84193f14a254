//! Forward and backward kernels on plain tensors.
//!
//! Reductions (bias gradients, normalization statistics, softmax sums, loss
//! means) accumulate in `f64`. Matrix products go through [`gemm`] in the
//! storage precision.

use crate::error::{Error, Result};
use crate::parallel;

use super::conv_direct;
use super::tensor::{gemm, Scalar, Tensor};

/// Rows per independent GEMM call when splitting a row-major product.
/// Fixed so results do not depend on the thread count.
const ROW_BLOCK: usize = 64;

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(super) struct ConvGeom {
    pub(super) c_in: usize,
    pub(super) h: usize,
    pub(super) w: usize,
    pub(super) k: usize,
    pub(super) stride: usize,
    pub(super) pad: usize,
    pub(super) ho: usize,
    pub(super) wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
    pub(super) fn pixels(&self) -> usize {
        self.ho * self.wo
    }
}

fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, ConvGeom)> {
    let (xs, ks) = (x.shape(), kernel.shape());
    if xs.len() != 4 || ks.len() != 4 || ks[2] != ks[3] || xs[1] != ks[1] {
        return Err(Error::shape("conv2d", xs, ks));
    }
    if bias.shape() != [ks[0]] {
        return Err(Error::shape("conv2d bias", ks, bias.shape()));
    }
    let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let k = ks[2];
    let ho = conv_out_extent(h, k, stride, pad).ok_or_else(|| Error::shape("conv2d", xs, ks))?;
    let wo = conv_out_extent(w, k, stride, pad).ok_or_else(|| Error::shape("conv2d", xs, ks))?;
    Ok((
        n,
        ks[0],
        ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        },
    ))
}

/// Direct cross-correlation plus bias: `N x C_in x H x W` -> `N x C_out x H' x W'`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, c_out, g) = conv_geometry(x, kernel, bias, stride, pad)?;
    let p = g.pixels();
    let img_len = g.c_in * g.h * g.w;
    let mut out = vec![T::zero(); n * c_out * p];
    parallel::for_each_chunk_mut(&mut out, c_out * p, |i, dst| {
        let img = &x.data()[i * img_len..(i + 1) * img_len];
        conv_direct::forward(img, kernel.data(), bias.data(), &g, dst);
    });
    Tensor::new(&[n, c_out, g.ho, g.wo], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let (n, c_out, g) = conv_geometry(x, kernel, bias, stride, pad)?;
    let p = g.pixels();
    let kp = g.patch();
    let img_len = g.c_in * g.h * g.w;
    if grad_out.shape() != [n, c_out, g.ho, g.wo] {
        return Err(Error::shape("conv2d backward", grad_out.shape(), &[n, c_out, g.ho, g.wo]));
    }
    let go = grad_out.data();

    // Per-image kernel gradients and input gradients; summed in image order.
    let per_image: Vec<(Vec<T>, Option<Vec<T>>)> = parallel::map_indexed(n, |i| {
        let mut gk = vec![T::zero(); c_out * kp];
        let mut gx = need_input.then(|| vec![T::zero(); img_len]);
        conv_direct::backward(
            &x.data()[i * img_len..(i + 1) * img_len],
            kernel.data(),
            &go[i * c_out * p..(i + 1) * c_out * p],
            &g,
            c_out,
            &mut gk,
            gx.as_deref_mut(),
        );
        (gk, gx)
    });

    let mut gk = vec![T::zero(); c_out * kp];
    let mut gx = need_input.then(|| Vec::with_capacity(n * img_len));
    for (k_part, x_part) in per_image {
        gk.iter_mut().zip(k_part).for_each(|(a, b)| *a = *a + b);
        if let (Some(acc), Some(part)) = (gx.as_mut(), x_part) {
            acc.extend(part);
        }
    }
    let mut gb = vec![0.0f64; c_out];
    for i in 0..n {
        for (co, acc) in gb.iter_mut().enumerate() {
            let start = (i * c_out + co) * p;
            *acc += go[start..start + p].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    Ok(ConvGrads {
        input: gx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        kernel: Tensor::new(kernel.shape(), gk)?,
        bias: Tensor::new(&[c_out], gb.into_iter().map(T::from_f64_lossy).collect())?,
    })
}

/// 2x2 max-pool with stride 2. Returns the pooled tensor and, per output
/// element, the flat input index of the first maximum in row-major order.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
        return Err(Error::shape("maxpool2d", s, &[2, 2]));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    let d = x.data();
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[s[0], s[1], ho, wo], out)?, arg))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut gx = vec![T::zero(); input_shape.iter().product()];
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gx[idx] = gx[idx] + g;
    }
    Tensor::new(input_shape, gx)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), d)
}

/// Row-blocked `x * w` for `x: rows x d_in`, `w: d_in x d_out` (or its
/// transpose when `trans_w`).
fn rows_times<T: Scalar>(x: &[T], rows: usize, d_in: usize, w: &[T], d_out: usize, trans_w: bool) -> Vec<T> {
    let mut out = vec![T::zero(); rows * d_out];
    parallel::for_each_chunk_mut(&mut out, ROW_BLOCK * d_out, |blk, dst| {
        let r0 = blk * ROW_BLOCK;
        let nr = dst.len() / d_out;
        gemm(nr, d_in, d_out, &x[r0 * d_in..(r0 + nr) * d_in], false, w, trans_w, dst, false);
    });
    out
}

fn check_linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize)> {
    let ws = w.shape();
    if ws.len() != 2 || x.last_dim() != ws[0] {
        return Err(Error::shape("linear", x.shape(), ws));
    }
    if b.shape() != [ws[1]] {
        return Err(Error::shape("linear bias", ws, b.shape()));
    }
    Ok((ws[0], ws[1]))
}

/// Affine map over the last axis: `x (...xD_in) * w (D_in x D_out) + b`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (d_in, d_out) = check_linear(x, w, b)?;
    let rows = x.rows();
    let mut out = rows_times(x.data(), rows, d_in, w.data(), d_out, false);
    for row in out.chunks_mut(d_out) {
        row.iter_mut().zip(b.data()).for_each(|(v, &bb)| *v = *v + bb);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = d_out;
    Tensor::new(&shape, out)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (d_in, d_out) = check_linear(x, w, b)?;
    let rows = x.rows();
    if grad_out.numel() != rows * d_out {
        return Err(Error::shape("linear backward", grad_out.shape(), &[rows, d_out]));
    }
    let go = grad_out.data();
    let gx = rows_times(go, rows, d_out, w.data(), d_in, true);
    let mut gw = vec![T::zero(); d_in * d_out];
    gemm(d_in, rows, d_out, x.data(), true, go, false, &mut gw, false);
    let mut gb = vec![0.0f64; d_out];
    for row in go.chunks(d_out) {
        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v.as_f64());
    }
    Ok(LinearGrads {
        input: Tensor::new(x.shape(), gx)?,
        weight: Tensor::new(w.shape(), gw)?,
        bias: Tensor::new(b.shape(), gb.into_iter().map(T::from_f64_lossy).collect())?,
    })
}

/// Plain 2-D matrix product `a (m x k) * b (k x n)`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape("matmul", sa, sb));
    }
    Tensor::new(&[sa[0], sb[1]], rows_times(a.data(), sa[0], sa[1], b.data(), sb[1], false))
}

pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let ga = rows_times(grad_out.data(), m, n, b.data(), k, true);
    let mut gb = vec![T::zero(); k * n];
    gemm(k, m, n, a.data(), true, grad_out.data(), false, &mut gb, false);
    Ok((Tensor::new(a.shape(), ga)?, Tensor::new(b.shape(), gb)?))
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Saved statistics for the layer-norm backward pass.
pub struct LayerNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.last_dim();
    if gain.shape() != [d] || shift.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let mut y = Vec::with_capacity(x.numel());
    let mut xhat = Vec::with_capacity(x.numel());
    let mut inv_std = Vec::with_capacity(x.rows());
    for row in x.data().chunks(d) {
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|v| (v.as_f64() - mean).powi(2))
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        for (j, v) in row.iter().enumerate() {
            let n = (v.as_f64() - mean) * inv;
            xhat.push(T::from_f64_lossy(n));
            y.push(T::from_f64_lossy(
                n * gain.data()[j].as_f64() + shift.data()[j].as_f64(),
            ));
        }
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        LayerNormCache {
            normalized: Tensor::new(x.shape(), xhat)?,
            inv_std,
        },
    ))
}

/// Gradients `(input, gain, shift)` of layer norm.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gain: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = gain.numel();
    let mut gx = Vec::with_capacity(grad_out.numel());
    let mut gg = vec![0.0f64; d];
    let mut gs = vec![0.0f64; d];
    let rows = grad_out.data().chunks(d).zip(cache.normalized.data().chunks(d));
    for ((gy, xh), &inv) in rows.zip(&cache.inv_std) {
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for j in 0..d {
            let gh = gy[j].as_f64() * gain.data()[j].as_f64();
            mean_g += gh;
            mean_gx += gh * xh[j].as_f64();
            gg[j] += gy[j].as_f64() * xh[j].as_f64();
            gs[j] += gy[j].as_f64();
        }
        mean_g /= d as f64;
        mean_gx /= d as f64;
        for j in 0..d {
            let gh = gy[j].as_f64() * gain.data()[j].as_f64();
            gx.push(T::from_f64_lossy(inv * (gh - mean_g - xh[j].as_f64() * mean_gx)));
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect::<Vec<T>>();
    Ok((
        Tensor::new(grad_out.shape(), gx)?,
        Tensor::new(gain.shape(), cast(gg))?,
        Tensor::new(gain.shape(), cast(gs))?,
    ))
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Max-subtracted softmax over the last axis.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.last_dim();
    let mut out = Vec::with_capacity(x.numel());
    let mut buf = vec![0.0; d];
    for row in x.data().chunks(d) {
        let r: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        softmax_row(&r, &mut buf);
        out.extend(buf.iter().map(|&v| T::from_f64_lossy(v)));
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let d = y.last_dim();
    let mut gx = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks(d).zip(grad_out.data().chunks(d)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        gx.extend(
            yr.iter()
                .zip(gr)
                .map(|(a, b)| T::from_f64_lossy(a.as_f64() * (b.as_f64() - dot))),
        );
    }
    Tensor::new(y.shape(), gx).expect("same shape")
}

/// Target id excluded from the loss.
pub const IGNORE_INDEX: usize = usize::MAX;

/// Result of [`cross_entropy`]: mean loss plus what the backward pass needs.
pub struct CrossEntropy<T> {
    pub loss: f64,
    pub probs: Tensor<T>,
    pub counted: usize,
    /// Number of counted rows whose argmax equals the target.
    pub correct: usize,
}

/// Mean negative log-likelihood over rows whose target is not `ignore`.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    ignore: usize,
) -> Result<CrossEntropy<T>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::shape("cross_entropy", s, &[targets.len()]));
    }
    let v = s[1];
    let mut probs = Vec::with_capacity(logits.numel());
    let mut buf = vec![0.0; v];
    let mut total = 0.0;
    let mut counted = 0;
    let mut correct = 0;
    for (row, &t) in logits.data().chunks(v).zip(targets) {
        let r: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
        softmax_row(&r, &mut buf);
        probs.extend(buf.iter().map(|&p| T::from_f64_lossy(p)));
        if t == ignore {
            continue;
        }
        if t >= v {
            return Err(Error::Contract(format!("target {t} outside [0, {v})")));
        }
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + r.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - r[t];
        counted += 1;
        if argmax(row) == t {
            correct += 1;
        }
    }
    Ok(CrossEntropy {
        loss: if counted == 0 { 0.0 } else { total / counted as f64 },
        probs: Tensor::new(s, probs)?,
        counted,
        correct,
    })
}

pub fn cross_entropy_backward<T: Scalar>(
    ce: &CrossEntropy<T>,
    targets: &[usize],
    ignore: usize,
    upstream: f64,
) -> Tensor<T> {
    let v = ce.probs.last_dim();
    let mut g = vec![T::zero(); ce.probs.numel()];
    if ce.counted > 0 {
        let scale = upstream / ce.counted as f64;
        for (i, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            for j in 0..v {
                let p = ce.probs.data()[i * v + j].as_f64();
                let onehot = if j == t { 1.0 } else { 0.0 };
                g[i * v + j] = T::from_f64_lossy((p - onehot) * scale);
            }
        }
    }
    Tensor::new(ce.probs.shape(), g).expect("same shape")
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Score added to masked key columns before the softmax.
pub const MASKED_SCORE: f64 = -1e9;

/// Layout of a batched multi-head attention call: `batch` sequences of
/// `len` tokens each, hidden width split into `heads` slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
}

fn check_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    key_valid: &[bool],
    sh: AttentionShape,
) -> Result<usize> {
    let rows = sh.batch * sh.len;
    let d = q.last_dim();
    if q.shape() != [rows, d] || k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    if key_valid.len() != rows {
        return Err(Error::shape("attention mask", &[rows], &[key_valid.len()]));
    }
    if sh.heads == 0 || !d.is_multiple_of(sh.heads) {
        return Err(Error::shape("attention heads", &[d], &[sh.heads]));
    }
    Ok(d / sh.heads)
}

/// Attention probabilities laid out `[batch, heads, len(query), len(key)]`.
pub fn attention_probs<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    key_valid: &[bool],
    sh: AttentionShape,
) -> Result<Vec<f64>> {
    let dh = check_attention(q, k, k, key_valid, sh)?;
    let d = q.last_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let (l, h) = (sh.len, sh.heads);
    let blocks: Vec<Vec<f64>> = parallel::map_indexed(sh.batch * h, |bh| {
        let (b, head) = (bh / h, bh % h);
        let mut p = vec![0.0; l * l];
        let mut scores = vec![0.0; l];
        for i in 0..l {
            let qi = &q.data()[(b * l + i) * d + head * dh..][..dh];
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = &k.data()[(b * l + j) * d + head * dh..][..dh];
                let dot: f64 = qi.iter().zip(kj).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
                *s = dot * scale + if key_valid[b * l + j] { 0.0 } else { MASKED_SCORE };
            }
            softmax_row(&scores, &mut p[i * l..(i + 1) * l]);
        }
        p
    });
    Ok(blocks.concat())
}

/// Scaled dot-product attention for all heads; `q`, `k`, `v` are
/// `[batch*len, d_model]` and the result is the concatenated head outputs.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    key_valid: &[bool],
    sh: AttentionShape,
) -> Result<(Tensor<T>, Vec<f64>)> {
    let dh = check_attention(q, k, v, key_valid, sh)?;
    let probs = attention_probs(q, k, key_valid, sh)?;
    let d = q.last_dim();
    let (l, h) = (sh.len, sh.heads);
    let mut out = vec![T::zero(); sh.batch * l * d];
    parallel::for_each_chunk_mut(&mut out, l * d, |b, dst| {
        for head in 0..h {
            let p = &probs[(b * h + head) * l * l..][..l * l];
            for i in 0..l {
                let mut acc = vec![0.0f64; dh];
                for j in 0..l {
                    let pij = p[i * l + j];
                    let vj = &v.data()[(b * l + j) * d + head * dh..][..dh];
                    acc.iter_mut().zip(vj).for_each(|(a, x)| *a += pij * x.as_f64());
                }
                let o = &mut dst[i * d + head * dh..][..dh];
                o.iter_mut().zip(acc).for_each(|(o, a)| *o = T::from_f64_lossy(a));
            }
        }
    });
    Ok((Tensor::new(q.shape(), out)?, probs))
}

/// Gradients `(q, k, v)` of [`attention`] given its saved probabilities.
pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[f64],
    sh: AttentionShape,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = q.last_dim();
    let dh = d / sh.heads;
    let (l, h) = (sh.len, sh.heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let f = |t: &Tensor<T>, row: usize, head: usize, c: usize| t.data()[row * d + head * dh + c].as_f64();
    let per_seq: Vec<[Vec<f64>; 3]> = parallel::map_indexed(sh.batch, |b| {
        let mut gq = vec![0.0; l * d];
        let mut gk = vec![0.0; l * d];
        let mut gv = vec![0.0; l * d];
        for head in 0..h {
            let p = &probs[(b * h + head) * l * l..][..l * l];
            for i in 0..l {
                let gi = b * l + i;
                // dP_ij = dout_i . v_j ; dS = P * (dP - sum_j P dP)
                let mut dp = vec![0.0; l];
                for (j, dpj) in dp.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += f(grad_out, gi, head, c) * f(v, b * l + j, head, c);
                    }
                    *dpj = s;
                }
                let dot: f64 = (0..l).map(|j| p[i * l + j] * dp[j]).sum();
                for j in 0..l {
                    let pij = p[i * l + j];
                    let ds = pij * (dp[j] - dot) * scale;
                    for c in 0..dh {
                        gv[j * d + head * dh + c] += pij * f(grad_out, gi, head, c);
                        gq[i * d + head * dh + c] += ds * f(k, b * l + j, head, c);
                        gk[j * d + head * dh + c] += ds * f(q, gi, head, c);
                    }
                }
            }
        }
        [gq, gk, gv]
    });
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for parts in per_seq {
        for (acc, part) in out.iter_mut().zip(parts) {
            acc.extend(part.into_iter().map(T::from_f64_lossy));
        }
    }
    let [gq, gk, gv] = out;
    Ok((
        Tensor::new(q.shape(), gq)?,
        Tensor::new(q.shape(), gk)?,
        Tensor::new(q.shape(), gv)?,
    ))
}

/// Rows of `table` selected by `index`.
pub fn gather_rows<T: Scalar>(table: &Tensor<T>, index: &[usize]) -> Result<Tensor<T>> {
    let d = table.last_dim();
    let rows = table.rows();
    let mut out = Vec::with_capacity(index.len() * d);
    for &i in index {
        if i >= rows {
            return Err(Error::shape("gather_rows", table.shape(), &[i]));
        }
        out.extend_from_slice(table.row(i));
    }
    if index.is_empty() {
        return Err(Error::shape("gather_rows", table.shape(), &[0]));
    }
    Tensor::new(&[index.len(), d], out)
}

/// Scatter-add of row gradients back onto a `table_shape` tensor.
pub fn scatter_rows<T: Scalar>(table_shape: &[usize], index: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Tensor::zeros(table_shape);
    let d = g.last_dim();
    let gd = g.data_mut();
    for (r, &i) in index.iter().enumerate() {
        let src = grad_out.row(r);
        gd[i * d..(i + 1) * d]
            .iter_mut()
            .zip(src)
            .for_each(|(a, &b)| *a = *a + b);
    }
    Ok(g)
}
