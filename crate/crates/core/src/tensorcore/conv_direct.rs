//! Convolution without column unfolding.
//!
//! A stride-`s` convolution is rewritten as a stride-1 correlation: the
//! padded input is split into its `s x s` phases, which become extra input
//! channels, and the kernel is split the same way into `ceil(k / s)`-wide
//! taps. The correlation accumulates register tiles of several output
//! channels by a run of output columns. The input gradient is the
//! correlation of the output gradient with the flipped, transposed kernel;
//! the kernel gradient vectorizes over output channels.
//!
//! Every sum runs in a fixed order with fused multiply-adds, so results do not
//! depend on which instruction set the dispatcher picks.

use super::kernels::ConvGeom;
use super::tensor::Scalar;

const LANES: usize = 8;

/// Planes laid out for a stride-1 valid correlation.
struct Planes<T> {
    data: Vec<T>,
    c: usize,
    hp: usize,
    wp: usize,
}

/// Correlation-ready form of one image and of the kernel.
struct Phased {
    s: usize,
    /// Kernel extent after phase splitting.
    k: usize,
    c: usize,
    hp: usize,
    wp: usize,
}

impl Phased {
    fn new(g: &ConvGeom) -> Self {
        let s = g.stride;
        let k = g.k.div_ceil(s);
        Self {
            s,
            k,
            c: g.c_in * s * s,
            hp: g.ho + k - 1,
            wp: g.wo + k - 1,
        }
    }

    /// Phase plane `(c, ry, rx)` at `(i, j)` holds padded pixel `(s*i + ry, s*j + rx)`.
    fn image<T: Scalar>(&self, img: &[T], g: &ConvGeom) -> Planes<T> {
        let s = self.s;
        let mut data = vec![T::zero(); self.c * self.hp * self.wp];
        for ci in 0..g.c_in {
            for ry in 0..s {
                for rx in 0..s {
                    let dst = &mut data[((ci * s + ry) * s + rx) * self.hp * self.wp..][..self.hp * self.wp];
                    for i in 0..self.hp {
                        let Some(y) = (s * i + ry).checked_sub(g.pad).filter(|&y| y < g.h) else {
                            continue;
                        };
                        let src = &img[(ci * g.h + y) * g.w..][..g.w];
                        let row = &mut dst[i * self.wp..][..self.wp];
                        if s == 1 {
                            let j0 = g.pad.saturating_sub(rx);
                            let x0 = (j0 + rx).saturating_sub(g.pad);
                            let n = (self.wp - j0).min(g.w - x0.min(g.w));
                            row[j0..j0 + n].copy_from_slice(&src[x0..x0 + n]);
                        } else {
                            for (j, v) in row.iter_mut().enumerate() {
                                if let Some(x) = (s * j + rx).checked_sub(g.pad).filter(|&x| x < g.w) {
                                    *v = src[x];
                                }
                            }
                        }
                    }
                }
            }
        }
        Planes {
            data,
            c: self.c,
            hp: self.hp,
            wp: self.wp,
        }
    }

    /// `C_out x C' x k' x k'` kernel; taps past the original extent are zero.
    fn kernel<T: Scalar>(&self, kernel: &[T], g: &ConvGeom, c_out: usize) -> Vec<T> {
        let (s, k) = (self.s, self.k);
        if s == 1 {
            return kernel.to_vec();
        }
        let mut out = vec![T::zero(); c_out * self.c * k * k];
        for co in 0..c_out {
            for ci in 0..g.c_in {
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let c = (ci * s + ky % s) * s + kx % s;
                        out[((co * self.c + c) * k + ky / s) * k + kx / s] =
                            kernel[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    }
                }
            }
        }
        out
    }

    /// Folds a phase-kernel gradient back onto the original taps.
    fn unkernel<T: Scalar>(&self, gk: &[T], g: &ConvGeom, c_out: usize, out: &mut [T]) {
        let (s, k) = (self.s, self.k);
        for co in 0..c_out {
            for ci in 0..g.c_in {
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let c = (ci * s + ky % s) * s + kx % s;
                        out[((co * g.c_in + ci) * g.k + ky) * g.k + kx] = gk[((co * self.c + c) * k + ky / s) * k + kx / s];
                    }
                }
            }
        }
    }

    /// Scatters a gradient over the phase planes back onto image pixels.
    fn unimage<T: Scalar>(&self, gp: &[T], g: &ConvGeom, out: &mut [T]) {
        let s = self.s;
        for ci in 0..g.c_in {
            for y in 0..g.h {
                let (i, ry) = ((y + g.pad) / s, (y + g.pad) % s);
                for x in 0..g.w {
                    let (j, rx) = ((x + g.pad) / s, (x + g.pad) % s);
                    out[(ci * g.h + y) * g.w + x] = if i < self.hp && j < self.wp {
                        gp[(((ci * s + ry) * s + rx) * self.hp + i) * self.wp + j]
                    } else {
                        T::zero()
                    };
                }
            }
        }
    }
}

fn pad_planes<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, pad: usize) -> Planes<T> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut data = vec![T::zero(); c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let src = &img[(ch * h + y) * w..][..w];
            data[(ch * hp + y + pad) * wp + pad..][..w].copy_from_slice(src);
        }
    }
    Planes { data, c, hp, wp }
}

/// Kernel regrouped as `[block][tap][CB]`, zero past the last output channel,
/// so a tile reads the weights of all its channels with one load per tap.
fn pack_kernel<T: Scalar, const CB: usize>(kernel: &[T], c_out: usize, taps: usize) -> Vec<[T; CB]> {
    let blocks = c_out.div_ceil(CB);
    let mut out = vec![[T::zero(); CB]; blocks * taps];
    for co in 0..c_out {
        for t in 0..taps {
            out[(co / CB) * taps + t][co % CB] = kernel[co * taps + t];
        }
    }
    out
}

/// Accumulates one `CB x TW` output tile starting at column `x0` of row `oy`.
#[inline(always)]
fn fwd_tile<T: Scalar, const CB: usize, const TW: usize, const K: usize>(
    xp: &Planes<T>,
    wblock: &[[T; CB]],
    oy: usize,
    x0: usize,
    k: usize,
) -> [[T; TW]; CB] {
    let k = if K > 0 { K } else { k };
    let mut acc = [[T::zero(); TW]; CB];
    for ci in 0..xp.c {
        for ky in 0..k {
            let row = &xp.data[(ci * xp.hp + oy + ky) * xp.wp + x0..][..TW + k - 1];
            let w = &wblock[(ci * k + ky) * k..][..k];
            for kx in 0..k {
                let src: &[T; TW] = row[kx..kx + TW].try_into().expect("tile width");
                for (b, a) in acc.iter_mut().enumerate() {
                    let wv = w[kx][b];
                    for l in 0..TW {
                        a[l] = wv.mul_add(src[l], a[l]);
                    }
                }
            }
        }
    }
    acc
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn fwd_store<T: Scalar, const CB: usize, const TW: usize, const K: usize>(
    xp: &Planes<T>,
    wblock: &[[T; CB]],
    k: usize,
    co0: usize,
    oy: usize,
    x0: usize,
    bias: &[T],
    out: &mut [T],
    wo: usize,
) {
    let acc = fwd_tile::<T, CB, TW, K>(xp, wblock, oy, x0, k);
    let plane = out.len() / bias.len();
    for (b, a) in acc.iter().enumerate().take(bias.len() - co0) {
        let dst = &mut out[(co0 + b) * plane + oy * wo + x0..][..TW];
        for l in 0..TW {
            dst[l] = a[l] + bias[co0 + b];
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn fwd_row<T: Scalar, const CB: usize, const K: usize>(
    xp: &Planes<T>,
    wblock: &[[T; CB]],
    k: usize,
    co0: usize,
    oy: usize,
    bias: &[T],
    out: &mut [T],
    wo: usize,
) {
    let mut x0 = 0;
    while x0 + 16 <= wo {
        fwd_store::<T, CB, 16, K>(xp, wblock, k, co0, oy, x0, bias, out, wo);
        x0 += 16;
    }
    if x0 + 8 <= wo {
        fwd_store::<T, CB, 8, K>(xp, wblock, k, co0, oy, x0, bias, out, wo);
        x0 += 8;
    }
    if x0 + 4 <= wo {
        fwd_store::<T, CB, 4, K>(xp, wblock, k, co0, oy, x0, bias, out, wo);
        x0 += 4;
    }
    if x0 + 2 <= wo {
        fwd_store::<T, CB, 2, K>(xp, wblock, k, co0, oy, x0, bias, out, wo);
        x0 += 2;
    }
    if x0 < wo {
        fwd_store::<T, CB, 1, K>(xp, wblock, k, co0, oy, x0, bias, out, wo);
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn correlate_k<T: Scalar, const CB: usize, const K: usize>(
    xp: &Planes<T>,
    packed: &[[T; CB]],
    bias: &[T],
    k: usize,
    ho: usize,
    wo: usize,
    out: &mut [T],
) {
    let taps = xp.c * k * k;
    for (blk, wblock) in packed.chunks(taps).enumerate() {
        for oy in 0..ho {
            fwd_row::<T, CB, K>(xp, wblock, k, blk * CB, oy, bias, out, wo);
        }
    }
}

/// Stride-1 valid correlation; `out` is `C_out x ho x wo`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn correlate<T: Scalar, const CB: usize>(
    xp: &Planes<T>,
    kernel: &[T],
    bias: &[T],
    k: usize,
    ho: usize,
    wo: usize,
    out: &mut [T],
) {
    let packed = pack_kernel::<T, CB>(kernel, bias.len(), xp.c * k * k);
    match k {
        2 => correlate_k::<T, CB, 2>(xp, &packed, bias, k, ho, wo, out),
        3 => correlate_k::<T, CB, 3>(xp, &packed, bias, k, ho, wo, out),
        5 => correlate_k::<T, CB, 5>(xp, &packed, bias, k, ho, wo, out),
        9 => correlate_k::<T, CB, 9>(xp, &packed, bias, k, ho, wo, out),
        _ => correlate_k::<T, CB, 0>(xp, &packed, bias, k, ho, wo, out),
    }
}

#[inline(always)]
fn forward_impl<T: Scalar, const CB: usize>(img: &[T], kernel: &[T], bias: &[T], g: &ConvGeom, out: &mut [T]) {
    let ph = Phased::new(g);
    let xp = ph.image(img, g);
    let kernel = ph.kernel(kernel, g, bias.len());
    correlate::<T, CB>(&xp, &kernel, bias, ph.k, g.ho, g.wo, out);
}

/// Kernel gradient for taps `(block, ci, ky, 0..K)`.
///
/// `gb` holds the output gradient of one block of `LANES` output channels as
/// one lane vector per pixel. Rows are spread over `R` accumulator sets,
/// summed in order at the end.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn kernel_grad_taps<T: Scalar, const K: usize, const R: usize>(
    xp: &Planes<T>,
    gb: &[[T; LANES]],
    ci: usize,
    ky: usize,
    ho: usize,
    wo: usize,
) -> [[T; LANES]; K] {
    let mut acc = [[[T::zero(); LANES]; K]; R];
    for oy0 in (0..ho).step_by(R) {
        for (r, a) in acc.iter_mut().enumerate() {
            let oy = oy0 + r;
            if oy >= ho {
                break;
            }
            let xrow = &xp.data[(ci * xp.hp + oy + ky) * xp.wp..][..wo + K - 1];
            let grow = &gb[oy * wo..][..wo];
            for (ox, gv) in grow.iter().enumerate() {
                let xs: &[T; K] = xrow[ox..ox + K].try_into().expect("taps");
                for kx in 0..K {
                    for l in 0..LANES {
                        a[kx][l] = gv[l].mul_add(xs[kx], a[kx][l]);
                    }
                }
            }
        }
    }
    let mut out = acc[0];
    for a in &acc[1..] {
        for kx in 0..K {
            for l in 0..LANES {
                out[kx][l] = out[kx][l] + a[kx][l];
            }
        }
    }
    out
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn kernel_grad_taps_dyn<T: Scalar>(
    xp: &Planes<T>,
    gb: &[[T; LANES]],
    ci: usize,
    ky: usize,
    k: usize,
    ho: usize,
    wo: usize,
) -> Vec<[T; LANES]> {
    let mut acc = vec![[T::zero(); LANES]; k];
    for oy in 0..ho {
        let xrow = &xp.data[(ci * xp.hp + oy + ky) * xp.wp..][..wo + k - 1];
        for (ox, gv) in gb[oy * wo..][..wo].iter().enumerate() {
            for (kx, a) in acc.iter_mut().enumerate() {
                for l in 0..LANES {
                    a[l] = gv[l].mul_add(xrow[ox + kx], a[l]);
                }
            }
        }
    }
    acc
}

/// Gradient of a stride-1 valid correlation with respect to its kernel.
#[inline(always)]
fn kernel_grad<T: Scalar>(xp: &Planes<T>, gout: &[T], k: usize, c_out: usize, ho: usize, wo: usize) -> Vec<T> {
    let p = ho * wo;
    let blocks = c_out.div_ceil(LANES);
    let mut gt = vec![[T::zero(); LANES]; blocks * p];
    for co in 0..c_out {
        let dst = &mut gt[(co / LANES) * p..][..p];
        for (d, &v) in dst.iter_mut().zip(&gout[co * p..(co + 1) * p]) {
            d[co % LANES] = v;
        }
    }
    let mut gk = vec![T::zero(); c_out * xp.c * k * k];
    for (blk, gb) in gt.chunks(p).enumerate() {
        let co0 = blk * LANES;
        let mut store = |ci: usize, ky: usize, kx: usize, lanes: &[T; LANES]| {
            for (l, &v) in lanes.iter().enumerate().take(c_out - co0) {
                gk[(((co0 + l) * xp.c + ci) * k + ky) * k + kx] = v;
            }
        };
        for ci in 0..xp.c {
            for ky in 0..k {
                macro_rules! taps {
                    ($k:literal, $r:literal) => {
                        kernel_grad_taps::<T, $k, $r>(xp, gb, ci, ky, ho, wo)
                            .iter()
                            .enumerate()
                            .for_each(|(kx, a)| store(ci, ky, kx, a))
                    };
                }
                match k {
                    2 => taps!(2, 1),
                    3 => taps!(3, 1),
                    5 => taps!(5, 1),
                    9 => taps!(9, 1),
                    _ => kernel_grad_taps_dyn(xp, gb, ci, ky, k, ho, wo)
                        .iter()
                        .enumerate()
                        .for_each(|(kx, a)| store(ci, ky, kx, a)),
                }
            }
        }
    }
    gk
}

/// `kernel` flipped spatially with input and output channels swapped.
fn flip_transpose<T: Scalar>(kernel: &[T], c_out: usize, c_in: usize, k: usize) -> Vec<T> {
    let kk = k * k;
    let mut flipped = vec![T::zero(); kernel.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            for t in 0..kk {
                flipped[(ci * c_out + co) * kk + (kk - 1 - t)] = kernel[(co * c_in + ci) * kk + t];
            }
        }
    }
    flipped
}

#[inline(always)]
fn backward_impl<T: Scalar, const CB: usize>(
    img: &[T],
    kernel: &[T],
    gout: &[T],
    g: &ConvGeom,
    c_out: usize,
    gk: &mut [T],
    gx: Option<&mut [T]>,
) {
    let ph = Phased::new(g);
    let xp = ph.image(img, g);
    let gk_phased = kernel_grad(&xp, gout, ph.k, c_out, g.ho, g.wo);
    if ph.s == 1 {
        gk.copy_from_slice(&gk_phased);
    } else {
        ph.unkernel(&gk_phased, g, c_out, gk);
    }
    drop(xp);

    let Some(gx) = gx else { return };
    let flipped = flip_transpose(&ph.kernel(kernel, g, c_out), c_out, ph.c, ph.k);
    let zero_bias = vec![T::zero(); ph.c];
    if ph.s == 1 && g.pad < g.k {
        // Only the unpadded window of the input gradient is needed.
        let back_pad = g.k - 1 - g.pad;
        let gp = pad_planes(gout, c_out, g.ho, g.wo, back_pad);
        correlate::<T, CB>(&gp, &flipped, &zero_bias, g.k, g.h, g.w, gx);
        return;
    }
    let gp = pad_planes(gout, c_out, g.ho, g.wo, ph.k - 1);
    let mut full = vec![T::zero(); ph.c * ph.hp * ph.wp];
    correlate::<T, CB>(&gp, &flipped, &zero_bias, ph.k, ph.hp, ph.wp, &mut full);
    ph.unimage(&full, g, gx);
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::*;

    #[target_feature(enable = "avx2,fma,avx512f")]
    pub(super) unsafe fn forward_512<T: Scalar>(img: &[T], kernel: &[T], bias: &[T], g: &ConvGeom, out: &mut [T]) {
        forward_impl::<T, 4>(img, kernel, bias, g, out)
    }

    #[target_feature(enable = "avx2,fma,avx512f")]
    pub(super) unsafe fn backward_512<T: Scalar>(
        img: &[T],
        kernel: &[T],
        gout: &[T],
        g: &ConvGeom,
        c_out: usize,
        gk: &mut [T],
        gx: Option<&mut [T]>,
    ) {
        backward_impl::<T, 4>(img, kernel, gout, g, c_out, gk, gx)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn forward_256<T: Scalar>(img: &[T], kernel: &[T], bias: &[T], g: &ConvGeom, out: &mut [T]) {
        forward_impl::<T, 4>(img, kernel, bias, g, out)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn backward_256<T: Scalar>(
        img: &[T],
        kernel: &[T],
        gout: &[T],
        g: &ConvGeom,
        c_out: usize,
        gk: &mut [T],
        gx: Option<&mut [T]>,
    ) {
        backward_impl::<T, 4>(img, kernel, gout, g, c_out, gk, gx)
    }

    #[derive(Clone, Copy, PartialEq, Eq)]
    pub(super) enum Level {
        Avx512,
        Avx2,
        Baseline,
    }

    pub(super) fn level() -> Level {
        if is_x86_feature_detected!("avx512f") && is_x86_feature_detected!("fma") {
            Level::Avx512
        } else if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            Level::Avx2
        } else {
            Level::Baseline
        }
    }
}

/// One image: writes `C_out x Ho x Wo` into `out`.
pub(super) fn forward<T: Scalar>(img: &[T], kernel: &[T], bias: &[T], g: &ConvGeom, out: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    // SAFETY: each branch runs only when its CPU features were detected.
    unsafe {
        match x86::level() {
            x86::Level::Avx512 => return x86::forward_512(img, kernel, bias, g, out),
            x86::Level::Avx2 => return x86::forward_256(img, kernel, bias, g, out),
            x86::Level::Baseline => {}
        }
    }
    forward_impl::<T, 4>(img, kernel, bias, g, out)
}

/// One image: kernel gradient into `gk`, input gradient into `gx` when given.
pub(super) fn backward<T: Scalar>(
    img: &[T],
    kernel: &[T],
    gout: &[T],
    g: &ConvGeom,
    c_out: usize,
    gk: &mut [T],
    gx: Option<&mut [T]>,
) {
    #[cfg(target_arch = "x86_64")]
    // SAFETY: each branch runs only when its CPU features were detected.
    unsafe {
        match x86::level() {
            x86::Level::Avx512 => return x86::backward_512(img, kernel, gout, g, c_out, gk, gx),
            x86::Level::Avx2 => return x86::backward_256(img, kernel, gout, g, c_out, gk, gx),
            x86::Level::Baseline => {}
        }
    }
    backward_impl::<T, 4>(img, kernel, gout, g, c_out, gk, gx)
}
