//! Raw forward/backward kernels over NCHW buffers.

use super::{gemm, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }
}

/// Valid output range `[lo, hi)` for a kernel offset `d` along an axis of
/// length `len`.
fn valid_range(d: isize, len: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

/// Unfold one sample `[c_in, h, w]` into `[c_in * kh * kw, h * w]` with
/// "same" zero padding.
///
/// Row `r` of the result starts at `cols[r * stride]`.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T], stride: usize) {
    let (h, w) = (g.h, g.w);
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let hw = g.hw();
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..g.kh as isize {
            let dy = ky - ph;
            let (y_lo, y_hi) = valid_range(dy, h);
            for kx in 0..g.kw as isize {
                let dx = kx - pw;
                let (x_lo, x_hi) = valid_range(dx, w);
                let dst = &mut cols[row * stride..row * stride + hw];
                if x_lo > 0 || x_hi < w || y_lo > 0 || y_hi < h {
                    dst.fill(T::zero());
                }
                for oy in y_lo..y_hi {
                    let iy = (oy as isize + dy) as usize;
                    let ix = (x_lo as isize + dx) as usize;
                    dst[oy * w + x_lo..oy * w + x_hi]
                        .copy_from_slice(&plane[iy * w + ix..iy * w + ix + (x_hi - x_lo)]);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[c_in, h, w]`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T], stride: usize) {
    let (h, w) = (g.h, g.w);
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let hw = g.hw();
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..g.kh as isize {
            let dy = ky - ph;
            let (y_lo, y_hi) = valid_range(dy, h);
            for kx in 0..g.kw as isize {
                let dx = kx - pw;
                let (x_lo, x_hi) = valid_range(dx, w);
                let src = &cols[row * stride..row * stride + hw];
                for oy in y_lo..y_hi {
                    let iy = (oy as isize + dy) as usize;
                    let ix = (x_lo as isize + dx) as usize;
                    let d = &mut plane[iy * w + ix..iy * w + ix + (x_hi - x_lo)];
                    for (d, &v) in d.iter_mut().zip(&src[oy * w + x_lo..oy * w + x_hi]) {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Columns per gemm call; keeps the unfolded operand cache resident.
const GEMM_COLS: usize = 1024;

/// Samples `[s0, s1)` of `[n, c, hw]` as a `[c, (s1 - s0) * hw]` matrix.
fn to_channel_major<T: Real>(x: &[T], c: usize, hw: usize, s0: usize, s1: usize) -> Vec<T> {
    let m = s1 - s0;
    let mut out = vec![T::zero(); c * m * hw];
    for s in s0..s1 {
        for ch in 0..c {
            let d = (ch * m + s - s0) * hw;
            out[d..d + hw].copy_from_slice(&x[(s * c + ch) * hw..(s * c + ch + 1) * hw]);
        }
    }
    out
}

/// Columns for samples `[s0, s1)`, `[c_in * kh * kw, (s1 - s0) * hw]`.
fn group_cols<T: Real>(x: &[T], g: &ConvGeom, s0: usize, s1: usize, cols: &mut Vec<T>) {
    let hw = g.hw();
    if g.is_pointwise() {
        *cols = to_channel_major(x, g.c_in, hw, s0, s1);
        return;
    }
    let stride = (s1 - s0) * hw;
    cols.resize(g.cols_rows() * stride, T::zero());
    for s in s0..s1 {
        let xs = &x[s * g.c_in * hw..(s + 1) * g.c_in * hw];
        im2col(xs, g, &mut cols[(s - s0) * hw..], stride);
    }
}

fn groups(g: &ConvGeom) -> impl Iterator<Item = (usize, usize)> {
    let per = (GEMM_COLS / g.hw()).max(1);
    let n = g.n;
    (0..n).step_by(per).map(move |s0| (s0, (s0 + per).min(n)))
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], k: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.hw();
    let mut out = vec![T::zero(); g.n * g.c_out * hw];
    let mut cols = Vec::new();
    let mut tmp = Vec::new();
    for (s0, s1) in groups(g) {
        let mhw = (s1 - s0) * hw;
        group_cols(x, g, s0, s1, &mut cols);
        tmp.resize(g.c_out * mhw, T::zero());
        gemm(g.c_out, g.cols_rows(), mhw, k, false, &cols, false, &mut tmp, false);
        for o in 0..g.c_out {
            for s in s0..s1 {
                let src = o * mhw + (s - s0) * hw;
                out[(s * g.c_out + o) * hw..(s * g.c_out + o + 1) * hw]
                    .copy_from_slice(&tmp[src..src + hw]);
            }
        }
    }
    out
}

/// Accumulates cotangents of a convolution into `gx` and/or `gk`.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    k: &[T],
    gout: &[T],
    g: &ConvGeom,
    mut gx: Option<&mut [T]>,
    mut gk: Option<&mut [T]>,
) {
    let hw = g.hw();
    let rows = g.cols_rows();
    let mut cols = Vec::new();
    for (s0, s1) in groups(g) {
        let mhw = (s1 - s0) * hw;
        let gmat = to_channel_major(gout, g.c_out, hw, s0, s1);
        if let Some(gk) = gk.as_deref_mut() {
            group_cols(x, g, s0, s1, &mut cols);
            gemm(g.c_out, mhw, rows, &gmat, false, &cols, true, gk, true);
        }
        if let Some(gx) = gx.as_deref_mut() {
            cols.resize(rows * mhw, T::zero());
            gemm(rows, g.c_out, mhw, k, true, &gmat, false, &mut cols, false);
            for s in s0..s1 {
                let gxs = &mut gx[s * g.c_in * hw..(s + 1) * g.c_in * hw];
                let off = (s - s0) * hw;
                if g.is_pointwise() {
                    for c in 0..g.c_in {
                        let src = &cols[c * mhw + off..c * mhw + off + hw];
                        for (d, &v) in gxs[c * hw..(c + 1) * hw].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                } else {
                    col2im(&cols[off..], g, gxs, mhw);
                }
            }
        }
    }
}

pub(crate) fn avg_pool_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, s: usize) -> Vec<T> {
    let (oh, ow) = (h / s, w / s);
    let inv = T::from_f64(1.0 / (s * s) as f64);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            let oy = y / s;
            for xx in 0..w {
                dst[oy * ow + xx / s] += src[y * w + xx];
            }
        }
        for v in dst.iter_mut() {
            *v *= inv;
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Real>(gout: &[T], gx: &mut [T], planes: usize, h: usize, w: usize, s: usize) {
    let (oh, ow) = (h / s, w / s);
    let inv = T::from_f64(1.0 / (s * s) as f64);
    for p in 0..planes {
        let src = &gout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] += src[(y / s) * ow + xx / s] * inv;
            }
        }
    }
}

pub(crate) fn upsample_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, s: usize) -> Vec<T> {
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / s) * w + xx / s];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Real>(gout: &[T], gx: &mut [T], planes: usize, h: usize, w: usize, s: usize) {
    let (oh, ow) = (h * s, w * s);
    for p in 0..planes {
        let src = &gout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / s) * w + xx / s] += src[y * ow + xx];
            }
        }
    }
}

/// Per plane `out = left * x * right` with `left: [oh, h]`, `right: [w, ow]`.
pub(crate) fn sandwich_forward<T: Real>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    left: &[T],
    right: &[T],
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut tmp = vec![T::zero(); oh * w];
    for p in 0..planes {
        let xs = &x[p * h * w..(p + 1) * h * w];
        gemm(oh, h, w, left, false, xs, false, &mut tmp, false);
        gemm(oh, w, ow, &tmp, false, right, false, &mut out[p * oh * ow..(p + 1) * oh * ow], false);
    }
    out
}

/// Adjoint of [`sandwich_forward`]: `gx += leftᵀ * gout * rightᵀ`.
pub(crate) fn sandwich_backward<T: Real>(
    gout: &[T],
    gx: &mut [T],
    planes: usize,
    (h, w): (usize, usize),
    left: &[T],
    right: &[T],
    (oh, ow): (usize, usize),
) {
    let mut tmp = vec![T::zero(); h * ow];
    for p in 0..planes {
        let gs = &gout[p * oh * ow..(p + 1) * oh * ow];
        gemm(h, oh, ow, left, true, gs, false, &mut tmp, false);
        gemm(h, ow, w, &tmp, false, right, true, &mut gx[p * h * w..(p + 1) * h * w], true);
    }
}
