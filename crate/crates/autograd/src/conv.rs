//! Direct convolution kernels (forward and adjoint) over N×C×H×W buffers.
//!
//! Inputs are padded into a scratch buffer first so the inner loops run
//! without bounds checks. Both kernels are single-threaded and accumulate in a
//! fixed order, so results are bitwise reproducible.

use crate::{Error, Result};

/// How out-of-image samples are produced for a padded convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zeros,
    /// Out-of-image samples copy the nearest edge pixel.
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub pad_mode: PadMode,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            pad_mode: PadMode::Zeros,
        }
    }
}

impl Conv2dOptions {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
            pad_mode: PadMode::Zeros,
        }
    }

    /// Stride 1 with `padding = dilation * (k - 1) / 2`, which preserves the spatial size for odd k.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(1, dilation * (kernel - 1) / 2, dilation)
    }

    pub fn with_pad_mode(mut self, pad_mode: PadMode) -> Self {
        self.pad_mode = pad_mode;
        self
    }
}

/// Resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    pub hp: usize,
    pub wp: usize,
    pub opts: Conv2dOptions,
}

impl ConvGeom {
    pub fn resolve(
        input: (usize, usize, usize, usize),
        weight: &[usize],
        opts: Conv2dOptions,
    ) -> Result<Self> {
        let (n, cin, h, w) = input;
        let [cout, wcin, k, k2] = *weight else {
            return Err(Error::Shape(format!(
                "conv weight must be 4-D, got {weight:?}"
            )));
        };
        if k != k2 {
            return Err(Error::Config(format!(
                "only square kernels are supported, got {k}×{k2}"
            )));
        }
        if wcin != cin {
            return Err(Error::Config(format!(
                "input has {cin} channels but weight expects {wcin}"
            )));
        }
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(Error::Config(
                "stride and dilation must be at least 1".into(),
            ));
        }
        let hp = h + 2 * opts.padding;
        let wp = w + 2 * opts.padding;
        let span = opts.dilation * (k - 1) + 1;
        if span > hp || span > wp {
            return Err(Error::Config(format!(
                "dilated kernel span {span} exceeds padded input {hp}×{wp}"
            )));
        }
        let ho = (hp - span) / opts.stride + 1;
        let wo = (wp - span) / opts.stride + 1;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k,
            ho,
            wo,
            hp,
            wp,
            opts,
        })
    }
}

pub(crate) fn pad_input(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.opts.padding;
    if p == 0 {
        return x.to_vec();
    }
    let planes = g.n * g.cin;
    let mut out = vec![0.0; planes * g.hp * g.wp];
    for plane in 0..planes {
        let src = &x[plane * g.h * g.w..][..g.h * g.w];
        let dst = &mut out[plane * g.hp * g.wp..][..g.hp * g.wp];
        match g.opts.pad_mode {
            PadMode::Zeros => {
                for y in 0..g.h {
                    dst[(y + p) * g.wp + p..][..g.w].copy_from_slice(&src[y * g.w..][..g.w]);
                }
            }
            PadMode::Replicate => {
                for yp in 0..g.hp {
                    let y = yp.saturating_sub(p).min(g.h - 1);
                    for xp in 0..g.wp {
                        let xs = xp.saturating_sub(p).min(g.w - 1);
                        dst[yp * g.wp + xp] = src[y * g.w + xs];
                    }
                }
            }
        }
    }
    out
}

/// Folds a gradient on the padded buffer back onto the original input.
pub(crate) fn unpad_grad(gp: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.opts.padding;
    if p == 0 {
        return gp.to_vec();
    }
    let planes = g.n * g.cin;
    let mut out = vec![0.0; planes * g.h * g.w];
    for plane in 0..planes {
        let src = &gp[plane * g.hp * g.wp..][..g.hp * g.wp];
        let dst = &mut out[plane * g.h * g.w..][..g.h * g.w];
        match g.opts.pad_mode {
            PadMode::Zeros => {
                for y in 0..g.h {
                    dst[y * g.w..][..g.w].copy_from_slice(&src[(y + p) * g.wp + p..][..g.w]);
                }
            }
            PadMode::Replicate => {
                for yp in 0..g.hp {
                    let y = yp.saturating_sub(p).min(g.h - 1);
                    for xp in 0..g.wp {
                        let xs = xp.saturating_sub(p).min(g.w - 1);
                        dst[y * g.w + xs] += src[yp * g.wp + xp];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_forward(
    xp: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> Vec<f64> {
    let (s, d, k) = (g.opts.stride, g.opts.dilation, g.k);
    let out_plane = g.ho * g.wo;
    let in_plane = g.hp * g.wp;
    let mut out = vec![0.0; g.n * g.cout * out_plane];
    for n in 0..g.n {
        for co in 0..g.cout {
            let o = &mut out[(n * g.cout + co) * out_plane..][..out_plane];
            if let Some(b) = bias {
                o.fill(b[co]);
            }
            for ci in 0..g.cin {
                let x = &xp[(n * g.cin + ci) * in_plane..][..in_plane];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[((co * g.cin + ci) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..g.ho {
                            let row = &x[(oy * s + ky * d) * g.wp + kx * d..];
                            let orow = &mut o[oy * g.wo..][..g.wo];
                            if s == 1 {
                                for (ov, &xv) in orow.iter_mut().zip(&row[..g.wo]) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for (ox, ov) in orow.iter_mut().enumerate() {
                                    *ov += wv * row[ox * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad wrt padded input, grad wrt weight, grad wrt bias).
pub(crate) fn conv2d_backward(
    xp: &[f64],
    weight: &[f64],
    gout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (s, d, k) = (g.opts.stride, g.opts.dilation, g.k);
    let out_plane = g.ho * g.wo;
    let in_plane = g.hp * g.wp;
    let mut gx = vec![0.0; xp.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; g.cout];
    for n in 0..g.n {
        for co in 0..g.cout {
            let go = &gout[(n * g.cout + co) * out_plane..][..out_plane];
            gb[co] += go.iter().sum::<f64>();
            for ci in 0..g.cin {
                let base = (n * g.cin + ci) * in_plane;
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((co * g.cin + ci) * k + ky) * k + kx;
                        let wv = weight[widx];
                        let mut acc = 0.0;
                        for oy in 0..g.ho {
                            let off = base + (oy * s + ky * d) * g.wp + kx * d;
                            let grow = &go[oy * g.wo..][..g.wo];
                            if s == 1 {
                                let xrow = &xp[off..][..g.wo];
                                acc += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                                if wv != 0.0 {
                                    let gxrow = &mut gx[off..][..g.wo];
                                    for (gxv, &gv) in gxrow.iter_mut().zip(grow) {
                                        *gxv += wv * gv;
                                    }
                                }
                            } else {
                                for (ox, &gv) in grow.iter().enumerate() {
                                    acc += gv * xp[off + ox * s];
                                    gx[off + ox * s] += wv * gv;
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Geometry of a transposed convolution with weight laid out Cin×Cout×k×k.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TransposedGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub padding: usize,
}

impl TransposedGeom {
    pub fn resolve(
        input: (usize, usize, usize, usize),
        weight: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (n, cin, h, w) = input;
        let [wcin, cout, k, k2] = *weight else {
            return Err(Error::Shape(format!(
                "transposed conv weight must be 4-D, got {weight:?}"
            )));
        };
        if k != k2 {
            return Err(Error::Config(format!(
                "only square kernels are supported, got {k}×{k2}"
            )));
        }
        if wcin != cin {
            return Err(Error::Config(format!(
                "input has {cin} channels but weight expects {wcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        let full_h = (h - 1) * stride + k;
        let full_w = (w - 1) * stride + k;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(Error::Config(format!(
                "padding {padding} consumes the whole output"
            )));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k,
            ho: full_h - 2 * padding,
            wo: full_w - 2 * padding,
            stride,
            padding,
        })
    }

    /// Input columns `ix` for which `ix * stride + kx - padding` lands in `0..wo`.
    fn valid_range(&self, kx: usize, extent_in: usize, extent_out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let kx = kx as isize;
        let lo = (p - kx).max(0);
        let lo = (lo + s - 1) / s;
        let hi = (extent_out as isize - 1 + p - kx).div_euclid(s);
        let hi = hi.min(extent_in as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }
}

pub(crate) fn conv_transpose2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &TransposedGeom,
) -> Vec<f64> {
    let (s, p, k) = (g.stride, g.padding, g.k);
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let mut out = vec![0.0; g.n * g.cout * out_plane];
    for n in 0..g.n {
        for co in 0..g.cout {
            let o = &mut out[(n * g.cout + co) * out_plane..][..out_plane];
            if let Some(b) = bias {
                o.fill(b[co]);
            }
            for ci in 0..g.cin {
                let xin = &x[(n * g.cin + ci) * in_plane..][..in_plane];
                for ky in 0..k {
                    let (iy0, iy1) = g.valid_range(ky, g.h, g.ho);
                    for kx in 0..k {
                        let wv = weight[((ci * g.cout + co) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ix0, ix1) = g.valid_range(kx, g.w, g.wo);
                        for iy in iy0..iy1 {
                            let oy = iy * s + ky - p;
                            let xrow = &xin[iy * g.w..][..g.w];
                            let orow = &mut o[oy * g.wo..][..g.wo];
                            for ix in ix0..ix1 {
                                orow[ix * s + kx - p] += wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad wrt input, grad wrt weight, grad wrt bias).
pub(crate) fn conv_transpose2d_backward(
    x: &[f64],
    weight: &[f64],
    gout: &[f64],
    g: &TransposedGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (s, p, k) = (g.stride, g.padding, g.k);
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; g.cout];
    for n in 0..g.n {
        for co in 0..g.cout {
            let go = &gout[(n * g.cout + co) * out_plane..][..out_plane];
            gb[co] += go.iter().sum::<f64>();
            for ci in 0..g.cin {
                let xoff = (n * g.cin + ci) * in_plane;
                for ky in 0..k {
                    let (iy0, iy1) = g.valid_range(ky, g.h, g.ho);
                    for kx in 0..k {
                        let widx = ((ci * g.cout + co) * k + ky) * k + kx;
                        let wv = weight[widx];
                        let (ix0, ix1) = g.valid_range(kx, g.w, g.wo);
                        let mut acc = 0.0;
                        for iy in iy0..iy1 {
                            let oy = iy * s + ky - p;
                            let grow = &go[oy * g.wo..][..g.wo];
                            for ix in ix0..ix1 {
                                let gv = grow[ix * s + kx - p];
                                acc += gv * x[xoff + iy * g.w + ix];
                                gx[xoff + iy * g.w + ix] += wv * gv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}
