//! 2D and singleton-depth 3D convolution kernels, forward and backward.
//!
//! Convolution here means cross-correlation (no kernel flip), zero padding,
//! with stride, dilation, and channel groups. Depthwise convolution is the
//! `groups == channels` special case. Output planes are independent, so the
//! batch x out-channel loop is the data-parallel axis; gradient kernels are
//! written as gathers over input planes and weight slices so they
//! parallelize the same way without write races.

use crate::error::{CoreError, Result};
use crate::par;
use crate::tensor::{debug_assert_finite, Scalar, Tensor4};

/// Stride, padding, dilation, and group count of a 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Conv2dGeom {
    /// 1x1 kernel geometry: stride 1, no padding, no dilation.
    pub fn unit(groups: usize) -> Self {
        Conv2dGeom {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups,
        }
    }

    /// Shape-preserving 3x3 geometry at the given dilation.
    pub fn same3x3(dilation: usize, groups: usize) -> Self {
        Conv2dGeom {
            stride: (1, 1),
            padding: (dilation, dilation),
            dilation: (dilation, dilation),
            groups,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(CoreError::Config("conv2d groups must be >= 1".into()));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 || self.dilation.0 == 0 || self.dilation.1 == 0
        {
            return Err(CoreError::Config(
                "conv2d stride and dilation must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Weights plus hyperparameters of one 2D convolution.
///
/// `weights` is `(out_ch, in_ch/groups, kh, kw)`; `bias`, when present, is a
/// length-`out_ch` vector carried as a `(1, out_ch, 1, 1)` tensor.
#[derive(Clone, Debug)]
pub struct ConvSpec<T> {
    pub weights: Tensor4<T>,
    pub bias: Option<Tensor4<T>>,
    pub geom: Conv2dGeom,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(
        weights: Tensor4<T>,
        bias: Option<Vec<T>>,
        stride: (usize, usize),
        padding: (usize, usize),
        dilation: (usize, usize),
        groups: usize,
    ) -> Result<Self> {
        let geom = Conv2dGeom {
            stride,
            padding,
            dilation,
            groups,
        };
        geom.validate()?;
        let out_ch = weights.n();
        if out_ch % geom.groups != 0 {
            return Err(CoreError::GroupMismatch {
                op: "conv2d",
                channels: out_ch,
                groups: geom.groups,
            });
        }
        let bias = match bias {
            Some(b) => {
                if b.len() != out_ch {
                    return Err(CoreError::shape(
                        "conv2d",
                        format!("bias length {} != out_ch {out_ch}", b.len()),
                    ));
                }
                Some(Tensor4::new((1, out_ch, 1, 1), b)?)
            }
            None => None,
        };
        Ok(ConvSpec {
            weights,
            bias,
            geom,
        })
    }

    #[inline]
    pub fn out_ch(&self) -> usize {
        self.weights.n()
    }

    #[inline]
    pub fn in_ch(&self) -> usize {
        self.weights.c() * self.geom.groups
    }

    #[inline]
    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.h(), self.weights.w())
    }
}

/// Weights plus hyperparameters of one 3x3x3 convolution over a singleton
/// depth axis. The logical weight array is rank-5
/// `(out_ch, in_ch/groups, 3, 3, 3)`, stored packed as
/// `(out_ch, (in_ch/groups)*3, 3, 3)` with the three depth taps laid out
/// after the per-group input channel.
#[derive(Clone, Debug)]
pub struct Conv3Spec<T> {
    pub weights: Tensor4<T>,
    pub bias: Option<Tensor4<T>>,
    pub padding: (usize, usize, usize),
    pub groups: usize,
}

/// Fixed kernel extent on every axis of a [`Conv3Spec`].
pub const CONV3_K: usize = 3;

impl<T: Scalar> Conv3Spec<T> {
    /// Build from rank-5 weights given flat in `(out_ch, in_ch/groups, kd, kh, kw)`
    /// row-major order; all three kernel extents must be 3.
    pub fn new(
        weights: Vec<T>,
        out_ch: usize,
        in_ch_per_group: usize,
        bias: Option<Vec<T>>,
        padding: (usize, usize, usize),
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || out_ch % groups != 0 {
            return Err(CoreError::GroupMismatch {
                op: "conv3d",
                channels: out_ch,
                groups,
            });
        }
        let want = out_ch * in_ch_per_group * CONV3_K * CONV3_K * CONV3_K;
        if weights.len() != want {
            return Err(CoreError::shape(
                "conv3d",
                format!(
                    "weight length {} != out_ch*in_ch/g*27 = {want}",
                    weights.len()
                ),
            ));
        }
        let weights =
            Tensor4::new((out_ch, in_ch_per_group * CONV3_K, CONV3_K, CONV3_K), weights)?;
        let bias = match bias {
            Some(b) => {
                if b.len() != out_ch {
                    return Err(CoreError::shape(
                        "conv3d",
                        format!("bias length {} != out_ch {out_ch}", b.len()),
                    ));
                }
                Some(Tensor4::new((1, out_ch, 1, 1), b)?)
            }
            None => None,
        };
        Ok(Conv3Spec {
            weights,
            bias,
            padding,
            groups,
        })
    }

    #[inline]
    pub fn out_ch(&self) -> usize {
        self.weights.n()
    }

    #[inline]
    pub fn in_ch_per_group(&self) -> usize {
        self.weights.c() / CONV3_K
    }

    #[inline]
    pub fn in_ch(&self) -> usize {
        self.in_ch_per_group() * self.groups
    }
}

/// Spatial output extent of a convolution axis, or None when the padded
/// input cannot fit the dilated kernel.
#[inline]
pub fn conv_out_dim(
    input: usize,
    pad: usize,
    dilation: usize,
    kernel: usize,
    stride: usize,
) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * pad;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Range of output positions `o` for which `o*stride + off` lands inside
/// `[0, limit)`. Returns an empty range when no position is valid.
#[inline]
fn valid_out_range(out_len: usize, limit: usize, stride: usize, off: isize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize + stride - 1) / stride
    };
    let max_in = limit as isize - 1 - off;
    if max_in < 0 {
        return (0, 0);
    }
    let hi = (max_in as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

struct Conv2dDims {
    in_ch_per_group: usize,
    out_ch_per_group: usize,
    kh: usize,
    kw: usize,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
}

fn conv2d_dims<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    geom: &Conv2dGeom,
) -> Result<Conv2dDims> {
    geom.validate()?;
    if w.n() % geom.groups != 0 {
        return Err(CoreError::GroupMismatch {
            op: "conv2d",
            channels: w.n(),
            groups: geom.groups,
        });
    }
    if x.c() != w.c() * geom.groups {
        return Err(CoreError::shape(
            "conv2d",
            format!(
                "input has {} channels, weights expect {} ({} per group x {} groups)",
                x.c(),
                w.c() * geom.groups,
                w.c(),
                geom.groups
            ),
        ));
    }
    let h_out = conv_out_dim(x.h(), geom.padding.0, geom.dilation.0, w.h(), geom.stride.0);
    let w_out = conv_out_dim(x.w(), geom.padding.1, geom.dilation.1, w.w(), geom.stride.1);
    match (h_out, w_out) {
        (Some(h_out), Some(w_out)) if h_out >= 1 && w_out >= 1 => Ok(Conv2dDims {
            in_ch_per_group: w.c(),
            out_ch_per_group: w.n() / geom.groups,
            kh: w.h(),
            kw: w.w(),
            h_in: x.h(),
            w_in: x.w(),
            h_out,
            w_out,
        }),
        _ => Err(CoreError::shape(
            "conv2d",
            format!(
                "output spatial dims collapse below 1 for input {}x{} under kernel {}x{}, \
                 stride {:?}, pad {:?}, dilation {:?}",
                x.h(),
                x.w(),
                w.h(),
                w.w(),
                geom.stride,
                geom.padding,
                geom.dilation
            ),
        )),
    }
}

/// Output shape of a 2D convolution without running it.
pub fn conv2d_out_shape<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    geom: &Conv2dGeom,
) -> Result<(usize, usize, usize, usize)> {
    let d = conv2d_dims(x, w, geom)?;
    Ok((x.n(), w.n(), d.h_out, d.w_out))
}

/// One output plane `(n, oc)` of the 2D convolution.
#[allow(clippy::too_many_arguments)]
fn conv2d_fill_plane<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&[T]>,
    geom: &Conv2dGeom,
    d: &Conv2dDims,
    ni: usize,
    oc: usize,
    out_plane: &mut [T],
) {
    let (sy, sx) = geom.stride;
    let (py, px) = geom.padding;
    let (dy, dx) = geom.dilation;
    let gi = oc / d.out_ch_per_group;
    out_plane.fill(bias.map_or(T::zero(), |b| b[oc]));
    for icl in 0..d.in_ch_per_group {
        let ic = gi * d.in_ch_per_group + icl;
        for ky in 0..d.kh {
            let y_off = (ky * dy) as isize - py as isize;
            let (oy_lo, oy_hi) = valid_out_range(d.h_out, d.h_in, sy, y_off);
            for kx in 0..d.kw {
                let wv = w.at(oc, icl, ky, kx);
                if wv == T::zero() {
                    continue;
                }
                let x_off = (kx * dx) as isize - px as isize;
                let (ox_lo, ox_hi) = valid_out_range(d.w_out, d.w_in, sx, x_off);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = (oy * sy) as isize + y_off;
                    let xrow = x.row(ni, ic, iy as usize);
                    let orow = &mut out_plane[oy * d.w_out..(oy + 1) * d.w_out];
                    if sx == 1 {
                        let start = (ox_lo as isize + x_off) as usize;
                        let xs = &xrow[start..start + (ox_hi - ox_lo)];
                        for (o, &xv) in orow[ox_lo..ox_hi].iter_mut().zip(xs.iter()) {
                            *o += wv * xv;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            let ix = (ox * sx) as isize + x_off;
                            orow[ox] += wv * xrow[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_raw<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&[T]>,
    geom: &Conv2dGeom,
    sequential: bool,
) -> Result<Tensor4<T>> {
    let d = conv2d_dims(x, w, geom)?;
    if let Some(b) = bias {
        if b.len() != w.n() {
            return Err(CoreError::shape(
                "conv2d",
                format!("bias length {} != out_ch {}", b.len(), w.n()),
            ));
        }
    }
    let mut out = Tensor4::zeros((x.n(), w.n(), d.h_out, d.w_out));
    let plane = d.h_out * d.w_out;
    let oc_count = w.n();
    let fill = |i: usize, p: &mut [T]| {
        conv2d_fill_plane(x, w, bias, geom, &d, i / oc_count, i % oc_count, p)
    };
    if sequential {
        par::chunks_mut_for_each_seq(out.data_mut(), plane, fill);
    } else {
        par::chunks_mut_for_each(out.data_mut(), plane, fill);
    }
    debug_assert_finite(&out, "conv2d");
    Ok(out)
}

/// 2D cross-correlation of `x` with `spec`. Output spatial dims follow
/// `floor((dim + 2*pad - dilation*(k-1) - 1) / stride) + 1`.
pub fn conv2d<T: Scalar>(x: &Tensor4<T>, spec: &ConvSpec<T>) -> Result<Tensor4<T>> {
    conv2d_raw(
        x,
        &spec.weights,
        spec.bias.as_ref().map(|b| b.data()),
        &spec.geom,
        false,
    )
}

/// Single-threaded [`conv2d`], kept public so benchmarks can compare the two
/// execution paths within one build.
pub fn conv2d_seq<T: Scalar>(x: &Tensor4<T>, spec: &ConvSpec<T>) -> Result<Tensor4<T>> {
    conv2d_raw(
        x,
        &spec.weights,
        spec.bias.as_ref().map(|b| b.data()),
        &spec.geom,
        true,
    )
}

/// Input gradient of [`conv2d`]: one input plane `(n, ic)` gathered from the
/// output-gradient planes of its group.
fn conv2d_dx_plane<T: Scalar>(
    g: &Tensor4<T>,
    w: &Tensor4<T>,
    geom: &Conv2dGeom,
    d: &Conv2dDims,
    ni: usize,
    ic: usize,
    dx_plane: &mut [T],
) {
    let (sy, sx) = geom.stride;
    let (py, px) = geom.padding;
    let (dy, dx) = geom.dilation;
    let gi = ic / d.in_ch_per_group;
    let icl = ic % d.in_ch_per_group;
    for ocl in 0..d.out_ch_per_group {
        let oc = gi * d.out_ch_per_group + ocl;
        for ky in 0..d.kh {
            let y_off = (ky * dy) as isize - py as isize;
            let (oy_lo, oy_hi) = valid_out_range(d.h_out, d.h_in, sy, y_off);
            for kx in 0..d.kw {
                let wv = w.at(oc, icl, ky, kx);
                if wv == T::zero() {
                    continue;
                }
                let x_off = (kx * dx) as isize - px as isize;
                let (ox_lo, ox_hi) = valid_out_range(d.w_out, d.w_in, sx, x_off);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = ((oy * sy) as isize + y_off) as usize;
                    let grow = g.row(ni, oc, oy);
                    let xrow = &mut dx_plane[iy * d.w_in..(iy + 1) * d.w_in];
                    if sx == 1 {
                        let start = (ox_lo as isize + x_off) as usize;
                        let xs = &mut xrow[start..start + (ox_hi - ox_lo)];
                        for (o, &gv) in xs.iter_mut().zip(grow[ox_lo..ox_hi].iter()) {
                            *o += wv * gv;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            let ix = ((ox * sx) as isize + x_off) as usize;
                            xrow[ix] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Weight gradient of [`conv2d`]: the kernel slice for one output channel,
/// gathered over the batch.
fn conv2d_dw_slice<T: Scalar>(
    x: &Tensor4<T>,
    g: &Tensor4<T>,
    geom: &Conv2dGeom,
    d: &Conv2dDims,
    oc: usize,
    dw_slice: &mut [T],
) {
    let (sy, sx) = geom.stride;
    let (py, px) = geom.padding;
    let (dy, dx) = geom.dilation;
    let gi = oc / d.out_ch_per_group;
    for ni in 0..x.n() {
        for icl in 0..d.in_ch_per_group {
            let ic = gi * d.in_ch_per_group + icl;
            for ky in 0..d.kh {
                let y_off = (ky * dy) as isize - py as isize;
                let (oy_lo, oy_hi) = valid_out_range(d.h_out, d.h_in, sy, y_off);
                for kx in 0..d.kw {
                    let x_off = (kx * dx) as isize - px as isize;
                    let (ox_lo, ox_hi) = valid_out_range(d.w_out, d.w_in, sx, x_off);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = ((oy * sy) as isize + y_off) as usize;
                        let grow = g.row(ni, oc, oy);
                        let xrow = x.row(ni, ic, iy);
                        if sx == 1 {
                            let start = (ox_lo as isize + x_off) as usize;
                            let xs = &xrow[start..start + (ox_hi - ox_lo)];
                            for (&gv, &xv) in grow[ox_lo..ox_hi].iter().zip(xs.iter()) {
                                acc += gv * xv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * sx) as isize + x_off) as usize;
                                acc += grow[ox] * xrow[ix];
                            }
                        }
                    }
                    dw_slice[(icl * d.kh + ky) * d.kw + kx] += acc;
                }
            }
        }
    }
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor4<T>>,
    pub dw: Option<Tensor4<T>>,
    pub db: Option<Tensor4<T>>,
}

/// Backward pass of [`conv2d`]. `g` is the loss gradient at the output; the
/// three flags select which gradients to compute.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    g: &Tensor4<T>,
    geom: &Conv2dGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> Result<ConvGrads<T>> {
    let d = conv2d_dims(x, w, geom)?;
    if g.shape() != (x.n(), w.n(), d.h_out, d.w_out) {
        return Err(CoreError::shape(
            "conv2d_backward",
            format!(
                "output gradient shape {:?} != expected {:?}",
                g.shape(),
                (x.n(), w.n(), d.h_out, d.w_out)
            ),
        ));
    }
    let dx = if want_dx {
        let mut dx = Tensor4::zeros(x.shape());
        let plane = x.h() * x.w();
        let c = x.c();
        par::chunks_mut_for_each(dx.data_mut(), plane, |i, p| {
            conv2d_dx_plane(g, w, geom, &d, i / c, i % c, p)
        });
        Some(dx)
    } else {
        None
    };
    let dw = if want_dw {
        let mut dw = Tensor4::zeros(w.shape());
        let slice = w.c() * w.h() * w.w();
        par::chunks_mut_for_each(dw.data_mut(), slice, |oc, s| {
            conv2d_dw_slice(x, g, geom, &d, oc, s)
        });
        Some(dw)
    } else {
        None
    };
    let db = if want_db {
        let mut db = Tensor4::zeros((1, w.n(), 1, 1));
        let plane = d.h_out * d.w_out;
        for ni in 0..g.n() {
            for oc in 0..g.c() {
                let base = (ni * g.c() + oc) * plane;
                let mut acc = T::zero();
                for &gv in &g.data()[base..base + plane] {
                    acc += gv;
                }
                db.data_mut()[oc] += acc;
            }
        }
        Some(db)
    } else {
        None
    };
    Ok(ConvGrads { dx, dw, db })
}

fn conv3d_dims<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    padding: (usize, usize, usize),
    groups: usize,
) -> Result<(usize, usize)> {
    if groups == 0 || w.n() % groups != 0 {
        return Err(CoreError::GroupMismatch {
            op: "conv3d_singleton",
            channels: w.n(),
            groups,
        });
    }
    if w.c() % CONV3_K != 0 || w.h() != CONV3_K || w.w() != CONV3_K {
        return Err(CoreError::shape(
            "conv3d_singleton",
            format!(
                "packed weight shape {:?} is not (out_ch, icg*3, 3, 3)",
                w.shape()
            ),
        ));
    }
    let icg = w.c() / CONV3_K;
    if x.c() != icg * groups {
        return Err(CoreError::shape(
            "conv3d_singleton",
            format!(
                "input has {} channels, weights expect {}",
                x.c(),
                icg * groups
            ),
        ));
    }
    if padding.0 != 1 {
        return Err(CoreError::Config(format!(
            "conv3d_singleton requires depth padding 1 so the singleton depth axis survives, got {}",
            padding.0
        )));
    }
    let h_out = conv_out_dim(x.h(), padding.1, 1, CONV3_K, 1);
    let w_out = conv_out_dim(x.w(), padding.2, 1, CONV3_K, 1);
    match (h_out, w_out) {
        (Some(h), Some(w)) if h >= 1 && w >= 1 => Ok((h, w)),
        _ => Err(CoreError::shape(
            "conv3d_singleton",
            format!(
                "output spatial dims collapse below 1 for input {}x{}",
                x.h(),
                x.w()
            ),
        )),
    }
}

/// One output plane of the singleton-depth 3D convolution. Only the center
/// depth tap can touch real data; the outer taps see depth padding.
#[allow(clippy::too_many_arguments)]
fn conv3d_fill_plane<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&[T]>,
    padding: (usize, usize, usize),
    groups: usize,
    dims: (usize, usize),
    ni: usize,
    oc: usize,
    out_plane: &mut [T],
) {
    let (h_out, w_out) = dims;
    let (pd, py, px) = padding;
    let icg = w.c() / CONV3_K;
    let ocg = w.n() / groups;
    let gi = oc / ocg;
    out_plane.fill(bias.map_or(T::zero(), |b| b[oc]));
    for icl in 0..icg {
        let ic = gi * icg + icl;
        for kd in 0..CONV3_K {
            // the input depth axis has one slice at index 0
            if kd as isize - pd as isize != 0 {
                continue;
            }
            for ky in 0..CONV3_K {
                let y_off = ky as isize - py as isize;
                let (oy_lo, oy_hi) = valid_out_range(h_out, x.h(), 1, y_off);
                for kx in 0..CONV3_K {
                    let wv = w.at(oc, icl * CONV3_K + kd, ky, kx);
                    if wv == T::zero() {
                        continue;
                    }
                    let x_off = kx as isize - px as isize;
                    let (ox_lo, ox_hi) = valid_out_range(w_out, x.w(), 1, x_off);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = (oy as isize + y_off) as usize;
                        let xrow = x.row(ni, ic, iy);
                        let start = (ox_lo as isize + x_off) as usize;
                        let xs = &xrow[start..start + (ox_hi - ox_lo)];
                        let orow = &mut out_plane[oy * w_out..(oy + 1) * w_out];
                        for (o, &xv) in orow[ox_lo..ox_hi].iter_mut().zip(xs.iter()) {
                            *o += wv * xv;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_raw<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&[T]>,
    padding: (usize, usize, usize),
    groups: usize,
    sequential: bool,
) -> Result<Tensor4<T>> {
    let dims = conv3d_dims(x, w, padding, groups)?;
    if let Some(b) = bias {
        if b.len() != w.n() {
            return Err(CoreError::shape(
                "conv3d_singleton",
                format!("bias length {} != out_ch {}", b.len(), w.n()),
            ));
        }
    }
    let mut out = Tensor4::zeros((x.n(), w.n(), dims.0, dims.1));
    let plane = dims.0 * dims.1;
    let oc_count = w.n();
    let fill = |i: usize, p: &mut [T]| {
        conv3d_fill_plane(
            x,
            w,
            bias,
            padding,
            groups,
            dims,
            i / oc_count,
            i % oc_count,
            p,
        )
    };
    if sequential {
        par::chunks_mut_for_each_seq(out.data_mut(), plane, fill);
    } else {
        par::chunks_mut_for_each(out.data_mut(), plane, fill);
    }
    debug_assert_finite(&out, "conv3d_singleton");
    Ok(out)
}

/// 3D cross-correlation over `(depth=1, h, w)` with zero-padded depth
/// neighbors. The input is read as a rank-5 tensor with a singleton depth
/// axis inserted after channels; the output depth is again 1 and the result
/// is returned as a rank-4 tensor.
pub fn conv3d_singleton<T: Scalar>(x: &Tensor4<T>, spec: &Conv3Spec<T>) -> Result<Tensor4<T>> {
    conv3d_raw(
        x,
        &spec.weights,
        spec.bias.as_ref().map(|b| b.data()),
        spec.padding,
        spec.groups,
        false,
    )
}

/// Single-threaded [`conv3d_singleton`].
pub fn conv3d_singleton_seq<T: Scalar>(
    x: &Tensor4<T>,
    spec: &Conv3Spec<T>,
) -> Result<Tensor4<T>> {
    conv3d_raw(
        x,
        &spec.weights,
        spec.bias.as_ref().map(|b| b.data()),
        spec.padding,
        spec.groups,
        true,
    )
}

/// Backward pass of the singleton-depth 3D convolution. Off-center depth
/// taps only ever multiplied padding, so their weight gradient stays zero;
/// the center tap reduces to the 2D case.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    g: &Tensor4<T>,
    padding: (usize, usize, usize),
    groups: usize,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> Result<ConvGrads<T>> {
    let dims = conv3d_dims(x, w, padding, groups)?;
    if g.shape() != (x.n(), w.n(), dims.0, dims.1) {
        return Err(CoreError::shape(
            "conv3d_backward",
            format!(
                "output gradient shape {:?} != expected {:?}",
                g.shape(),
                (x.n(), w.n(), dims.0, dims.1)
            ),
        ));
    }
    let icg = w.c() / CONV3_K;
    let mut center = Tensor4::zeros((w.n(), icg, CONV3_K, CONV3_K));
    for oc in 0..w.n() {
        for icl in 0..icg {
            for ky in 0..CONV3_K {
                for kx in 0..CONV3_K {
                    *center.at_mut(oc, icl, ky, kx) = w.at(oc, icl * CONV3_K + 1, ky, kx);
                }
            }
        }
    }
    let geom = Conv2dGeom {
        stride: (1, 1),
        padding: (padding.1, padding.2),
        dilation: (1, 1),
        groups,
    };
    let grads2 = conv2d_backward(x, &center, g, &geom, want_dx, want_dw, want_db)?;
    let dw = grads2.dw.map(|dw2| {
        let mut dw = Tensor4::zeros(w.shape());
        for oc in 0..w.n() {
            for icl in 0..icg {
                for ky in 0..CONV3_K {
                    for kx in 0..CONV3_K {
                        *dw.at_mut(oc, icl * CONV3_K + 1, ky, kx) = dw2.at(oc, icl, ky, kx);
                    }
                }
            }
        }
        dw
    });
    Ok(ConvGrads {
        dx: grads2.dx,
        dw,
        db: grads2.db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye_1x1(c: usize) -> ConvSpec<f32> {
        let w = Tensor4::from_fn((c, c, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        ConvSpec::new(w, Some(vec![0.0; c]), (1, 1), (0, 0), (1, 1), 1).unwrap()
    }

    #[test]
    fn identity_pointwise_conv_is_identity() {
        let x = Tensor4::<f32>::from_fn((2, 3, 4, 4), |n, c, h, w| {
            (n * 48 + c * 16 + h * 4 + w) as f32 * 0.1
        });
        let y = conv2d(&x, &eye_1x1(3)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn ones_kernel_center_sums_window() {
        // 3x3 all-ones kernel, pad 1, on a 3x3 all-ones input: center = 9
        let x = Tensor4::<f32>::filled((1, 1, 3, 3), 1.0);
        let w = Tensor4::<f32>::filled((1, 1, 3, 3), 1.0);
        let spec = ConvSpec::new(w, None, (1, 1), (1, 1), (1, 1), 1).unwrap();
        let y = conv2d(&x, &spec).unwrap();
        assert_eq!(y.shape(), (1, 1, 3, 3));
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor4::<f32>::zeros((1, 2, 4, 4));
        let err = conv2d(&x, &eye_1x1(3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2 channels"), "unexpected message: {msg}");
    }

    #[test]
    fn collapsed_output_is_an_error() {
        let x = Tensor4::<f32>::zeros((1, 1, 2, 2));
        let w = Tensor4::<f32>::zeros((1, 1, 3, 3));
        let spec = ConvSpec::new(w, None, (1, 1), (0, 0), (2, 2), 1).unwrap();
        assert!(conv2d(&x, &spec).is_err());
    }

    #[test]
    fn output_dims_follow_the_formula() {
        let x = Tensor4::<f32>::zeros((1, 1, 11, 9));
        let w = Tensor4::<f32>::zeros((1, 1, 3, 3));
        let spec = ConvSpec::new(w, None, (2, 2), (1, 1), (2, 2), 1).unwrap();
        let y = conv2d(&x, &spec).unwrap();
        // h: floor((11 + 2 - 2*2 - 1)/2) + 1 = 5 ; w: floor((9 + 2 - 5)/2) + 1 = 4
        assert_eq!(y.shape(), (1, 1, 5, 4));
    }

    #[test]
    fn conv3d_zero_weights_broadcast_bias() {
        let x = Tensor4::<f32>::filled((1, 2, 3, 3), 5.0);
        let spec = Conv3Spec::new(
            vec![0.0; 2 * 2 * 27],
            2,
            2,
            Some(vec![1.5, -2.5]),
            (1, 1, 1),
            1,
        )
        .unwrap();
        let y = conv3d_singleton(&x, &spec).unwrap();
        for h in 0..3 {
            for w in 0..3 {
                assert_eq!(y.at(0, 0, h, w), 1.5);
                assert_eq!(y.at(0, 1, h, w), -2.5);
            }
        }
    }

    #[test]
    fn conv3d_requires_depth_padding_one() {
        let x = Tensor4::<f32>::zeros((1, 1, 3, 3));
        let spec = Conv3Spec::new(vec![0.0; 27], 1, 1, None, (0, 1, 1), 1).unwrap();
        assert!(conv3d_singleton(&x, &spec).is_err());
    }

    #[test]
    fn conv3d_group_mismatch_is_an_error() {
        assert!(Conv3Spec::<f32>::new(vec![0.0; 27], 3, 1, None, (1, 1, 1), 2).is_err());
    }
}
