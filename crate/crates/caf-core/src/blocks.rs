//! The attention/convolution fusion block and its two halves.
//!
//! ACFM runs a global branch (cross-channel attention: a c x c map over
//! channel-major matrices, so cost scales with c^2 * hw rather than
//! (hw)^2 * c) and a local branch (pointwise conv, channel shuffle,
//! singleton-depth 3x3x3 conv), fused by elementwise sum. MSNN is a gated
//! feed-forward: a ReLU'd depthwise path multiplies the sum of two dilated
//! conv paths that share one pointwise projection. The full block applies
//! both behind channel layer norms with residual wiring.
//!
//! Every forward here is recorded on a [`Tape`], so the same code path
//! serves inference (throwaway tape) and training (backward over the tape).

use crate::autodiff::{NodeId, Tape};
use crate::conv::{Conv2dGeom, Conv3Spec, ConvSpec, CONV3_K};
use crate::error::{CoreError, Result};
use crate::tensor::{Scalar, Tensor4};
use rand::Rng;

/// Epsilon used by every layer norm in the block.
pub const LN_EPS: f64 = 1e-5;

/// Largest divisor of `c` not exceeding 4: the default channel-shuffle
/// group count.
pub fn default_shuffle_groups(c: usize) -> usize {
    (1..=4.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

pub(crate) fn he_uniform<T: Scalar>(
    shape: (usize, usize, usize, usize),
    fan_in: usize,
    rng: &mut impl Rng,
) -> Tensor4<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor4::new(shape, data).expect("shape/data constructed together")
}

fn conv1x1<T: Scalar>(out_ch: usize, in_ch: usize, rng: &mut impl Rng) -> ConvSpec<T> {
    ConvSpec {
        weights: he_uniform((out_ch, in_ch, 1, 1), in_ch, rng),
        bias: Some(Tensor4::zeros((1, out_ch, 1, 1))),
        geom: Conv2dGeom::unit(1),
    }
}

/// Parameters of one attention/convolution fusion module at width `c`.
#[derive(Clone, Debug)]
pub struct AcfmParams<T> {
    /// 1x1 conv, c -> 3c: the joint Q/K/V projection.
    pub qkv_point: ConvSpec<T>,
    /// 3x3 depthwise conv over the stacked 3c channels.
    pub qkv_depth: ConvSpec<T>,
    /// Log of the positive temperature dividing the attention logits.
    pub log_alpha: Tensor4<T>,
    /// 1x1 conv, c -> c, applied to the attention output before the
    /// residual add.
    pub out_point: ConvSpec<T>,
    /// 1x1 conv, c -> c, opening the local branch.
    pub local_point: ConvSpec<T>,
    /// Channel-shuffle group count of the local branch.
    pub shuffle_groups: usize,
    /// 3x3x3 conv (singleton depth), c -> c, closing the local branch.
    pub local_conv3: Conv3Spec<T>,
}

/// Tape nodes of one staged [`AcfmParams`], in flatten order.
#[derive(Clone, Copy, Debug)]
pub struct AcfmNodes {
    pub qkv_point_w: NodeId,
    pub qkv_point_b: NodeId,
    pub qkv_depth_w: NodeId,
    pub qkv_depth_b: NodeId,
    pub log_alpha: NodeId,
    pub out_point_w: NodeId,
    pub out_point_b: NodeId,
    pub local_point_w: NodeId,
    pub local_point_b: NodeId,
    pub local_conv3_w: NodeId,
    pub local_conv3_b: NodeId,
}

pub const ACFM_TENSORS: usize = 11;

impl AcfmNodes {
    pub fn from_slice(ids: &[NodeId]) -> Self {
        AcfmNodes {
            qkv_point_w: ids[0],
            qkv_point_b: ids[1],
            qkv_depth_w: ids[2],
            qkv_depth_b: ids[3],
            log_alpha: ids[4],
            out_point_w: ids[5],
            out_point_b: ids[6],
            local_point_w: ids[7],
            local_point_b: ids[8],
            local_conv3_w: ids[9],
            local_conv3_b: ids[10],
        }
    }

    pub fn to_vec(&self) -> Vec<NodeId> {
        vec![
            self.qkv_point_w,
            self.qkv_point_b,
            self.qkv_depth_w,
            self.qkv_depth_b,
            self.log_alpha,
            self.out_point_w,
            self.out_point_b,
            self.local_point_w,
            self.local_point_b,
            self.local_conv3_w,
            self.local_conv3_b,
        ]
    }
}

impl<T: Scalar> AcfmParams<T> {
    pub fn init(c: usize, rng: &mut impl Rng) -> Result<Self> {
        if c == 0 {
            return Err(CoreError::Config("block width must be >= 1".into()));
        }
        let shuffle_groups = default_shuffle_groups(c);
        Ok(AcfmParams {
            qkv_point: conv1x1(3 * c, c, rng),
            qkv_depth: ConvSpec {
                weights: he_uniform((3 * c, 1, 3, 3), 9, rng),
                bias: Some(Tensor4::zeros((1, 3 * c, 1, 1))),
                geom: Conv2dGeom::same3x3(1, 3 * c),
            },
            log_alpha: Tensor4::scalar(T::from_f64(0.5 * (c as f64).ln())),
            out_point: conv1x1(c, c, rng),
            local_point: conv1x1(c, c, rng),
            shuffle_groups,
            local_conv3: Conv3Spec {
                weights: he_uniform((c, c * CONV3_K, CONV3_K, CONV3_K), c * 27, rng),
                bias: Some(Tensor4::zeros((1, c, 1, 1))),
                padding: (1, 1, 1),
                groups: 1,
            },
        })
    }

    /// Block width.
    pub fn c(&self) -> usize {
        self.out_point.out_ch()
    }

    /// Current positive temperature.
    pub fn alpha(&self) -> T {
        self.log_alpha.data()[0].exp()
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor4<T>)> {
        vec![
            ("acfm.qkv_point.w", &self.qkv_point.weights),
            ("acfm.qkv_point.b", self.qkv_point.bias.as_ref().expect("init sets bias")),
            ("acfm.qkv_depth.w", &self.qkv_depth.weights),
            ("acfm.qkv_depth.b", self.qkv_depth.bias.as_ref().expect("init sets bias")),
            ("acfm.log_alpha", &self.log_alpha),
            ("acfm.out_point.w", &self.out_point.weights),
            ("acfm.out_point.b", self.out_point.bias.as_ref().expect("init sets bias")),
            ("acfm.local_point.w", &self.local_point.weights),
            ("acfm.local_point.b", self.local_point.bias.as_ref().expect("init sets bias")),
            ("acfm.local_conv3.w", &self.local_conv3.weights),
            ("acfm.local_conv3.b", self.local_conv3.bias.as_ref().expect("init sets bias")),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor4<T>> {
        vec![
            &mut self.qkv_point.weights,
            self.qkv_point.bias.as_mut().expect("init sets bias"),
            &mut self.qkv_depth.weights,
            self.qkv_depth.bias.as_mut().expect("init sets bias"),
            &mut self.log_alpha,
            &mut self.out_point.weights,
            self.out_point.bias.as_mut().expect("init sets bias"),
            &mut self.local_point.weights,
            self.local_point.bias.as_mut().expect("init sets bias"),
            &mut self.local_conv3.weights,
            self.local_conv3.bias.as_mut().expect("init sets bias"),
        ]
    }

    /// Record every tensor on the tape, as trainable params or constants.
    pub fn stage(&self, tape: &mut Tape<T>, trainable: bool) -> AcfmNodes {
        let mut push = |t: &Tensor4<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.leaf(t.clone())
            }
        };
        AcfmNodes {
            qkv_point_w: push(&self.qkv_point.weights),
            qkv_point_b: push(self.qkv_point.bias.as_ref().expect("init sets bias")),
            qkv_depth_w: push(&self.qkv_depth.weights),
            qkv_depth_b: push(self.qkv_depth.bias.as_ref().expect("init sets bias")),
            log_alpha: push(&self.log_alpha),
            out_point_w: push(&self.out_point.weights),
            out_point_b: push(self.out_point.bias.as_ref().expect("init sets bias")),
            local_point_w: push(&self.local_point.weights),
            local_point_b: push(self.local_point.bias.as_ref().expect("init sets bias")),
            local_conv3_w: push(&self.local_conv3.weights),
            local_conv3_b: push(self.local_conv3.bias.as_ref().expect("init sets bias")),
        }
    }

    pub fn cast<U: Scalar>(&self) -> AcfmParams<U> {
        AcfmParams {
            qkv_point: cast_conv(&self.qkv_point),
            qkv_depth: cast_conv(&self.qkv_depth),
            log_alpha: self.log_alpha.cast(),
            out_point: cast_conv(&self.out_point),
            local_point: cast_conv(&self.local_point),
            shuffle_groups: self.shuffle_groups,
            local_conv3: Conv3Spec {
                weights: self.local_conv3.weights.cast(),
                bias: self.local_conv3.bias.as_ref().map(|b| b.cast()),
                padding: self.local_conv3.padding,
                groups: self.local_conv3.groups,
            },
        }
    }
}

fn cast_conv<T: Scalar, U: Scalar>(spec: &ConvSpec<T>) -> ConvSpec<U> {
    ConvSpec {
        weights: spec.weights.cast(),
        bias: spec.bias.as_ref().map(|b| b.cast()),
        geom: spec.geom,
    }
}

/// Parameters of one gated multi-scale feed-forward at width `c` with
/// hidden width `c_hidden`.
#[derive(Clone, Debug)]
pub struct MsnnParams<T> {
    /// 1x1 conv, c -> c_hidden, opening the gating path.
    pub in_point_low: ConvSpec<T>,
    /// Depthwise 3x3x3 conv (singleton depth) over c_hidden channels.
    pub depth3_low: Conv3Spec<T>,
    /// 1x1 conv, c -> c_hidden, shared by both dilated paths.
    pub in_point_up: ConvSpec<T>,
    /// 3x3 conv at the first dilation rate, c_hidden -> c_hidden.
    pub dil_n1: ConvSpec<T>,
    /// 3x3 conv at the second dilation rate, c_hidden -> c_hidden.
    pub dil_n2: ConvSpec<T>,
    /// 1x1 conv, c_hidden -> c, closing the module.
    pub out_point: ConvSpec<T>,
}

/// Tape nodes of one staged [`MsnnParams`], in flatten order.
#[derive(Clone, Copy, Debug)]
pub struct MsnnNodes {
    pub in_point_low_w: NodeId,
    pub in_point_low_b: NodeId,
    pub depth3_low_w: NodeId,
    pub depth3_low_b: NodeId,
    pub in_point_up_w: NodeId,
    pub in_point_up_b: NodeId,
    pub dil_n1_w: NodeId,
    pub dil_n1_b: NodeId,
    pub dil_n2_w: NodeId,
    pub dil_n2_b: NodeId,
    pub out_point_w: NodeId,
    pub out_point_b: NodeId,
}

pub const MSNN_TENSORS: usize = 12;

impl MsnnNodes {
    pub fn from_slice(ids: &[NodeId]) -> Self {
        MsnnNodes {
            in_point_low_w: ids[0],
            in_point_low_b: ids[1],
            depth3_low_w: ids[2],
            depth3_low_b: ids[3],
            in_point_up_w: ids[4],
            in_point_up_b: ids[5],
            dil_n1_w: ids[6],
            dil_n1_b: ids[7],
            dil_n2_w: ids[8],
            dil_n2_b: ids[9],
            out_point_w: ids[10],
            out_point_b: ids[11],
        }
    }

    pub fn to_vec(&self) -> Vec<NodeId> {
        vec![
            self.in_point_low_w,
            self.in_point_low_b,
            self.depth3_low_w,
            self.depth3_low_b,
            self.in_point_up_w,
            self.in_point_up_b,
            self.dil_n1_w,
            self.dil_n1_b,
            self.dil_n2_w,
            self.dil_n2_b,
            self.out_point_w,
            self.out_point_b,
        ]
    }
}

impl<T: Scalar> MsnnParams<T> {
    /// `dilations` defaults to (2, 3) in [`CafBlockParams::init`].
    pub fn init(
        c: usize,
        c_hidden: usize,
        dilations: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if c == 0 || c_hidden < c {
            return Err(CoreError::Config(format!(
                "hidden width {c_hidden} must be >= block width {c} >= 1"
            )));
        }
        if dilations.0 == 0 || dilations.1 == 0 {
            return Err(CoreError::Config("dilation rates must be >= 1".into()));
        }
        Ok(MsnnParams {
            in_point_low: conv1x1(c_hidden, c, rng),
            depth3_low: Conv3Spec {
                weights: he_uniform((c_hidden, CONV3_K, CONV3_K, CONV3_K), 27, rng),
                bias: Some(Tensor4::zeros((1, c_hidden, 1, 1))),
                padding: (1, 1, 1),
                groups: c_hidden,
            },
            in_point_up: conv1x1(c_hidden, c, rng),
            dil_n1: ConvSpec {
                weights: he_uniform((c_hidden, c_hidden, 3, 3), c_hidden * 9, rng),
                bias: Some(Tensor4::zeros((1, c_hidden, 1, 1))),
                geom: Conv2dGeom::same3x3(dilations.0, 1),
            },
            dil_n2: ConvSpec {
                weights: he_uniform((c_hidden, c_hidden, 3, 3), c_hidden * 9, rng),
                bias: Some(Tensor4::zeros((1, c_hidden, 1, 1))),
                geom: Conv2dGeom::same3x3(dilations.1, 1),
            },
            out_point: conv1x1(c, c_hidden, rng),
        })
    }

    pub fn c(&self) -> usize {
        self.out_point.out_ch()
    }

    pub fn c_hidden(&self) -> usize {
        self.in_point_low.out_ch()
    }

    pub fn dilations(&self) -> (usize, usize) {
        (self.dil_n1.geom.dilation.0, self.dil_n2.geom.dilation.0)
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor4<T>)> {
        vec![
            ("msnn.in_point_low.w", &self.in_point_low.weights),
            ("msnn.in_point_low.b", self.in_point_low.bias.as_ref().expect("init sets bias")),
            ("msnn.depth3_low.w", &self.depth3_low.weights),
            ("msnn.depth3_low.b", self.depth3_low.bias.as_ref().expect("init sets bias")),
            ("msnn.in_point_up.w", &self.in_point_up.weights),
            ("msnn.in_point_up.b", self.in_point_up.bias.as_ref().expect("init sets bias")),
            ("msnn.dil_n1.w", &self.dil_n1.weights),
            ("msnn.dil_n1.b", self.dil_n1.bias.as_ref().expect("init sets bias")),
            ("msnn.dil_n2.w", &self.dil_n2.weights),
            ("msnn.dil_n2.b", self.dil_n2.bias.as_ref().expect("init sets bias")),
            ("msnn.out_point.w", &self.out_point.weights),
            ("msnn.out_point.b", self.out_point.bias.as_ref().expect("init sets bias")),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor4<T>> {
        vec![
            &mut self.in_point_low.weights,
            self.in_point_low.bias.as_mut().expect("init sets bias"),
            &mut self.depth3_low.weights,
            self.depth3_low.bias.as_mut().expect("init sets bias"),
            &mut self.in_point_up.weights,
            self.in_point_up.bias.as_mut().expect("init sets bias"),
            &mut self.dil_n1.weights,
            self.dil_n1.bias.as_mut().expect("init sets bias"),
            &mut self.dil_n2.weights,
            self.dil_n2.bias.as_mut().expect("init sets bias"),
            &mut self.out_point.weights,
            self.out_point.bias.as_mut().expect("init sets bias"),
        ]
    }

    pub fn stage(&self, tape: &mut Tape<T>, trainable: bool) -> MsnnNodes {
        let mut push = |t: &Tensor4<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.leaf(t.clone())
            }
        };
        MsnnNodes {
            in_point_low_w: push(&self.in_point_low.weights),
            in_point_low_b: push(self.in_point_low.bias.as_ref().expect("init sets bias")),
            depth3_low_w: push(&self.depth3_low.weights),
            depth3_low_b: push(self.depth3_low.bias.as_ref().expect("init sets bias")),
            in_point_up_w: push(&self.in_point_up.weights),
            in_point_up_b: push(self.in_point_up.bias.as_ref().expect("init sets bias")),
            dil_n1_w: push(&self.dil_n1.weights),
            dil_n1_b: push(self.dil_n1.bias.as_ref().expect("init sets bias")),
            dil_n2_w: push(&self.dil_n2.weights),
            dil_n2_b: push(self.dil_n2.bias.as_ref().expect("init sets bias")),
            out_point_w: push(&self.out_point.weights),
            out_point_b: push(self.out_point.bias.as_ref().expect("init sets bias")),
        }
    }

    pub fn cast<U: Scalar>(&self) -> MsnnParams<U> {
        MsnnParams {
            in_point_low: cast_conv(&self.in_point_low),
            depth3_low: Conv3Spec {
                weights: self.depth3_low.weights.cast(),
                bias: self.depth3_low.bias.as_ref().map(|b| b.cast()),
                padding: self.depth3_low.padding,
                groups: self.depth3_low.groups,
            },
            in_point_up: cast_conv(&self.in_point_up),
            dil_n1: cast_conv(&self.dil_n1),
            dil_n2: cast_conv(&self.dil_n2),
            out_point: cast_conv(&self.out_point),
        }
    }
}

/// Parameters of one full block: two layer norms, the fusion module, and
/// the feed-forward.
#[derive(Clone, Debug)]
pub struct CafBlockParams<T> {
    pub ln1_gamma: Tensor4<T>,
    pub ln1_beta: Tensor4<T>,
    pub acfm: AcfmParams<T>,
    pub ln2_gamma: Tensor4<T>,
    pub ln2_beta: Tensor4<T>,
    pub msnn: MsnnParams<T>,
}

/// Tape nodes of one staged [`CafBlockParams`], in flatten order.
#[derive(Clone, Copy, Debug)]
pub struct CafBlockNodes {
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub acfm: AcfmNodes,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
    pub msnn: MsnnNodes,
}

pub const CAF_BLOCK_TENSORS: usize = ACFM_TENSORS + MSNN_TENSORS + 4;

impl CafBlockNodes {
    pub fn from_slice(ids: &[NodeId]) -> Self {
        CafBlockNodes {
            ln1_gamma: ids[0],
            ln1_beta: ids[1],
            acfm: AcfmNodes::from_slice(&ids[2..2 + ACFM_TENSORS]),
            ln2_gamma: ids[2 + ACFM_TENSORS],
            ln2_beta: ids[3 + ACFM_TENSORS],
            msnn: MsnnNodes::from_slice(&ids[4 + ACFM_TENSORS..]),
        }
    }

    pub fn to_vec(&self) -> Vec<NodeId> {
        let mut ids = vec![self.ln1_gamma, self.ln1_beta];
        ids.extend(self.acfm.to_vec());
        ids.push(self.ln2_gamma);
        ids.push(self.ln2_beta);
        ids.extend(self.msnn.to_vec());
        ids
    }
}

impl<T: Scalar> CafBlockParams<T> {
    /// Default block: hidden width 2c, dilations (2, 3).
    pub fn init(c: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::init_with(c, 2 * c, (2, 3), rng)
    }

    pub fn init_with(
        c: usize,
        c_hidden: usize,
        dilations: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(CafBlockParams {
            ln1_gamma: Tensor4::filled((1, c, 1, 1), T::one()),
            ln1_beta: Tensor4::zeros((1, c, 1, 1)),
            acfm: AcfmParams::init(c, rng)?,
            ln2_gamma: Tensor4::filled((1, c, 1, 1), T::one()),
            ln2_beta: Tensor4::zeros((1, c, 1, 1)),
            msnn: MsnnParams::init(c, c_hidden, dilations, rng)?,
        })
    }

    pub fn c(&self) -> usize {
        self.acfm.c()
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor4<T>)> {
        let mut out: Vec<(String, &Tensor4<T>)> = vec![
            ("ln1.gamma".to_string(), &self.ln1_gamma),
            ("ln1.beta".to_string(), &self.ln1_beta),
        ];
        out.extend(self.acfm.tensors().into_iter().map(|(k, v)| (k.to_string(), v)));
        out.push(("ln2.gamma".to_string(), &self.ln2_gamma));
        out.push(("ln2.beta".to_string(), &self.ln2_beta));
        out.extend(self.msnn.tensors().into_iter().map(|(k, v)| (k.to_string(), v)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor4<T>> {
        let mut out: Vec<&mut Tensor4<T>> = vec![&mut self.ln1_gamma, &mut self.ln1_beta];
        out.extend(self.acfm.tensors_mut());
        out.push(&mut self.ln2_gamma);
        out.push(&mut self.ln2_beta);
        out.extend(self.msnn.tensors_mut());
        out
    }

    pub fn stage(&self, tape: &mut Tape<T>, trainable: bool) -> CafBlockNodes {
        let mut push = |t: &Tensor4<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.leaf(t.clone())
            }
        };
        let ln1_gamma = push(&self.ln1_gamma);
        let ln1_beta = push(&self.ln1_beta);
        drop(push);
        let acfm = self.acfm.stage(tape, trainable);
        let ln2_gamma = if trainable {
            tape.param(self.ln2_gamma.clone())
        } else {
            tape.leaf(self.ln2_gamma.clone())
        };
        let ln2_beta = if trainable {
            tape.param(self.ln2_beta.clone())
        } else {
            tape.leaf(self.ln2_beta.clone())
        };
        let msnn = self.msnn.stage(tape, trainable);
        CafBlockNodes {
            ln1_gamma,
            ln1_beta,
            acfm,
            ln2_gamma,
            ln2_beta,
            msnn,
        }
    }

    pub fn cast<U: Scalar>(&self) -> CafBlockParams<U> {
        CafBlockParams {
            ln1_gamma: self.ln1_gamma.cast(),
            ln1_beta: self.ln1_beta.cast(),
            acfm: self.acfm.cast(),
            ln2_gamma: self.ln2_gamma.cast(),
            ln2_beta: self.ln2_beta.cast(),
            msnn: self.msnn.cast(),
        }
    }
}

/// Number of learnable scalars in a block.
pub fn param_count<T: Scalar>(p: &CafBlockParams<T>) -> usize {
    p.tensors().iter().map(|(_, t)| t.numel()).sum()
}

/// Global (cross-channel attention) branch on the tape, returning the
/// branch output and the `(n, 1, c, c)` attention map.
pub fn acfm_global_parts_t<T: Scalar>(
    tape: &mut Tape<T>,
    y: NodeId,
    p: &AcfmNodes,
) -> Result<(NodeId, NodeId)> {
    let (n, c, h, w) = tape.value(y).shape();
    let hw = h * w;
    let qkv_w = tape.value(p.qkv_point_w).shape();
    if qkv_w != (3 * c, c, 1, 1) {
        return Err(CoreError::shape(
            "acfm_global",
            format!("qkv weights {qkv_w:?} do not map {c} -> {} channels", 3 * c),
        ));
    }
    let qkv = tape.conv2d(y, p.qkv_point_w, Some(p.qkv_point_b), Conv2dGeom::unit(1))?;
    let qkv = tape.conv2d(
        qkv,
        p.qkv_depth_w,
        Some(p.qkv_depth_b),
        Conv2dGeom::same3x3(1, 3 * c),
    )?;
    let q = tape.slice_channels(qkv, 0, c)?;
    let k = tape.slice_channels(qkv, c, c)?;
    let v = tape.slice_channels(qkv, 2 * c, c)?;
    let q = tape.reshape(q, (n, 1, c, hw))?;
    let k = tape.reshape(k, (n, 1, c, hw))?;
    let v = tape.reshape(v, (n, 1, c, hw))?;
    let scores = tape.matmul(q, k, false, true)?;
    let alpha = tape.exp(p.log_alpha);
    let scaled = tape.div_by_scalar(scores, alpha)?;
    let attn = tape.softmax_rows(scaled);
    let mixed = tape.matmul(attn, v, false, false)?;
    let mixed = tape.reshape(mixed, (n, c, h, w))?;
    let proj = tape.conv2d(mixed, p.out_point_w, Some(p.out_point_b), Conv2dGeom::unit(1))?;
    let out = tape.add(proj, y)?;
    Ok((out, attn))
}

/// Global branch: attention output projected and residually added to `y`.
pub fn acfm_global_t<T: Scalar>(tape: &mut Tape<T>, y: NodeId, p: &AcfmNodes) -> Result<NodeId> {
    acfm_global_parts_t(tape, y, p).map(|(out, _)| out)
}

/// Local branch: pointwise conv, channel shuffle, singleton-depth 3x3x3.
pub fn acfm_local_t<T: Scalar>(
    tape: &mut Tape<T>,
    y: NodeId,
    p: &AcfmNodes,
    shuffle_groups: usize,
) -> Result<NodeId> {
    let lp = tape.conv2d(y, p.local_point_w, Some(p.local_point_b), Conv2dGeom::unit(1))?;
    let sh = tape.channel_shuffle(lp, shuffle_groups)?;
    tape.conv3d_singleton(sh, p.local_conv3_w, Some(p.local_conv3_b), (1, 1, 1), 1)
}

/// Both branches, fused by elementwise sum.
pub fn acfm_forward_t<T: Scalar>(
    tape: &mut Tape<T>,
    y: NodeId,
    p: &AcfmNodes,
    shuffle_groups: usize,
) -> Result<NodeId> {
    let g = acfm_global_t(tape, y, p)?;
    let l = acfm_local_t(tape, y, p, shuffle_groups)?;
    tape.add(g, l)
}

/// Gated multi-scale feed-forward on the tape. `dilations` are the rates of
/// the two parallel 3x3 convs (padding equals dilation, so shapes hold).
pub fn msnn_forward_t<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    p: &MsnnNodes,
    dilations: (usize, usize),
) -> Result<NodeId> {
    let c_hidden = tape.value(p.in_point_low_w).n();
    let low = tape.conv2d(x, p.in_point_low_w, Some(p.in_point_low_b), Conv2dGeom::unit(1))?;
    let low = tape.conv3d_singleton(low, p.depth3_low_w, Some(p.depth3_low_b), (1, 1, 1), c_hidden)?;
    let low = tape.relu(low);
    let up = tape.conv2d(x, p.in_point_up_w, Some(p.in_point_up_b), Conv2dGeom::unit(1))?;
    let d1 = tape.conv2d(
        up,
        p.dil_n1_w,
        Some(p.dil_n1_b),
        Conv2dGeom::same3x3(dilations.0, 1),
    )?;
    let d2 = tape.conv2d(
        up,
        p.dil_n2_w,
        Some(p.dil_n2_b),
        Conv2dGeom::same3x3(dilations.1, 1),
    )?;
    let upsum = tape.add(d1, d2)?;
    let gate = tape.mul(low, upsum)?;
    tape.conv2d(gate, p.out_point_w, Some(p.out_point_b), Conv2dGeom::unit(1))
}

/// Hyperparameters a staged block needs besides its tensors.
#[derive(Clone, Copy, Debug)]
pub struct CafBlockHyper {
    pub shuffle_groups: usize,
    pub dilations: (usize, usize),
}

impl CafBlockHyper {
    pub fn of<T: Scalar>(p: &CafBlockParams<T>) -> Self {
        CafBlockHyper {
            shuffle_groups: p.acfm.shuffle_groups,
            dilations: p.msnn.dilations(),
        }
    }
}

/// Full block on the tape: pre-norm residual wiring around ACFM and MSNN.
pub fn caf_block_forward_t<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    nodes: &CafBlockNodes,
    hyper: &CafBlockHyper,
) -> Result<NodeId> {
    let n1 = tape.layer_norm(x, nodes.ln1_gamma, nodes.ln1_beta, LN_EPS)?;
    let a = acfm_forward_t(tape, n1, &nodes.acfm, hyper.shuffle_groups)?;
    let y = tape.add(x, a)?;
    let n2 = tape.layer_norm(y, nodes.ln2_gamma, nodes.ln2_beta, LN_EPS)?;
    let m = msnn_forward_t(tape, n2, &nodes.msnn, hyper.dilations)?;
    tape.add(y, m)
}

fn run_throwaway<T: Scalar, F>(x: &Tensor4<T>, f: F) -> Result<Tensor4<T>>
where
    F: FnOnce(&mut Tape<T>, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let out = f(&mut tape, xid)?;
    Ok(tape.value(out).clone())
}

/// Global branch as a plain function.
pub fn acfm_global<T: Scalar>(y: &Tensor4<T>, p: &AcfmParams<T>) -> Result<Tensor4<T>> {
    run_throwaway(y, |tape, yid| {
        let nodes = p.stage(tape, false);
        acfm_global_t(tape, yid, &nodes)
    })
}

/// Local branch as a plain function.
pub fn acfm_local<T: Scalar>(y: &Tensor4<T>, p: &AcfmParams<T>) -> Result<Tensor4<T>> {
    run_throwaway(y, |tape, yid| {
        let nodes = p.stage(tape, false);
        acfm_local_t(tape, yid, &nodes, p.shuffle_groups)
    })
}

/// Fused module as a plain function.
pub fn acfm_forward<T: Scalar>(y: &Tensor4<T>, p: &AcfmParams<T>) -> Result<Tensor4<T>> {
    run_throwaway(y, |tape, yid| {
        let nodes = p.stage(tape, false);
        acfm_forward_t(tape, yid, &nodes, p.shuffle_groups)
    })
}

/// The `(n, 1, c, c)` attention map the global branch would use on `y`.
pub fn acfm_attention_map<T: Scalar>(y: &Tensor4<T>, p: &AcfmParams<T>) -> Result<Tensor4<T>> {
    run_throwaway(y, |tape, yid| {
        let nodes = p.stage(tape, false);
        acfm_global_parts_t(tape, yid, &nodes).map(|(_, attn)| attn)
    })
}

/// Feed-forward as a plain function.
pub fn msnn_forward<T: Scalar>(x: &Tensor4<T>, p: &MsnnParams<T>) -> Result<Tensor4<T>> {
    run_throwaway(x, |tape, xid| {
        let nodes = p.stage(tape, false);
        msnn_forward_t(tape, xid, &nodes, p.dilations())
    })
}

/// Full block as a plain function.
pub fn caf_block_forward<T: Scalar>(x: &Tensor4<T>, p: &CafBlockParams<T>) -> Result<Tensor4<T>> {
    run_throwaway(x, |tape, xid| {
        let nodes = p.stage(tape, false);
        caf_block_forward_t(tape, xid, &nodes, &CafBlockHyper::of(p))
    })
}

/// Multiply count of the two attention matmuls when the map is c x c over
/// channel-major matrices.
pub fn channel_attention_mults(c: usize, hw: usize) -> u128 {
    2 * (c as u128) * (c as u128) * (hw as u128)
}

/// Multiply count of the same two matmuls if the map were (hw) x (hw) over
/// position-major matrices.
pub fn spatial_attention_mults(c: usize, hw: usize) -> u128 {
    2 * (hw as u128) * (hw as u128) * (c as u128)
}

/// Position-major attention over the same Q/K/V matrices: the (hw) x (hw)
/// map the channel-major design avoids. Kept as a benchmark baseline.
pub fn spatial_attention_reference<T: Scalar>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    alpha: T,
) -> Result<Tensor4<T>> {
    let (n, c, h, w) = q.shape();
    let hw = h * w;
    let qm = q.reshape((n, 1, c, hw))?;
    let km = k.reshape((n, 1, c, hw))?;
    let vm = v.reshape((n, 1, c, hw))?;
    // scores[s, t] = sum_c q[c, s] k[c, t]
    let scores = crate::tensor::matmul_tt(&qm, &km, true, false)?;
    let scaled = scores.map(|s| s / alpha);
    let attn = crate::tensor::softmax_lastdim(&scaled);
    // out[c, s] = sum_t v[c, t] attn[s, t]
    let out = crate::tensor::matmul_tt(&vm, &attn, false, true)?;
    out.reshape((n, c, h, w))
}
