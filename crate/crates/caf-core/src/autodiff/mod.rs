//! Tape-based reverse-mode differentiation over the tensor ops.
//!
//! A [`Tape`] records each op as it runs forward, keeping the output value
//! (and whatever else backward needs) per node. Node ids are indices into
//! the tape, so inputs always precede consumers and one reverse sweep
//! computes every gradient. A tape runs backward once; fan-out gradients
//! accumulate additively.

pub mod gradcheck;

use crate::conv::{self, Conv2dGeom};
use crate::error::{CoreError, Result};
use crate::tensor::{
    self, apply_channel_permutation, invert_permutation, shuffle_permutation, Scalar, Tensor4,
};

/// Index of a recorded node on its tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    },
    SoftmaxRows(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        geom: Conv2dGeom,
    },
    Conv3d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        padding: (usize, usize, usize),
        groups: usize,
    },
    Shuffle {
        x: NodeId,
        groups: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor4<T>,
        inv_std: Vec<T>,
    },
    Reshape(NodeId),
    SliceCh {
        x: NodeId,
        start: usize,
    },
    Exp(NodeId),
    DivByScalar {
        x: NodeId,
        s: NodeId,
    },
    Scale {
        x: NodeId,
        k: T,
    },
    SumAll(NodeId),
    BceWithLogitsMean {
        logits: NodeId,
        targets: Tensor4<T>,
    },
    MaskedL1Mean {
        pred: NodeId,
        target: Tensor4<T>,
        mask: Tensor4<T>,
        count: usize,
    },
    MaskedCeMean {
        logits: NodeId,
        onehot: Tensor4<T>,
        mask: Tensor4<T>,
        count: usize,
    },
}

struct Node<T: Scalar> {
    value: Tensor4<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Gradients from one backward pass, indexed by [`NodeId`]. Nodes that the
/// loss does not depend on (or that were recorded as constants) hold `None`.
pub struct GradStore<T: Scalar> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor4<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor4<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor4<T>>, delta: Tensor4<T>) {
    match slot {
        Some(acc) => {
            debug_assert_eq!(acc.shape(), delta.shape());
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data().iter()) {
                *a += *d;
            }
        }
        None => *slot = Some(delta),
    }
}

/// Recorded forward computation. Build leaves with [`Tape::leaf`] (constants)
/// or [`Tape::param`] (differentiated), compose ops, then call
/// [`Tape::backward`] on a scalar node.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    spent: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            spent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed at `id` during the forward pass.
    pub fn value(&self, id: NodeId) -> &Tensor4<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor4<T>, needs_grad: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Record a constant input; no gradient will be computed for it.
    pub fn leaf(&mut self, value: Tensor4<T>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Record a parameter leaf; backward produces its gradient.
    pub fn param(&mut self, value: Tensor4<T>) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::add(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, needs, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::mul(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, needs, Op::Mul(a, b)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = tensor::relu(self.value(x));
        let needs = self.needs(x);
        self.push(v, needs, Op::Relu(x))
    }

    /// Batched matrix product over the stacked `(h, w)` planes, with
    /// optional transposition of either operand.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> Result<NodeId> {
        let v = tensor::matmul_tt(self.value(a), self.value(b), trans_a, trans_b)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            v,
            needs,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
        ))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = tensor::softmax_lastdim(self.value(x));
        let needs = self.needs(x);
        self.push(v, needs, Op::SoftmaxRows(x))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        geom: Conv2dGeom,
    ) -> Result<NodeId> {
        if let Some(b) = &bias {
            let bs = self.value(*b).shape();
            if bs != (1, self.value(w).n(), 1, 1) {
                return Err(CoreError::shape(
                    "conv2d",
                    format!("bias node shape {bs:?} is not (1, out_ch, 1, 1)"),
                ));
            }
        }
        let v = conv::conv2d_raw(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b).data()),
            &geom,
            false,
        )?;
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(v, needs, Op::Conv2d { x, w, bias, geom }))
    }

    /// Singleton-depth 3x3x3 convolution; `w` holds packed rank-5 weights as
    /// built by [`crate::conv::Conv3Spec::new`].
    pub fn conv3d_singleton(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        padding: (usize, usize, usize),
        groups: usize,
    ) -> Result<NodeId> {
        if let Some(b) = &bias {
            let bs = self.value(*b).shape();
            if bs != (1, self.value(w).n(), 1, 1) {
                return Err(CoreError::shape(
                    "conv3d_singleton",
                    format!("bias node shape {bs:?} is not (1, out_ch, 1, 1)"),
                ));
            }
        }
        let v = conv::conv3d_raw(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b).data()),
            padding,
            groups,
            false,
        )?;
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            v,
            needs,
            Op::Conv3d {
                x,
                w,
                bias,
                padding,
                groups,
            },
        ))
    }

    pub fn channel_shuffle(&mut self, x: NodeId, groups: usize) -> Result<NodeId> {
        let v = tensor::channel_shuffle(self.value(x), groups)?;
        let needs = self.needs(x);
        Ok(self.push(v, needs, Op::Shuffle { x, groups }))
    }

    /// Channel-axis layer norm; `gamma` and `beta` are `(1, c, 1, 1)`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let c = self.value(x).c();
        for (name, t) in [("gamma", gamma), ("beta", beta)] {
            let s = self.value(t).shape();
            if s != (1, c, 1, 1) {
                return Err(CoreError::shape(
                    "layer_norm",
                    format!("{name} must have shape (1,{c},1,1), got {s:?}"),
                ));
            }
        }
        let (v, xhat, inv_std) = tensor::layer_norm_channels_with_saved(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            T::from_f64(eps),
        );
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            v,
            needs,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: (usize, usize, usize, usize)) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(v, needs, Op::Reshape(x)))
    }

    /// Channels `[start, start+len)` of `x` as a new tensor.
    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if len == 0 || start + len > xv.c() {
            return Err(CoreError::shape(
                "slice_channels",
                format!(
                    "slice [{start}, {}) out of {} channels",
                    start + len,
                    xv.c()
                ),
            ));
        }
        let (n, _, h, w) = xv.shape();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for ni in 0..n {
            let base = (ni * xv.c() + start) * plane;
            data.extend_from_slice(&xv.data()[base..base + len * plane]);
        }
        let v = Tensor4::new((n, len, h, w), data)?;
        let needs = self.needs(x);
        Ok(self.push(v, needs, Op::SliceCh { x, start }))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|t| t.exp());
        let needs = self.needs(x);
        self.push(v, needs, Op::Exp(x))
    }

    /// Divide every element of `x` by the scalar node `s` (shape (1,1,1,1)).
    pub fn div_by_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(CoreError::shape(
                "div_by_scalar",
                format!("divisor has shape {:?}, expected a scalar", sv.shape()),
            ));
        }
        let d = sv.data()[0];
        let v = self.value(x).map(|t| t / d);
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(v, needs, Op::DivByScalar { x, s }))
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> NodeId {
        let v = self.value(x).map(|t| t * k);
        let needs = self.needs(x);
        self.push(v, needs, Op::Scale { x, k })
    }

    /// Sum of all elements, as a `(1,1,1,1)` tensor.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor4::scalar(tensor::sum_all(self.value(x)));
        let needs = self.needs(x);
        self.push(v, needs, Op::SumAll(x))
    }

    /// Mean binary cross-entropy between `logits` and constant `targets`,
    /// computed in the numerically stable logits form.
    pub fn bce_with_logits_mean(&mut self, logits: NodeId, targets: Tensor4<T>) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(CoreError::shape(
                "bce_with_logits_mean",
                format!("logits {:?} vs targets {:?}", lv.shape(), targets.shape()),
            ));
        }
        let mut acc = 0.0f64;
        for (&l, &t) in lv.data().iter().zip(targets.data().iter()) {
            let lf = l.to_f64();
            let tf = t.to_f64();
            acc += lf.max(0.0) - lf * tf + (-lf.abs()).exp().ln_1p();
        }
        let v = Tensor4::scalar(T::from_f64(acc / lv.numel() as f64));
        let needs = self.needs(logits);
        Ok(self.push(v, needs, Op::BceWithLogitsMean { logits, targets }))
    }

    /// Mean absolute error over the elements where `mask` is nonzero.
    /// Zero (with zero gradient) when the mask is empty.
    pub fn masked_l1_mean(
        &mut self,
        pred: NodeId,
        target: Tensor4<T>,
        mask: Tensor4<T>,
    ) -> Result<NodeId> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || pv.shape() != mask.shape() {
            return Err(CoreError::shape(
                "masked_l1_mean",
                format!(
                    "pred {:?} vs target {:?} vs mask {:?}",
                    pv.shape(),
                    target.shape(),
                    mask.shape()
                ),
            ));
        }
        let count = mask.data().iter().filter(|&&m| m != T::zero()).count();
        let mut acc = 0.0f64;
        if count > 0 {
            for ((&p, &t), &m) in pv
                .data()
                .iter()
                .zip(target.data().iter())
                .zip(mask.data().iter())
            {
                if m != T::zero() {
                    acc += (p.to_f64() - t.to_f64()).abs();
                }
            }
            acc /= count as f64;
        }
        let v = Tensor4::scalar(T::from_f64(acc));
        let needs = self.needs(pred);
        Ok(self.push(
            v,
            needs,
            Op::MaskedL1Mean {
                pred,
                target,
                mask,
                count,
            },
        ))
    }

    /// Mean channel-axis cross-entropy from `logits` against one-hot
    /// `onehot`, restricted to spatial sites where `mask` (shape
    /// `(n, 1, h, w)`) is nonzero. Zero when the mask is empty.
    pub fn masked_ce_mean(
        &mut self,
        logits: NodeId,
        onehot: Tensor4<T>,
        mask: Tensor4<T>,
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.shape() != onehot.shape() {
            return Err(CoreError::shape(
                "masked_ce_mean",
                format!("logits {:?} vs onehot {:?}", lv.shape(), onehot.shape()),
            ));
        }
        if mask.shape() != (lv.n(), 1, lv.h(), lv.w()) {
            return Err(CoreError::shape(
                "masked_ce_mean",
                format!(
                    "mask {:?}, expected ({}, 1, {}, {})",
                    mask.shape(),
                    lv.n(),
                    lv.h(),
                    lv.w()
                ),
            ));
        }
        let count = mask.data().iter().filter(|&&m| m != T::zero()).count();
        let mut acc = 0.0f64;
        if count > 0 {
            let (n, c, h, w) = lv.shape();
            let plane = h * w;
            for ni in 0..n {
                for p in 0..plane {
                    if mask.data()[ni * plane + p] == T::zero() {
                        continue;
                    }
                    let site = |ci: usize| lv.data()[(ni * c + ci) * plane + p].to_f64();
                    let mx = (0..c).map(site).fold(f64::NEG_INFINITY, f64::max);
                    let logz = (0..c).map(|ci| (site(ci) - mx).exp()).sum::<f64>().ln() + mx;
                    for ci in 0..c {
                        let t = onehot.data()[(ni * c + ci) * plane + p].to_f64();
                        if t != 0.0 {
                            acc += t * (logz - site(ci));
                        }
                    }
                }
            }
            acc /= count as f64;
        }
        let v = Tensor4::scalar(T::from_f64(acc));
        let needs = self.needs(logits);
        Ok(self.push(
            v,
            needs,
            Op::MaskedCeMean {
                logits,
                onehot,
                mask,
                count,
            },
        ))
    }

    /// Reverse sweep from the scalar node `loss`. Consumes the tape's one
    /// backward pass; forward values stay readable afterwards.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradStore<T>> {
        if self.nodes.is_empty() {
            return Err(CoreError::EmptyTape);
        }
        if self.spent {
            return Err(CoreError::TapeConsumed);
        }
        let loss_shape = self.value(loss).shape();
        if loss_shape != (1, 1, 1, 1) {
            return Err(CoreError::NonScalarLoss { shape: loss_shape });
        }
        self.spent = true;
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let g = upper[0].as_ref().expect("checked above");
            self.backprop_node(i, g, lower)?;
        }
        Ok(GradStore { grads })
    }

    /// Push the gradient `g` of node `i` into the gradient slots of its
    /// inputs (all of which have ids < i).
    fn backprop_node(&self, i: usize, g: &Tensor4<T>, grads: &mut [Option<Tensor4<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], tensor::mul(g, self.value(*b))?);
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], tensor::mul(g, self.value(*a))?);
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let mut dx = g.clone();
                    for (d, &xi) in dx.data_mut().iter_mut().zip(xv.data().iter()) {
                        if xi <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = if *trans_a {
                        tensor::matmul_tt(bv, g, *trans_b, true)?
                    } else {
                        tensor::matmul_tt(g, bv, false, !*trans_b)?
                    };
                    accumulate(&mut grads[a.0], da);
                }
                if self.needs(*b) {
                    let db = if *trans_b {
                        tensor::matmul_tt(g, av, true, *trans_a)?
                    } else {
                        tensor::matmul_tt(av, g, !*trans_a, false)?
                    };
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::SoftmaxRows(x) => {
                if self.needs(*x) {
                    let y = &node.value;
                    let mut dx = Tensor4::zeros(y.shape());
                    let w = y.w();
                    for ((drow, yrow), grow) in dx
                        .data_mut()
                        .chunks_mut(w)
                        .zip(y.data().chunks(w))
                        .zip(g.data().chunks(w))
                    {
                        let mut dot = T::zero();
                        for (&yv, &gv) in yrow.iter().zip(grow.iter()) {
                            dot += yv * gv;
                        }
                        for ((d, &yv), &gv) in drow.iter_mut().zip(yrow.iter()).zip(grow.iter()) {
                            *d = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Conv2d { x, w, bias, geom } => {
                let want_db = bias.map(|b| self.needs(b)).unwrap_or(false);
                let out = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    geom,
                    self.needs(*x),
                    self.needs(*w),
                    want_db,
                )?;
                if let Some(dx) = out.dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if let Some(dw) = out.dw {
                    accumulate(&mut grads[w.0], dw);
                }
                if let (Some(db), Some(b)) = (out.db, bias) {
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Conv3d {
                x,
                w,
                bias,
                padding,
                groups,
            } => {
                let want_db = bias.map(|b| self.needs(b)).unwrap_or(false);
                let out = conv::conv3d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *padding,
                    *groups,
                    self.needs(*x),
                    self.needs(*w),
                    want_db,
                )?;
                if let Some(dx) = out.dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if let Some(dw) = out.dw {
                    accumulate(&mut grads[w.0], dw);
                }
                if let (Some(db), Some(b)) = (out.db, bias) {
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Shuffle { x, groups } => {
                if self.needs(*x) {
                    let perm = shuffle_permutation(g.c(), *groups);
                    let inv = invert_permutation(&perm);
                    accumulate(&mut grads[x.0], apply_channel_permutation(g, &inv));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = xhat.shape();
                let plane = h * w;
                let gv = self.value(*gamma);
                if self.needs(*gamma) {
                    let mut dgamma = Tensor4::zeros((1, c, 1, 1));
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let mut acc = T::zero();
                            for p in 0..plane {
                                acc += g.data()[base + p] * xhat.data()[base + p];
                            }
                            dgamma.data_mut()[ci] += acc;
                        }
                    }
                    accumulate(&mut grads[gamma.0], dgamma);
                }
                if self.needs(*beta) {
                    let mut dbeta = Tensor4::zeros((1, c, 1, 1));
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let mut acc = T::zero();
                            for p in 0..plane {
                                acc += g.data()[base + p];
                            }
                            dbeta.data_mut()[ci] += acc;
                        }
                    }
                    accumulate(&mut grads[beta.0], dbeta);
                }
                if self.needs(*x) {
                    let mut dx = Tensor4::zeros((n, c, h, w));
                    let cf = T::from_f64(c as f64);
                    for ni in 0..n {
                        for p in 0..plane {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for ci in 0..c {
                                let o = (ni * c + ci) * plane + p;
                                let dxhat = g.data()[o] * gv.data()[ci];
                                m1 += dxhat;
                                m2 += dxhat * xhat.data()[o];
                            }
                            m1 /= cf;
                            m2 /= cf;
                            let istd = inv_std[ni * plane + p];
                            for ci in 0..c {
                                let o = (ni * c + ci) * plane + p;
                                let dxhat = g.data()[o] * gv.data()[ci];
                                dx.data_mut()[o] = istd * (dxhat - m1 - xhat.data()[o] * m2);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], g.reshape(self.value(*x).shape())?);
                }
            }
            Op::SliceCh { x, start } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let (n, c, h, w) = xv.shape();
                    let plane = h * w;
                    let len = g.c();
                    let mut dx = Tensor4::zeros((n, c, h, w));
                    for ni in 0..n {
                        let src = ni * len * plane;
                        let dst = (ni * c + start) * plane;
                        dx.data_mut()[dst..dst + len * plane]
                            .copy_from_slice(&g.data()[src..src + len * plane]);
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Exp(x) => {
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], tensor::mul(g, &node.value)?);
                }
            }
            Op::DivByScalar { x, s } => {
                let sv = self.value(*s).data()[0];
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], g.map(|t| t / sv));
                }
                if self.needs(*s) {
                    let mut acc = T::zero();
                    for (&gv, &yv) in g.data().iter().zip(node.value.data().iter()) {
                        acc += gv * yv;
                    }
                    accumulate(&mut grads[s.0], Tensor4::scalar(-acc / sv));
                }
            }
            Op::Scale { x, k } => {
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], g.map(|t| t * *k));
                }
            }
            Op::SumAll(x) => {
                if self.needs(*x) {
                    let gs = g.data()[0];
                    accumulate(&mut grads[x.0], Tensor4::filled(self.value(*x).shape(), gs));
                }
            }
            Op::BceWithLogitsMean { logits, targets } => {
                if self.needs(*logits) {
                    let lv = self.value(*logits);
                    let scale = g.data()[0].to_f64() / lv.numel() as f64;
                    let mut dl = Tensor4::zeros(lv.shape());
                    for ((d, &l), &t) in dl
                        .data_mut()
                        .iter_mut()
                        .zip(lv.data().iter())
                        .zip(targets.data().iter())
                    {
                        let lf = l.to_f64();
                        let sig = 1.0 / (1.0 + (-lf).exp());
                        *d = T::from_f64((sig - t.to_f64()) * scale);
                    }
                    accumulate(&mut grads[logits.0], dl);
                }
            }
            Op::MaskedL1Mean {
                pred,
                target,
                mask,
                count,
            } => {
                if self.needs(*pred) && *count > 0 {
                    let pv = self.value(*pred);
                    let scale = g.data()[0] / T::from_f64(*count as f64);
                    let mut dp = Tensor4::zeros(pv.shape());
                    for (((d, &p), &t), &m) in dp
                        .data_mut()
                        .iter_mut()
                        .zip(pv.data().iter())
                        .zip(target.data().iter())
                        .zip(mask.data().iter())
                    {
                        if m != T::zero() {
                            let diff = p - t;
                            if diff > T::zero() {
                                *d = scale;
                            } else if diff < T::zero() {
                                *d = -scale;
                            }
                        }
                    }
                    accumulate(&mut grads[pred.0], dp);
                }
            }
            Op::MaskedCeMean {
                logits,
                onehot,
                mask,
                count,
            } => {
                if self.needs(*logits) && *count > 0 {
                    let lv = self.value(*logits);
                    let (n, c, h, w) = lv.shape();
                    let plane = h * w;
                    let scale = g.data()[0].to_f64() / *count as f64;
                    let mut dl = Tensor4::zeros(lv.shape());
                    for ni in 0..n {
                        for p in 0..plane {
                            if mask.data()[ni * plane + p] == T::zero() {
                                continue;
                            }
                            let site = |ci: usize| lv.data()[(ni * c + ci) * plane + p].to_f64();
                            let mx = (0..c).map(site).fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = (0..c).map(|ci| (site(ci) - mx).exp()).sum();
                            for ci in 0..c {
                                let o = (ni * c + ci) * plane + p;
                                let prob = (site(ci) - mx).exp() / z;
                                let t = onehot.data()[o].to_f64();
                                dl.data_mut()[o] = T::from_f64((prob - t) * scale);
                            }
                        }
                    }
                    accumulate(&mut grads[logits.0], dl);
                }
            }
        }
        Ok(())
    }
}
