//! Dense rank-4 tensors and the pointwise / matrix kernels built on them.
//!
//! A [`Tensor4`] is a contiguous row-major `(n, c, h, w)` array of floats.
//! Kernels are pure functions: they never mutate their inputs and identical
//! inputs produce bit-identical outputs.

use std::fmt;

use crate::error::{CoreError, Result};

/// Element type for all kernels: `f32` for forward/training work, `f64` for
/// the finite-difference reference paths.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    /// dtype tag used by the on-disk tensor format.
    const DTYPE: u8;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: u8 = 0;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 1;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense `(batch, channel, height, width)` tensor, row-major, contiguous.
#[derive(Clone, PartialEq)]
pub struct Tensor4<T> {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor4({}x{}x{}x{})", self.n, self.c, self.h, self.w)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor4<T> {
    /// Build a tensor from existing data. Errors if the element count does
    /// not match the shape or any dimension is zero.
    pub fn new(shape: (usize, usize, usize, usize), data: Vec<T>) -> Result<Self> {
        let (n, c, h, w) = shape;
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(CoreError::shape(
                "tensor4",
                format!("all dims must be >= 1, got {n}x{c}x{h}x{w}"),
            ));
        }
        let want = n * c * h * w;
        if data.len() != want {
            return Err(CoreError::shape(
                "tensor4",
                format!(
                    "data length {} != n*c*h*w = {} for shape {n}x{c}x{h}x{w}",
                    data.len(),
                    want
                ),
            ));
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn zeros(shape: (usize, usize, usize, usize)) -> Self {
        let (n, c, h, w) = shape;
        assert!(n >= 1 && c >= 1 && h >= 1 && w >= 1, "all dims must be >= 1");
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn filled(shape: (usize, usize, usize, usize), value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Single-element tensor, shape `(1,1,1,1)`.
    pub fn scalar(value: T) -> Self {
        Tensor4 {
            n: 1,
            c: 1,
            h: 1,
            w: 1,
            data: vec![value],
        }
    }

    /// Build from a generator over `(n, c, h, w)` indices.
    pub fn from_fn(
        shape: (usize, usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let mut t = Self::zeros(shape);
        let (n, c, h, w) = shape;
        let mut i = 0;
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        t.data[i] = f(ni, ci, hi, wi);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && h < self.h && w < self.w);
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut T {
        let i = self.idx(n, c, h, w);
        &mut self.data[i]
    }

    /// Contiguous `(n, c, h)` row of `w` elements.
    #[inline]
    pub fn row(&self, n: usize, c: usize, h: usize) -> &[T] {
        let base = (n * self.c + c) * self.h * self.w + h * self.w;
        &self.data[base..base + self.w]
    }

    /// Reinterpret as a new shape with the same element count and order.
    pub fn reshape(&self, shape: (usize, usize, usize, usize)) -> Result<Self> {
        let (n, c, h, w) = shape;
        if n * c * h * w != self.data.len() || n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(CoreError::shape(
                "reshape",
                format!(
                    "cannot view {} elements as {n}x{c}x{h}x{w}",
                    self.data.len()
                ),
            ));
        }
        Ok(Tensor4 {
            n,
            c,
            h,
            w,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Cast between element types through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }
}

/// Debug-build check that a kernel produced only finite values.
#[inline]
pub(crate) fn debug_assert_finite<T: Scalar>(t: &Tensor4<T>, op: &str) {
    debug_assert!(t.is_finite(), "{op} produced a non-finite value");
}

fn check_same_shape<T: Scalar>(
    op: &'static str,
    a: &Tensor4<T>,
    b: &Tensor4<T>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CoreError::shape(
            op,
            format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Elementwise `max(x, 0)`.
pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
    debug_assert_finite(&out, "relu");
    out
}

/// Elementwise sum of two equal-shaped tensors.
pub fn add<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_same_shape("add", a, b)?;
    let mut out = a.clone();
    for (o, &v) in out.data.iter_mut().zip(b.data.iter()) {
        *o += v;
    }
    debug_assert_finite(&out, "add");
    Ok(out)
}

/// Elementwise product of two equal-shaped tensors.
pub fn mul<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_same_shape("mul", a, b)?;
    let mut out = a.clone();
    for (o, &v) in out.data.iter_mut().zip(b.data.iter()) {
        *o *= v;
    }
    debug_assert_finite(&out, "mul");
    Ok(out)
}

/// Batched matrix product. Both operands are read as `n*c` stacked matrices
/// of shape `(h, w)`; transposition flags apply to the logical matrices.
/// The inner dimensions must agree after transposition.
pub fn matmul_tt<T: Scalar>(
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    trans_a: bool,
    trans_b: bool,
) -> Result<Tensor4<T>> {
    if a.n != b.n || a.c != b.c {
        return Err(CoreError::shape(
            "matmul",
            format!(
                "batch dims differ: {}x{} vs {}x{}",
                a.n, a.c, b.n, b.c
            ),
        ));
    }
    let (ar, ak) = if trans_a { (a.w, a.h) } else { (a.h, a.w) };
    let (bk, bc) = if trans_b { (b.w, b.h) } else { (b.h, b.w) };
    if ak != bk {
        return Err(CoreError::shape(
            "matmul",
            format!("inner dims differ: {ak} vs {bk}"),
        ));
    }
    let batches = a.n * a.c;
    let mut out = Tensor4::zeros((a.n, a.c, ar, bc));
    let a_plane = a.h * a.w;
    let b_plane = b.h * b.w;
    let o_plane = ar * bc;
    for bi in 0..batches {
        let am = &a.data[bi * a_plane..(bi + 1) * a_plane];
        let bm = &b.data[bi * b_plane..(bi + 1) * b_plane];
        let om = &mut out.data[bi * o_plane..(bi + 1) * o_plane];
        matmul_plane(am, bm, om, (a.h, a.w), (b.h, b.w), ar, ak, bc, trans_a, trans_b);
    }
    debug_assert_finite(&out, "matmul");
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn matmul_plane<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    a_dims: (usize, usize),
    b_dims: (usize, usize),
    rows: usize,
    inner: usize,
    cols: usize,
    trans_a: bool,
    trans_b: bool,
) {
    for r in 0..rows {
        for k in 0..inner {
            let av = if trans_a {
                a[k * a_dims.1 + r]
            } else {
                a[r * a_dims.1 + k]
            };
            if trans_b {
                for col in 0..cols {
                    out[r * cols + col] += av * b[col * b_dims.1 + k];
                }
            } else {
                let brow = &b[k * b_dims.1..k * b_dims.1 + cols];
                let orow = &mut out[r * cols..r * cols + cols];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// Plain (non-transposed) batched matrix product.
pub fn matmul<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    matmul_tt(a, b, false, false)
}

/// Row-wise softmax over the last (`w`) dimension, computed with per-row max
/// subtraction so large logits do not overflow.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let mut out = x.clone();
    for row in out.data.chunks_mut(x.w) {
        softmax_row(row);
    }
    debug_assert_finite(&out, "softmax_lastdim");
    out
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-position layer normalization over the channel dimension: at each
/// `(n, h, w)` the length-`c` channel vector is normalized to zero mean and
/// unit variance (stabilized by `eps`), then scaled by `gamma` and shifted
/// by `beta` (both length `c`, carried as `(1, c, 1, 1)` tensors).
pub fn layer_norm_channels<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &Tensor4<T>,
    beta: &Tensor4<T>,
    eps: T,
) -> Result<Tensor4<T>> {
    let c = x.c;
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != (1, c, 1, 1) {
            return Err(CoreError::shape(
                "layer_norm_channels",
                format!("{name} must have shape (1,{c},1,1), got {:?}", t.shape()),
            ));
        }
    }
    let (out, _, _) = layer_norm_channels_with_saved(x, gamma, beta, eps);
    debug_assert_finite(&out, "layer_norm_channels");
    Ok(out)
}

/// Layer norm forward that also returns the normalized values and reciprocal
/// standard deviations needed by the backward pass.
pub(crate) fn layer_norm_channels_with_saved<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &Tensor4<T>,
    beta: &Tensor4<T>,
    eps: T,
) -> (Tensor4<T>, Tensor4<T>, Vec<T>) {
    let (n, c, h, w) = x.shape();
    let plane = h * w;
    let cf = T::from_f64(c as f64);
    let mut out = Tensor4::zeros((n, c, h, w));
    let mut xhat = Tensor4::zeros((n, c, h, w));
    let mut inv_std = vec![T::zero(); n * plane];
    for ni in 0..n {
        for p in 0..plane {
            let base = ni * c * plane + p;
            let mut mean = T::zero();
            for ci in 0..c {
                mean += x.data[base + ci * plane];
            }
            mean /= cf;
            let mut var = T::zero();
            for ci in 0..c {
                let d = x.data[base + ci * plane] - mean;
                var += d * d;
            }
            var /= cf;
            let istd = (var + eps).sqrt().recip();
            inv_std[ni * plane + p] = istd;
            for ci in 0..c {
                let xh = (x.data[base + ci * plane] - mean) * istd;
                xhat.data[base + ci * plane] = xh;
                out.data[base + ci * plane] = xh * gamma.data[ci] + beta.data[ci];
            }
        }
    }
    (out, xhat, inv_std)
}

/// Reorder channels by viewing them as a `(g, c/g)` grid and transposing it.
/// Pure permutation: values are moved, never changed.
pub fn channel_shuffle<T: Scalar>(x: &Tensor4<T>, groups: usize) -> Result<Tensor4<T>> {
    if groups == 0 || x.c % groups != 0 {
        return Err(CoreError::GroupMismatch {
            op: "channel_shuffle",
            channels: x.c,
            groups,
        });
    }
    let perm = shuffle_permutation(x.c, groups);
    Ok(apply_channel_permutation(x, &perm))
}

/// Destination channel for each source channel under the reshape-transpose
/// shuffle: source channel `i` lands at `(i % (c/g)) * g + i / (c/g)`.
pub fn shuffle_permutation(c: usize, groups: usize) -> Vec<usize> {
    let m = c / groups;
    (0..c).map(|i| (i % m) * groups + i / m).collect()
}

/// Move channel `i` of `x` to channel `perm[i]` of the output.
pub(crate) fn apply_channel_permutation<T: Scalar>(
    x: &Tensor4<T>,
    perm: &[usize],
) -> Tensor4<T> {
    let (n, c, h, w) = x.shape();
    let plane = h * w;
    let mut out = Tensor4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let src = (ni * c + ci) * plane;
            let dst = (ni * c + perm[ci]) * plane;
            out.data[dst..dst + plane].copy_from_slice(&x.data[src..src + plane]);
        }
    }
    out
}

/// Invert a permutation given as `i -> perm[i]`.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Axis permutation of the `(n, c, h, w)` dimensions. `perm[i]` names which
/// source axis becomes output axis `i`; `[0,1,2,3]` is the identity.
pub fn permute<T: Scalar>(x: &Tensor4<T>, perm: [usize; 4]) -> Result<Tensor4<T>> {
    let mut seen = [false; 4];
    for &p in &perm {
        if p > 3 || seen[p] {
            return Err(CoreError::shape(
                "permute",
                format!("{perm:?} is not a permutation of the four axes"),
            ));
        }
        seen[p] = true;
    }
    let dims = [x.n, x.c, x.h, x.w];
    let out_dims = [dims[perm[0]], dims[perm[1]], dims[perm[2]], dims[perm[3]]];
    let mut out = Tensor4::zeros((out_dims[0], out_dims[1], out_dims[2], out_dims[3]));
    let strides = [x.c * x.h * x.w, x.h * x.w, x.w, 1];
    let mut o = 0;
    for i0 in 0..out_dims[0] {
        for i1 in 0..out_dims[1] {
            for i2 in 0..out_dims[2] {
                for i3 in 0..out_dims[3] {
                    let idx = [i0, i1, i2, i3];
                    let src = idx[0] * strides[perm[0]]
                        + idx[1] * strides[perm[1]]
                        + idx[2] * strides[perm[2]]
                        + idx[3] * strides[perm[3]];
                    out.data[o] = x.data[src];
                    o += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Sum of all elements.
pub fn sum_all<T: Scalar>(x: &Tensor4<T>) -> T {
    let mut s = T::zero();
    for &v in x.data.iter() {
        s += v;
    }
    s
}

/// Concatenate along the batch axis. All parts must agree on `(c, h, w)`.
pub fn concat_n<T: Scalar>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = parts
        .first()
        .ok_or_else(|| CoreError::shape("concat_n", "no tensors to concatenate"))?;
    let (c, h, w) = (first.c(), first.h(), first.w());
    let mut n = 0;
    for p in parts {
        if (p.c(), p.h(), p.w()) != (c, h, w) {
            return Err(CoreError::shape(
                "concat_n",
                format!(
                    "item shape {:?} does not match first item {:?}",
                    p.shape(),
                    first.shape()
                ),
            ));
        }
        n += p.n();
    }
    let mut data = Vec::with_capacity(n * c * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor4::new((n, c, h, w), data)
}
