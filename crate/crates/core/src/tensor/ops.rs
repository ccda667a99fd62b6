use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::{numel_of, Tensor};
use crate::error::{shape_err, Error, Result};

/// The closed set of differentiable operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale,
    Matmul,
    Exp,
    Softplus,
    Silu,
    Tanh,
    Relu,
    Transpose,
    ReverseAxis,
    Reshape,
    ReduceMean,
    ReduceSum,
    SoftmaxLastAxis,
    LayernormLastAxis,
    DepthwiseCausalConv1d,
    Broadcast,
    Slice,
    Concat,
    TopkMask,
    SelectiveScan,
    SelectiveScanFused,
}

impl Primitive {
    pub const ALL: [Primitive; 24] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Matmul,
        Primitive::Exp,
        Primitive::Softplus,
        Primitive::Silu,
        Primitive::Tanh,
        Primitive::Relu,
        Primitive::Transpose,
        Primitive::ReverseAxis,
        Primitive::Reshape,
        Primitive::ReduceMean,
        Primitive::ReduceSum,
        Primitive::SoftmaxLastAxis,
        Primitive::LayernormLastAxis,
        Primitive::DepthwiseCausalConv1d,
        Primitive::Broadcast,
        Primitive::Slice,
        Primitive::Concat,
        Primitive::TopkMask,
        Primitive::SelectiveScan,
        Primitive::SelectiveScanFused,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Matmul => "matmul",
            Primitive::Exp => "exp",
            Primitive::Softplus => "softplus",
            Primitive::Silu => "silu",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Transpose => "transpose",
            Primitive::ReverseAxis => "reverse_axis",
            Primitive::Reshape => "reshape",
            Primitive::ReduceMean => "reduce_mean",
            Primitive::ReduceSum => "reduce_sum",
            Primitive::SoftmaxLastAxis => "softmax_lastaxis",
            Primitive::LayernormLastAxis => "layernorm_lastaxis",
            Primitive::DepthwiseCausalConv1d => "depthwise_causal_conv1d",
            Primitive::Broadcast => "broadcast",
            Primitive::Slice => "slice",
            Primitive::Concat => "concat",
            Primitive::TopkMask => "topk_mask",
            Primitive::SelectiveScan => "selective_scan",
            Primitive::SelectiveScanFused => "selective_scan_fused",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPrimitive(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Ints(Vec<i64>),
    Bool(bool),
}

impl From<i64> for AttrValue {
    fn from(v: i64) -> Self {
        AttrValue::Int(v)
    }
}

impl From<usize> for AttrValue {
    fn from(v: usize) -> Self {
        AttrValue::Int(v as i64)
    }
}

impl From<f64> for AttrValue {
    fn from(v: f64) -> Self {
        AttrValue::Float(v)
    }
}

impl From<bool> for AttrValue {
    fn from(v: bool) -> Self {
        AttrValue::Bool(v)
    }
}

impl From<&[usize]> for AttrValue {
    fn from(v: &[usize]) -> Self {
        AttrValue::Ints(v.iter().map(|&x| x as i64).collect())
    }
}

impl From<Vec<usize>> for AttrValue {
    fn from(v: Vec<usize>) -> Self {
        AttrValue::from(v.as_slice())
    }
}

/// Named attributes for [`apply_primitive`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Attrs(BTreeMap<String, AttrValue>);

impl Attrs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: impl Into<AttrValue>) -> Self {
        self.0.insert(name.to_string(), value.into());
        self
    }

    fn bad(p: Primitive, name: &str, detail: impl Into<String>) -> Error {
        Error::Attribute {
            primitive: p.name(),
            name: name.to_string(),
            detail: detail.into(),
        }
    }

    fn opt_usize(&self, p: Primitive, name: &str) -> Result<Option<usize>> {
        match self.0.get(name) {
            None => Ok(None),
            Some(AttrValue::Int(v)) if *v >= 0 => Ok(Some(*v as usize)),
            Some(other) => Err(Self::bad(
                p,
                name,
                format!("expected a non-negative integer, got {other:?}"),
            )),
        }
    }

    fn usize(&self, p: Primitive, name: &str) -> Result<usize> {
        self.opt_usize(p, name)?.ok_or_else(|| Self::bad(p, name, "missing"))
    }

    fn f64_or(&self, p: Primitive, name: &str, default: f64) -> Result<f64> {
        match self.0.get(name) {
            None => Ok(default),
            Some(AttrValue::Float(v)) => Ok(*v),
            Some(AttrValue::Int(v)) => Ok(*v as f64),
            Some(other) => Err(Self::bad(p, name, format!("expected a number, got {other:?}"))),
        }
    }

    fn bool_or(&self, p: Primitive, name: &str, default: bool) -> Result<bool> {
        match self.0.get(name) {
            None => Ok(default),
            Some(AttrValue::Bool(v)) => Ok(*v),
            Some(other) => Err(Self::bad(p, name, format!("expected a bool, got {other:?}"))),
        }
    }

    fn dims(&self, p: Primitive, name: &str) -> Result<Vec<usize>> {
        match self.0.get(name) {
            Some(AttrValue::Ints(v)) if v.iter().all(|&x| x >= 0) => Ok(v.iter().map(|&x| x as usize).collect()),
            Some(other) => Err(Self::bad(p, name, format!("expected a list of dims, got {other:?}"))),
            None => Err(Self::bad(p, name, "missing")),
        }
    }
}

/// Applies a primitive by name. Records a backward rule when any input
/// requires gradients.
pub fn apply_primitive(name: &str, inputs: &[&Tensor], attrs: &Attrs) -> Result<Tensor> {
    let p: Primitive = name.parse()?;
    let arity = |n: usize| -> Result<()> {
        if inputs.len() != n {
            return Err(shape_err(
                p.name(),
                format!("expected {n} inputs, got {}", inputs.len()),
            ));
        }
        Ok(())
    };
    match p {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            arity(2)?;
            binary_exact(p, inputs[0], inputs[1])
        }
        Primitive::Scale => {
            arity(1)?;
            inputs[0].scale(attrs.f64_or(p, "factor", 1.0)?)
        }
        Primitive::Matmul => {
            arity(2)?;
            inputs[0].matmul(inputs[1])
        }
        Primitive::Exp => {
            arity(1)?;
            inputs[0].exp()
        }
        Primitive::Softplus => {
            arity(1)?;
            inputs[0].softplus()
        }
        Primitive::Silu => {
            arity(1)?;
            inputs[0].silu()
        }
        Primitive::Tanh => {
            arity(1)?;
            inputs[0].tanh()
        }
        Primitive::Relu => {
            arity(1)?;
            inputs[0].relu()
        }
        Primitive::Transpose => {
            arity(1)?;
            let axes = attrs.dims(p, "axes")?;
            if axes.len() != 2 {
                return Err(Attrs::bad(p, "axes", "expected exactly two axes"));
            }
            inputs[0].transpose(axes[0], axes[1])
        }
        Primitive::ReverseAxis => {
            arity(1)?;
            inputs[0].reverse_axis(attrs.usize(p, "axis")?)
        }
        Primitive::Reshape => {
            arity(1)?;
            inputs[0].reshape(&attrs.dims(p, "shape")?)
        }
        Primitive::ReduceMean | Primitive::ReduceSum => {
            arity(1)?;
            let keepdim = attrs.bool_or(p, "keepdim", false)?;
            reduce(p, inputs[0], attrs.opt_usize(p, "axis")?, keepdim)
        }
        Primitive::SoftmaxLastAxis => {
            arity(1)?;
            inputs[0].softmax_last()
        }
        Primitive::LayernormLastAxis => {
            arity(3)?;
            inputs[0].layernorm_last(inputs[1], inputs[2], attrs.f64_or(p, "eps", 1e-5)?)
        }
        Primitive::DepthwiseCausalConv1d => {
            arity(3)?;
            inputs[0].causal_conv1d(inputs[1], inputs[2])
        }
        Primitive::Broadcast => {
            arity(1)?;
            inputs[0].broadcast_to(&attrs.dims(p, "shape")?)
        }
        Primitive::Slice => {
            arity(1)?;
            inputs[0].slice(
                attrs.usize(p, "axis")?,
                attrs.usize(p, "start")?,
                attrs.usize(p, "end")?,
            )
        }
        Primitive::Concat => Tensor::concat(inputs, attrs.usize(p, "axis")?),
        Primitive::TopkMask => {
            arity(1)?;
            inputs[0].topk_mask(attrs.usize(p, "k")?)
        }
        Primitive::SelectiveScan => {
            arity(4)?;
            Tensor::selective_scan(inputs[0], inputs[1], inputs[2], inputs[3])
        }
        Primitive::SelectiveScanFused => {
            arity(5)?;
            Tensor::selective_scan_fused(inputs[0], inputs[1], inputs[2], inputs[3], inputs[4])
        }
    }
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Flat source offset for every element of `out_shape` in row-major order.
fn gather_map(out_shape: &[usize], in_strides: &[usize]) -> Vec<usize> {
    let n = numel_of(out_shape);
    let nd = out_shape.len();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += in_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= in_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel_of(&shape[..axis]), shape[axis], numel_of(&shape[axis + 1..]))
}

fn check_axis(p: Primitive, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err(
            p.name(),
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(shape_err(
                    "broadcast",
                    format!("shapes {a:?} and {b:?} disagree on axis {i} ({da} vs {db})"),
                ))
            }
        };
    }
    Ok(out)
}

fn binary_exact(p: Primitive, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        let axes: Vec<usize> = if a.ndim() == b.ndim() {
            (0..a.ndim()).filter(|&i| a.dim(i) != b.dim(i)).collect()
        } else {
            Vec::new()
        };
        return Err(shape_err(
            p.name(),
            format!("operands {:?} and {:?} differ (axes {:?})", a.shape(), b.shape(), axes),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = match p {
        Primitive::Add => ad.iter().zip(bd).map(|(x, y)| x + y).collect(),
        Primitive::Sub => ad.iter().zip(bd).map(|(x, y)| x - y).collect(),
        Primitive::Mul => ad.iter().zip(bd).map(|(x, y)| x * y).collect(),
        _ => unreachable!("not a binary elementwise primitive"),
    };
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        p,
        a.shape().to_vec(),
        data,
        &[a, b],
        Box::new(move |g, need| {
            let ga = need[0].then(|| match p {
                Primitive::Mul => g.iter().zip(bc.data()).map(|(g, y)| g * y).collect(),
                _ => g.to_vec(),
            });
            let gb = need[1].then(|| match p {
                Primitive::Add => g.to_vec(),
                Primitive::Sub => g.iter().map(|g| -g).collect(),
                _ => g.iter().zip(ac.data()).map(|(g, x)| g * x).collect(),
            });
            vec![ga, gb]
        }),
    ))
}

fn unary(p: Primitive, x: &Tensor, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'static) -> Result<Tensor> {
    let data = x.data().iter().map(|&v| f(v)).collect();
    let xc = x.clone();
    Ok(Tensor::from_op(
        p,
        x.shape().to_vec(),
        data,
        &[x],
        Box::new(move |g, _| vec![Some(g.iter().zip(xc.data()).map(|(g, &v)| g * df(v)).collect())]),
    ))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn reduce(p: Primitive, x: &Tensor, axis: Option<usize>, keepdim: bool) -> Result<Tensor> {
    let (outer, n, inner, out_shape) = match axis {
        None => (1, x.numel(), 1, if keepdim { vec![1; x.ndim()] } else { Vec::new() }),
        Some(a) => {
            check_axis(p, x.shape(), a)?;
            let (o, n, i) = split_at_axis(x.shape(), a);
            let mut s = x.shape().to_vec();
            if keepdim {
                s[a] = 1;
            } else {
                s.remove(a);
            }
            (o, n, i, s)
        }
    };
    let scale = if p == Primitive::ReduceMean {
        1.0 / n as f64
    } else {
        1.0
    };
    let xd = x.data();
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..n {
            let src = &xd[(o * n + i) * inner..(o * n + i + 1) * inner];
            let dst = &mut data[o * inner..(o + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    if scale != 1.0 {
        data.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(Tensor::from_op(
        p,
        out_shape,
        data,
        &[x],
        Box::new(move |g, _| {
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for i in 0..n {
                    let dst = &mut gx[(o * n + i) * inner..(o * n + i + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                        *d = s * scale;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Indices of the `k` largest entries of `row`, ascending. Ties go to the
/// lower index.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

impl Tensor {
    /// Elementwise sum with broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = broadcast_pair(self, other)?;
        binary_exact(Primitive::Add, &a, &b)
    }

    /// Elementwise difference with broadcasting.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = broadcast_pair(self, other)?;
        binary_exact(Primitive::Sub, &a, &b)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = broadcast_pair(self, other)?;
        binary_exact(Primitive::Mul, &a, &b)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * factor).collect();
        Ok(Tensor::from_op(
            Primitive::Scale,
            self.shape().to_vec(),
            data,
            &[self],
            Box::new(move |g, _| vec![Some(g.iter().map(|g| g * factor).collect())]),
        ))
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Result<Tensor> {
        binary_exact(Primitive::Mul, self, self)
    }

    /// Batched matrix product over the last two axes. A 2-D operand is shared
    /// across the other operand's leading axes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let p = Primitive::Matmul;
        if self.ndim() < 2 || other.ndim() < 2 {
            return Err(shape_err(
                p.name(),
                format!(
                    "operands need at least 2 axes, got {:?} and {:?}",
                    self.shape(),
                    other.shape()
                ),
            ));
        }
        let (an, bn) = (self.ndim(), other.ndim());
        let (m, k) = (self.dim(an - 2), self.dim(an - 1));
        let (k2, n) = (other.dim(bn - 2), other.dim(bn - 1));
        if k != k2 {
            return Err(shape_err(
                p.name(),
                format!(
                    "contraction axis {} of {:?} (len {k}) vs axis {} of {:?} (len {k2})",
                    an - 1,
                    self.shape(),
                    bn - 2,
                    other.shape()
                ),
            ));
        }
        let a_batch = &self.shape()[..an - 2];
        let b_batch = &other.shape()[..bn - 2];
        let out_batch: Vec<usize> = if a_batch.is_empty() {
            b_batch.to_vec()
        } else if b_batch.is_empty() || a_batch == b_batch {
            a_batch.to_vec()
        } else {
            return Err(shape_err(
                p.name(),
                format!("batch axes {a_batch:?} and {b_batch:?} differ"),
            ));
        };
        let nb = numel_of(&out_batch);
        let a_step = if a_batch.is_empty() { 0 } else { m * k };
        let b_step = if b_batch.is_empty() { 0 } else { k * n };
        let (ad, bd) = (self.data(), other.data());
        let mut out = vec![0.0; nb * m * n];
        for bi in 0..nb {
            let a = &ad[bi * a_step..bi * a_step + m * k];
            let b = &bd[bi * b_step..bi * b_step + k * n];
            let c = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        let mut shape = out_batch;
        shape.extend([m, n]);
        let (ac, bc) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            p,
            shape,
            out,
            &[self, other],
            Box::new(move |g, need| {
                let (ad, bd) = (ac.data(), bc.data());
                let ga = need[0].then(|| {
                    let mut ga = vec![0.0; ad.len()];
                    for bi in 0..nb {
                        let b = &bd[bi * b_step..bi * b_step + k * n];
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let gad = &mut ga[bi * a_step..bi * a_step + m * k];
                        for i in 0..m {
                            let grow = &gc[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &b[p * n..(p + 1) * n];
                                let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                                gad[i * k + p] += s;
                            }
                        }
                    }
                    ga
                });
                let gb = need[1].then(|| {
                    let mut gb = vec![0.0; bd.len()];
                    for bi in 0..nb {
                        let a = &ad[bi * a_step..bi * a_step + m * k];
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let gbd = &mut gb[bi * b_step..bi * b_step + k * n];
                        for i in 0..m {
                            let grow = &gc[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = a[i * k + p];
                                let dst = &mut gbd[p * n..(p + 1) * n];
                                for (d, gv) in dst.iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn exp(&self) -> Result<Tensor> {
        unary(Primitive::Exp, self, f64::exp, f64::exp)
    }

    /// ln(1 + e^x), evaluated without overflow.
    pub fn softplus(&self) -> Result<Tensor> {
        unary(Primitive::Softplus, self, softplus, sigmoid)
    }

    /// x·σ(x).
    pub fn silu(&self) -> Result<Tensor> {
        unary(
            Primitive::Silu,
            self,
            |x| x * sigmoid(x),
            |x| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn tanh(&self) -> Result<Tensor> {
        unary(Primitive::Tanh, self, f64::tanh, |x| {
            let t = x.tanh();
            1.0 - t * t
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        unary(
            Primitive::Relu,
            self,
            |x| x.max(0.0),
            |x| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let p = Primitive::Transpose;
        check_axis(p, self.shape(), a)?;
        check_axis(p, self.shape(), b)?;
        let mut out_shape = self.shape().to_vec();
        out_shape.swap(a, b);
        let mut strides = contiguous_strides(self.shape());
        strides.swap(a, b);
        let map = gather_map(&out_shape, &strides);
        let xd = self.data();
        let data = map.iter().map(|&i| xd[i]).collect();
        let len = self.numel();
        Ok(Tensor::from_op(
            p,
            out_shape,
            data,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; len];
                for (gv, &i) in g.iter().zip(&map) {
                    gx[i] = *gv;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Reverses element order along `axis`.
    pub fn reverse_axis(&self, axis: usize) -> Result<Tensor> {
        let p = Primitive::ReverseAxis;
        check_axis(p, self.shape(), axis)?;
        let (outer, n, inner) = split_at_axis(self.shape(), axis);
        let flip = move |src: &[f64]| {
            let mut dst = vec![0.0; src.len()];
            for o in 0..outer {
                for i in 0..n {
                    let from = (o * n + i) * inner;
                    let to = (o * n + (n - 1 - i)) * inner;
                    dst[to..to + inner].copy_from_slice(&src[from..from + inner]);
                }
            }
            dst
        };
        let data = flip(self.data());
        Ok(Tensor::from_op(
            p,
            self.shape().to_vec(),
            data,
            &[self],
            Box::new(move |g, _| vec![Some(flip(g))]),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(shape_err(
                Primitive::Reshape.name(),
                format!("cannot view {:?} as {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::from_op(
            Primitive::Reshape,
            shape.to_vec(),
            self.to_vec(),
            &[self],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        reduce(Primitive::ReduceSum, self, Some(axis), false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        reduce(Primitive::ReduceMean, self, Some(axis), false)
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        reduce(Primitive::ReduceSum, self, None, false)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        reduce(Primitive::ReduceMean, self, None, false)
    }

    /// Softmax over the last axis. Entries equal to −∞ get probability zero.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let p = Primitive::SoftmaxLastAxis;
        if self.ndim() == 0 {
            return Err(shape_err(p.name(), "needs at least one axis"));
        }
        let n = self.dim(self.ndim() - 1);
        let mut out = vec![0.0; self.numel()];
        for (row, dst) in self.data().chunks(n).zip(out.chunks_mut(n)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() };
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        let y = out.clone();
        Ok(Tensor::from_op(
            p,
            self.shape().to_vec(),
            out,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Layer normalization over the last axis with per-channel scale and shift.
    pub fn layernorm_last(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let p = Primitive::LayernormLastAxis;
        if self.ndim() == 0 {
            return Err(shape_err(p.name(), "needs at least one axis"));
        }
        let n = self.dim(self.ndim() - 1);
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(shape_err(
                p.name(),
                format!(
                    "scale {:?} and shift {:?} must be [{n}] to match last axis of {:?}",
                    gamma.shape(),
                    beta.shape(),
                    self.shape()
                ),
            ));
        }
        let rows = self.numel() / n.max(1);
        let mut xhat = vec![0.0; self.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; self.numel()];
        let (gd, bd) = (gamma.data(), beta.data());
        for (r, row) in self.data().chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = gd[j] * h + bd[j];
            }
        }
        let gc = gamma.clone();
        Ok(Tensor::from_op(
            p,
            self.shape().to_vec(),
            out,
            &[self, gamma, beta],
            Box::new(move |g, need| {
                let gd = gc.data();
                let gx = need[0].then(|| {
                    let mut gx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let (xh, gr) = (&xhat[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for j in 0..n {
                            let gh = gr[j] * gd[j];
                            mean_g += gh;
                            mean_gx += gh * xh[j];
                        }
                        mean_g /= n as f64;
                        mean_gx /= n as f64;
                        for j in 0..n {
                            let gh = gr[j] * gd[j];
                            gx[r * n + j] = rstd[r] * (gh - mean_g - xh[j] * mean_gx);
                        }
                    }
                    gx
                });
                let ggamma = need[1].then(|| {
                    let mut acc = vec![0.0; n];
                    for (xh, gr) in xhat.chunks(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            acc[j] += gr[j] * xh[j];
                        }
                    }
                    acc
                });
                let gbeta = need[2].then(|| {
                    let mut acc = vec![0.0; n];
                    for gr in g.chunks(n) {
                        for j in 0..n {
                            acc[j] += gr[j];
                        }
                    }
                    acc
                });
                vec![gx, ggamma, gbeta]
            }),
        ))
    }

    /// Depthwise convolution along axis 1 of a `(batch, len, channels)`
    /// tensor with `weight: (channels, width)` and `bias: (channels)`. The
    /// sequence is left-padded with `width - 1` zeros, so output position `l`
    /// only sees inputs `l - width + 1 ..= l`.
    pub fn causal_conv1d(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let p = Primitive::DepthwiseCausalConv1d;
        if self.ndim() != 3 {
            return Err(shape_err(
                p.name(),
                format!("input must be (batch, len, channels), got {:?}", self.shape()),
            ));
        }
        let (nb, len, ch) = (self.dim(0), self.dim(1), self.dim(2));
        if weight.ndim() != 2 || weight.dim(0) != ch || bias.shape() != [ch] {
            return Err(shape_err(
                p.name(),
                format!(
                    "weight {:?} / bias {:?} inconsistent with {ch} channels (axis 2 of input)",
                    weight.shape(),
                    bias.shape()
                ),
            ));
        }
        let width = weight.dim(1);
        let (xd, wd, bd) = (self.data(), weight.data(), bias.data());
        let mut out = vec![0.0; self.numel()];
        for b in 0..nb {
            for l in 0..len {
                let dst = &mut out[(b * len + l) * ch..(b * len + l + 1) * ch];
                dst.copy_from_slice(bd);
                for j in 0..width {
                    let src_l = l as isize - (width as isize - 1) + j as isize;
                    if src_l < 0 {
                        continue;
                    }
                    let src = &xd[(b * len + src_l as usize) * ch..(b * len + src_l as usize + 1) * ch];
                    for c in 0..ch {
                        dst[c] += wd[c * width + j] * src[c];
                    }
                }
            }
        }
        let (xc, wc) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(
            p,
            self.shape().to_vec(),
            out,
            &[self, weight, bias],
            Box::new(move |g, need| {
                let (xd, wd) = (xc.data(), wc.data());
                let mut gx = need[0].then(|| vec![0.0; xd.len()]);
                let mut gw = need[1].then(|| vec![0.0; wd.len()]);
                let mut gb = need[2].then(|| vec![0.0; ch]);
                for b in 0..nb {
                    for l in 0..len {
                        let gr = &g[(b * len + l) * ch..(b * len + l + 1) * ch];
                        if let Some(gb) = gb.as_mut() {
                            for c in 0..ch {
                                gb[c] += gr[c];
                            }
                        }
                        for j in 0..width {
                            let src_l = l as isize - (width as isize - 1) + j as isize;
                            if src_l < 0 {
                                continue;
                            }
                            let base = (b * len + src_l as usize) * ch;
                            for c in 0..ch {
                                if let Some(gx) = gx.as_mut() {
                                    gx[base + c] += wd[c * width + j] * gr[c];
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[c * width + j] += xd[base + c] * gr[c];
                                }
                            }
                        }
                    }
                }
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Numpy-style broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let p = Primitive::Broadcast;
        if shape.len() < self.ndim() {
            return Err(shape_err(
                p.name(),
                format!("cannot broadcast {:?} to fewer axes {:?}", self.shape(), shape),
            ));
        }
        let lead = shape.len() - self.ndim();
        let src_strides = contiguous_strides(self.shape());
        let mut strides = vec![0; shape.len()];
        for (d, &len) in self.shape().iter().enumerate() {
            if len == shape[lead + d] {
                strides[lead + d] = src_strides[d];
            } else if len != 1 {
                return Err(shape_err(
                    p.name(),
                    format!(
                        "axis {d} of {:?} (len {len}) cannot expand to {}",
                        self.shape(),
                        shape[lead + d]
                    ),
                ));
            }
        }
        let map = gather_map(shape, &strides);
        let xd = self.data();
        let data = map.iter().map(|&i| xd[i]).collect();
        let len = self.numel();
        Ok(Tensor::from_op(
            p,
            shape.to_vec(),
            data,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; len];
                for (gv, &i) in g.iter().zip(&map) {
                    gx[i] += gv;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let p = Primitive::Slice;
        check_axis(p, self.shape(), axis)?;
        let (outer, n, inner) = split_at_axis(self.shape(), axis);
        if start >= end || end > n {
            return Err(shape_err(
                p.name(),
                format!("range {start}..{end} invalid for axis {axis} of length {n}"),
            ));
        }
        let w = end - start;
        let xd = self.data();
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            data.extend_from_slice(&xd[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = w;
        Ok(Tensor::from_op(
            p,
            shape,
            data,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    gx[(o * n + start) * inner..(o * n + end) * inner]
                        .copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let p = Primitive::Concat;
        let first = parts.first().ok_or_else(|| shape_err(p.name(), "no inputs"))?;
        check_axis(p, first.shape(), axis)?;
        for (i, t) in parts.iter().enumerate() {
            let compatible = t.ndim() == first.ndim()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err(
                    p.name(),
                    format!(
                        "input {i} shape {:?} incompatible with {:?} off axis {axis}",
                        t.shape(),
                        first.shape()
                    ),
                ));
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|t| t.dim(axis)).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&t.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            p,
            shape,
            data,
            parts,
            Box::new(move |g, need| {
                let mut grads: Vec<Option<Vec<f64>>> = lens
                    .iter()
                    .zip(need)
                    .map(|(&l, &nd)| nd.then(|| Vec::with_capacity(outer * l * inner)))
                    .collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (gi, &l) in grads.iter_mut().zip(&lens) {
                        if let Some(gi) = gi {
                            gi.extend_from_slice(&g[off..off + l * inner]);
                        }
                        off += l * inner;
                    }
                }
                grads
            }),
        ))
    }

    /// Keeps the `k` largest entries of each last-axis row and sets the rest
    /// to −∞. Ties are resolved toward the lower index.
    pub fn topk_mask(&self, k: usize) -> Result<Tensor> {
        let p = Primitive::TopkMask;
        if self.ndim() == 0 {
            return Err(shape_err(p.name(), "needs at least one axis"));
        }
        let n = self.dim(self.ndim() - 1);
        if k == 0 || k > n {
            return Err(Error::Attribute {
                primitive: p.name(),
                name: "k".into(),
                detail: format!("k = {k} outside 1..={n}"),
            });
        }
        let mut keep = vec![false; self.numel()];
        for (r, row) in self.data().chunks(n).enumerate() {
            for i in topk_indices(row, k) {
                keep[r * n + i] = true;
            }
        }
        let data = self
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { f64::NEG_INFINITY })
            .collect();
        Ok(Tensor::from_op(
            p,
            self.shape().to_vec(),
            data,
            &[self],
            Box::new(move |g, _| {
                vec![Some(
                    g.iter().zip(&keep).map(|(&g, &k)| if k { g } else { 0.0 }).collect(),
                )]
            }),
        ))
    }

    /// Linear recurrence `h_l = a_l ∘ h_{l-1} + b_l ∘ u_l`, `y_l = Σ_n c_l[n] h_l[:, n]`
    /// with `h_0 = 0`.
    ///
    /// Shapes: `a_bar`, `b_bar`: (batch, len, channels, state); `c`: (batch,
    /// len, state); `u`: (batch, len, channels). Returns (batch, len, channels).
    /// The hidden states are kept for the backward sweep.
    pub fn selective_scan(a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, u: &Tensor) -> Result<Tensor> {
        let p = Primitive::SelectiveScan;
        if u.ndim() != 3 || a_bar.ndim() != 4 || c.ndim() != 3 {
            return Err(shape_err(
                p.name(),
                format!(
                    "expected a_bar/b_bar 4-D, c and u 3-D; got {:?}, {:?}, {:?}, {:?}",
                    a_bar.shape(),
                    b_bar.shape(),
                    c.shape(),
                    u.shape()
                ),
            ));
        }
        let (nb, len, ch) = (u.dim(0), u.dim(1), u.dim(2));
        let ns = a_bar.dim(3);
        if a_bar.shape() != [nb, len, ch, ns] || b_bar.shape() != a_bar.shape() || c.shape() != [nb, len, ns] {
            return Err(shape_err(
                p.name(),
                format!(
                    "a_bar {:?}, b_bar {:?}, c {:?} inconsistent with u {:?}",
                    a_bar.shape(),
                    b_bar.shape(),
                    c.shape(),
                    u.shape()
                ),
            ));
        }
        let (ad, bd, cd, ud) = (a_bar.data(), b_bar.data(), c.data(), u.data());
        let cs = ch * ns;
        let mut hs = vec![0.0; nb * len * cs];
        let mut y = vec![0.0; nb * len * ch];
        for b in 0..nb {
            for l in 0..len {
                let t = b * len + l;
                let cur = t * cs;
                let crow = &cd[t * ns..(t + 1) * ns];
                for k in 0..ch {
                    let uv = ud[t * ch + k];
                    let mut acc = 0.0;
                    for n in 0..ns {
                        let i = cur + k * ns + n;
                        let prev = if l == 0 { 0.0 } else { hs[i - cs] };
                        let h = ad[i] * prev + bd[i] * uv;
                        hs[i] = h;
                        acc += crow[n] * h;
                    }
                    y[t * ch + k] = acc;
                }
            }
        }
        let (ac, bc, cc, uc) = (a_bar.clone(), b_bar.clone(), c.clone(), u.clone());
        Ok(Tensor::from_op(
            p,
            u.shape().to_vec(),
            y,
            &[a_bar, b_bar, c, u],
            Box::new(move |g, need| {
                let (ad, bd, cd, ud) = (ac.data(), bc.data(), cc.data(), uc.data());
                let mut ga = vec![0.0; ad.len()];
                let mut gb = vec![0.0; bd.len()];
                let mut gc = vec![0.0; cd.len()];
                let mut gu = vec![0.0; ud.len()];
                // gradient flowing into h_l from later steps
                let mut carry = vec![0.0; cs];
                for b in 0..nb {
                    carry.iter_mut().for_each(|v| *v = 0.0);
                    for l in (0..len).rev() {
                        let t = b * len + l;
                        let cur = t * cs;
                        for k in 0..ch {
                            let gy = g[t * ch + k];
                            let uv = ud[t * ch + k];
                            let mut gu_acc = 0.0;
                            for n in 0..ns {
                                let i = cur + k * ns + n;
                                let j = k * ns + n;
                                let gh = carry[j] + cd[t * ns + n] * gy;
                                let prev = if l == 0 { 0.0 } else { hs[i - cs] };
                                ga[i] = gh * prev;
                                gb[i] = gh * uv;
                                gu_acc += gh * bd[i];
                                gc[t * ns + n] += gy * hs[i];
                                carry[j] = gh * ad[i];
                            }
                            gu[t * ch + k] = gu_acc;
                        }
                    }
                }
                vec![
                    need[0].then_some(ga),
                    need[1].then_some(gb),
                    need[2].then_some(gc),
                    need[3].then_some(gu),
                ]
            }),
        ))
    }

    /// [`Tensor::selective_scan`] with the discretization folded in:
    /// `a_bar = exp(Δ·A)` and `b_bar = Δ·B` are formed per step and never
    /// stored.
    ///
    /// Shapes: `delta`, `u`: (batch, len, channels); `a`: (channels, state);
    /// `b`, `c`: (batch, len, state). Only the state entering every
    /// [`SCAN_CHUNK`]-step chunk is kept; the backward sweep recomputes the
    /// states of one chunk at a time.
    pub fn selective_scan_fused(delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, u: &Tensor) -> Result<Tensor> {
        let p = Primitive::SelectiveScanFused;
        if u.ndim() != 3 || a.ndim() != 2 {
            return Err(shape_err(
                p.name(),
                format!("expected u 3-D and A 2-D; got {:?}, {:?}", u.shape(), a.shape()),
            ));
        }
        let (nb, len, ch) = (u.dim(0), u.dim(1), u.dim(2));
        let ns = a.dim(1);
        if delta.shape() != u.shape() || a.dim(0) != ch || b.shape() != [nb, len, ns] || c.shape() != b.shape() {
            return Err(shape_err(
                p.name(),
                format!(
                    "delta {:?}, A {:?}, B {:?}, C {:?} inconsistent with u {:?}",
                    delta.shape(),
                    a.shape(),
                    b.shape(),
                    c.shape(),
                    u.shape()
                ),
            ));
        }
        let dims = ScanDims { ch, ns };
        let (dd, ad, bd, cd, ud) = (delta.data(), a.data(), b.data(), c.data(), u.data());
        let cs = ch * ns;
        let chunks = len.div_ceil(SCAN_CHUNK);
        let mut checkpoints = vec![0.0; nb * chunks * cs];
        let mut y = vec![0.0; nb * len * ch];
        let mut h = vec![0.0; cs];
        for bi in 0..nb {
            h.iter_mut().for_each(|v| *v = 0.0);
            for l in 0..len {
                if l % SCAN_CHUNK == 0 {
                    let at = (bi * chunks + l / SCAN_CHUNK) * cs;
                    checkpoints[at..at + cs].copy_from_slice(&h);
                }
                let t = bi * len + l;
                dims.step(t, dd, ad, bd, ud, &mut h);
                let crow = &cd[t * ns..(t + 1) * ns];
                for k in 0..ch {
                    y[t * ch + k] = h[k * ns..(k + 1) * ns].iter().zip(crow).map(|(h, c)| h * c).sum();
                }
            }
        }
        let saved = [delta.clone(), a.clone(), b.clone(), c.clone(), u.clone()];
        Ok(Tensor::from_op(
            p,
            u.shape().to_vec(),
            y,
            &[delta, a, b, c, u],
            Box::new(move |g, need| {
                let (dd, ad, bd, cd, ud) = (
                    saved[0].data(),
                    saved[1].data(),
                    saved[2].data(),
                    saved[3].data(),
                    saved[4].data(),
                );
                let mut gd = vec![0.0; dd.len()];
                let mut ga = vec![0.0; ad.len()];
                let mut gb = vec![0.0; bd.len()];
                let mut gc = vec![0.0; cd.len()];
                let mut gu = vec![0.0; ud.len()];
                let mut carry = vec![0.0; cs];
                // states[0] enters the chunk; states[i + 1] follows its step i
                let mut states = vec![0.0; (SCAN_CHUNK + 1) * cs];
                for bi in 0..nb {
                    carry.iter_mut().for_each(|v| *v = 0.0);
                    for chunk in (0..chunks).rev() {
                        let first = chunk * SCAN_CHUNK;
                        let last = (first + SCAN_CHUNK).min(len);
                        let at = (bi * chunks + chunk) * cs;
                        states[..cs].copy_from_slice(&checkpoints[at..at + cs]);
                        for l in first..last {
                            let i = l - first;
                            let (done, next) = states.split_at_mut((i + 1) * cs);
                            next[..cs].copy_from_slice(&done[i * cs..]);
                            dims.step(bi * len + l, dd, ad, bd, ud, &mut next[..cs]);
                        }
                        for l in (first..last).rev() {
                            let t = bi * len + l;
                            let i = l - first;
                            let prev = &states[i * cs..(i + 1) * cs];
                            let cur = &states[(i + 1) * cs..(i + 2) * cs];
                            for k in 0..ch {
                                let gy = g[t * ch + k];
                                let d = dd[t * ch + k];
                                let uv = ud[t * ch + k];
                                let (mut gd_acc, mut gu_acc) = (0.0, 0.0);
                                for n in 0..ns {
                                    let j = k * ns + n;
                                    let a_bar = (d * ad[j]).exp();
                                    let bn = bd[t * ns + n];
                                    let gh = carry[j] + cd[t * ns + n] * gy;
                                    // through a_bar = exp(d·a)
                                    let g_abar = gh * prev[j] * a_bar;
                                    gd_acc += g_abar * ad[j] + gh * bn * uv;
                                    ga[j] += g_abar * d;
                                    gb[t * ns + n] += gh * d * uv;
                                    gu_acc += gh * d * bn;
                                    gc[t * ns + n] += gy * cur[j];
                                    carry[j] = gh * a_bar;
                                }
                                gd[t * ch + k] = gd_acc;
                                gu[t * ch + k] = gu_acc;
                            }
                        }
                    }
                }
                vec![
                    need[0].then_some(gd),
                    need[1].then_some(ga),
                    need[2].then_some(gb),
                    need[3].then_some(gc),
                    need[4].then_some(gu),
                ]
            }),
        ))
    }
}

/// Steps between stored states in [`Tensor::selective_scan_fused`].
pub const SCAN_CHUNK: usize = 16;

#[derive(Clone, Copy)]
struct ScanDims {
    ch: usize,
    ns: usize,
}

impl ScanDims {
    /// Advances `h` (channels × state) by flat time index `t`.
    fn step(&self, t: usize, dd: &[f64], ad: &[f64], bd: &[f64], ud: &[f64], h: &mut [f64]) {
        let (ch, ns) = (self.ch, self.ns);
        let brow = &bd[t * ns..(t + 1) * ns];
        for k in 0..ch {
            let d = dd[t * ch + k];
            let du = d * ud[t * ch + k];
            let arow = &ad[k * ns..(k + 1) * ns];
            for n in 0..ns {
                let j = k * ns + n;
                h[j] = (d * arow[n]).exp() * h[j] + brow[n] * du;
            }
        }
    }
}

fn broadcast_pair(a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    if a.shape() == b.shape() {
        return Ok((a.clone(), b.clone()));
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let a = if a.shape() == shape.as_slice() {
        a.clone()
    } else {
        a.broadcast_to(&shape)?
    };
    let b = if b.shape() == shape.as_slice() {
        b.clone()
    } else {
        b.broadcast_to(&shape)?
    };
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let y = apply_primitive("softplus", &[&t(&[1], &[0.0])], &Attrs::new()).unwrap();
        assert!((y.data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((y.data()[0] - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        let y = t(&[3], &[800.0, -800.0, 30.0]).softplus().unwrap();
        assert_eq!(y.data()[0], 800.0);
        assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-300);
        assert!((y.data()[2] - 30.0).abs() < 1e-12);
    }

    #[test]
    fn reverse_axis_flips() {
        let y = apply_primitive(
            "reverse_axis",
            &[&t(&[3], &[1.0, 2.0, 3.0])],
            &Attrs::new().with("axis", 0usize),
        )
        .unwrap();
        assert_eq!(y.data(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn matmul_of_ones_gives_row_column_sums() {
        let a = Tensor::ones(&[2, 3]);
        let b = Tensor::ones(&[3, 2]);
        let c = apply_primitive("matmul", &[&a, &b], &Attrs::new()).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert!(c.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matmul_shares_2d_operand_across_batch() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let x = Tensor::from_fn(&[3, 2, 1], |i| i as f64);
        let y = a.matmul(&x).unwrap();
        assert_eq!(y.shape(), &[3, 2, 1]);
        // third batch entry: x = [4, 5]
        assert_eq!(&y.data()[4..6], &[14.0, 32.0]);
    }

    #[test]
    fn unknown_primitive_is_rejected() {
        let err = apply_primitive("conv3d", &[&Tensor::zeros(&[1])], &Attrs::new()).unwrap_err();
        assert!(matches!(err, Error::UnknownPrimitive(ref n) if n == "conv3d"));
    }

    #[test]
    fn shape_errors_name_primitive_and_axes() {
        let err = apply_primitive(
            "add",
            &[&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 4])],
            &Attrs::new(),
        )
        .unwrap_err()
        .to_string();
        assert!(err.starts_with("add:"), "{err}");
        assert!(err.contains("[1]"), "{err}");

        let err = Tensor::zeros(&[2, 3])
            .matmul(&Tensor::zeros(&[4, 2]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("matmul") && err.contains("axis 1"), "{err}");
    }

    #[test]
    fn every_primitive_name_round_trips() {
        for p in Primitive::ALL {
            assert_eq!(p.name().parse::<Primitive>().unwrap(), p);
        }
    }

    #[test]
    fn topk_mask_breaks_ties_toward_lower_index() {
        let y = t(&[4], &[1.0, 1.0, 1.0, 1.0]).topk_mask(1).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert!(y.data()[1..].iter().all(|v| *v == f64::NEG_INFINITY));
        assert_eq!(topk_indices(&[0.0, 3.0, 3.0, 1.0], 2), vec![1, 2]);
        assert!(t(&[4], &[0.0; 4]).topk_mask(5).is_err());
    }

    #[test]
    fn softmax_ignores_masked_entries() {
        let y = t(&[4], &[2.0, 1.0, 0.0, -1.0])
            .topk_mask(2)
            .unwrap()
            .softmax_last()
            .unwrap();
        let e = std::f64::consts::E;
        assert!((y.data()[0] - e * e / (e * e + e)).abs() < 1e-12);
        assert_eq!(&y.data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn causal_conv_only_sees_the_past() {
        // width 2, weight [w_prev, w_cur] = [10, 1]
        let x = t(&[1, 3, 1], &[1.0, 2.0, 3.0]);
        let w = t(&[1, 2], &[10.0, 1.0]);
        let b = t(&[1], &[0.5]);
        let y = x.causal_conv1d(&w, &b).unwrap();
        assert_eq!(y.data(), &[1.5, 12.5, 23.5]);
    }

    #[test]
    fn slice_concat_and_broadcast() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64);
        let a = x.slice(1, 0, 1).unwrap();
        let b = x.slice(1, 1, 3).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), x);
        let r = t(&[3], &[1.0, 2.0, 3.0]).broadcast_to(&[2, 3]).unwrap();
        assert_eq!(r.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(t(&[3], &[0.0; 3]).broadcast_to(&[2, 4]).is_err());
        assert!(x.slice(1, 2, 4).is_err());
    }

    #[test]
    fn reductions_and_layernorm() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64);
        assert_eq!(x.sum_axis(1).unwrap().data(), &[3.0, 12.0]);
        assert_eq!(x.mean_axis(0).unwrap().data(), &[1.5, 2.5, 3.5]);
        assert_eq!(x.sum_all().unwrap().shape(), &[] as &[usize]);
        let y = x
            .layernorm_last(&Tensor::ones(&[3]), &Tensor::zeros(&[3]), 0.0)
            .unwrap();
        let s = (1.5f64).sqrt();
        assert!((y.data()[0] + s).abs() < 1e-12 && (y.data()[1]).abs() < 1e-12);
    }

    #[test]
    fn selective_scan_single_step() {
        // y = sum_n c_n * b_n * u
        let a = t(&[1, 1, 1, 2], &[0.3, 0.7]);
        let b = t(&[1, 1, 1, 2], &[2.0, 5.0]);
        let c = t(&[1, 1, 2], &[1.5, -1.0]);
        let u = t(&[1, 1, 1], &[0.5]);
        let y = Tensor::selective_scan(&a, &b, &c, &u).unwrap();
        assert!((y.data()[0] - (1.5 * 2.0 * 0.5 - 5.0 * 0.5)).abs() < 1e-15);
    }
}
