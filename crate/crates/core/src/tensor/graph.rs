//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is also a
//! valid topological order: [`Graph::backward`] walks the tape in reverse,
//! so each node is visited once, after all of its consumers, and gradients
//! reaching a node through several consumers are summed.

use std::cell::{Ref, RefCell};
use std::hash::{DefaultHasher, Hash, Hasher};

use super::kernels::{self, ConvGeom};
use super::linalg::sym_eig;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        cols: Vec<Vec<R>>,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Transpose {
        a: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Div {
        a: usize,
        b: usize,
    },
    AddScalar {
        a: usize,
    },
    Scale {
        a: usize,
        c: R,
    },
    ScaleBy {
        a: usize,
        s: usize,
    },
    Pow {
        a: usize,
        p: R,
    },
    Sqrt {
        a: usize,
    },
    Relu {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Select {
        a: usize,
        index: usize,
    },
    Stack {
        parts: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    MeanAxis {
        a: usize,
        axis: usize,
    },
    BroadcastAxis {
        a: usize,
        axis: usize,
    },
    Resize {
        a: usize,
    },
    MaxPool2 {
        a: usize,
        argmax: Vec<usize>,
    },
    ChannelAffine {
        x: usize,
        gamma: usize,
        beta: usize,
    },
    Trace {
        a: usize,
    },
    InvSqrtEig {
        a: usize,
        values: Vec<f64>,
        vectors: Vec<f64>,
    },
}

impl<R> Op<R> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::AddScalar { .. } => "add_scalar",
            Op::Scale { .. } => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::Pow { .. } => "pow",
            Op::Sqrt { .. } => "sqrt",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Reshape { .. } => "reshape",
            Op::Select { .. } => "select",
            Op::Stack { .. } => "stack",
            Op::Concat { .. } => "concat",
            Op::MeanAxis { .. } => "mean_axis",
            Op::BroadcastAxis { .. } => "broadcast_axis",
            Op::Resize { .. } => "resize_nearest",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Trace { .. } => "trace",
            Op::InvSqrtEig { .. } => "inv_sqrt_eig",
        }
    }
}

struct Node<R> {
    value: Tensor<R>,
    grad: Option<Tensor<R>>,
    requires_grad: bool,
    op: Op<R>,
    label: Option<&'static str>,
}

/// Recording tape. Cheap to create; build one per forward pass.
pub struct Graph<R> {
    nodes: RefCell<Vec<Node<R>>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf (inputs, parameters).
    pub fn input(&self, value: Tensor<R>) -> Var {
        self.leaf(value, true)
    }

    /// Non-differentiable leaf (targets, frozen weights, literals).
    pub fn constant(&self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor<R>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
            label: None,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<R>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`backward`](Self::backward) call.
    pub fn grad(&self, v: Var) -> Option<Tensor<R>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    /// Attaches a label to a node; shows up in [`op_trace`](Self::op_trace).
    pub fn label(&self, v: Var, label: &'static str) -> Var {
        self.nodes.borrow_mut()[v.0].label = Some(label);
        v
    }

    /// Names of every recorded operation, in execution order.
    ///
    /// Labelled nodes report `"op:label"`.
    pub fn op_trace(&self) -> Vec<String> {
        self.nodes
            .borrow()
            .iter()
            .map(|n| match n.label {
                Some(l) => format!("{}:{l}", n.op.name()),
                None => n.op.name().to_string(),
            })
            .collect()
    }

    /// Hash of every piecewise branch taken so far: ReLU input signs and
    /// max-pool winners. Two evaluations with equal signatures ran on the
    /// same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let nodes = self.nodes.borrow();
        let mut h = DefaultHasher::new();
        for n in nodes.iter() {
            match &n.op {
                Op::Relu { a } => {
                    for &x in nodes[*a].value.data() {
                        (x > R::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&self, value: Tensor<R>, op: Op<R>, parents: &[usize]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numerical(op.name(), "forward produced a non-finite value"));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
            label: None,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<Vec<usize>> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::config(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(sa.to_vec())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(R, R) -> R) -> Vec<R> {
        let nodes = self.nodes.borrow();
        nodes[a.0]
            .value
            .data()
            .iter()
            .zip(nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    fn map_unary(&self, a: Var, f: impl Fn(R) -> R) -> Tensor<R> {
        self.nodes.borrow()[a.0].value.map(f)
    }

    // ---- operations -----------------------------------------------------

    /// Cross-correlation with symmetric zero padding.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.conv2d_padded(x, w, b, stride, padding, padding)
    }

    /// Cross-correlation with separate leading/trailing padding.
    pub fn conv2d_padded(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad_lo: usize,
        pad_hi: usize,
    ) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            let geom = ConvGeom::new(xv.shape(), wv.shape(), stride, pad_lo, pad_hi)?;
            let bias = match b {
                Some(b) => {
                    let bv = &nodes[b.0].value;
                    if bv.shape() != [geom.f] {
                        return Err(Error::config(format!(
                            "conv2d bias shape {:?} does not match {} filters",
                            bv.shape(),
                            geom.f
                        )));
                    }
                    Some(bv.data())
                }
                None => None,
            };
            let keep = nodes[w.0].requires_grad;
            let (data, cols) = kernels::conv2d_forward(xv.data(), wv.data(), bias, &geom, keep);
            (
                Tensor::from_parts(vec![geom.n, geom.f, geom.ho, geom.wo], data),
                geom,
                cols,
            )
        };
        let mut parents = vec![x.0, w.0];
        parents.extend(b.map(|b| b.0));
        self.push(
            out.0,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom: out.1,
                cols: out.2,
            },
            &parents,
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(&self.value(b))?;
        self.push(out, Op::MatMul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2()?;
        self.push(out, Op::Transpose { a: a.0 }, &[a.0])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let data = self.zip_with(a, b, |x, y| x + y);
        self.push(Tensor::from_parts(shape, data), Op::Add { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let data = self.zip_with(a, b, |x, y| x - y);
        self.push(Tensor::from_parts(shape, data), Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let data = self.zip_with(a, b, |x, y| x * y);
        self.push(Tensor::from_parts(shape, data), Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("div", a, b)?;
        let data = self.zip_with(a, b, |x, y| x / y);
        self.push(Tensor::from_parts(shape, data), Op::Div { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn add_scalar(&self, a: Var, c: R) -> Result<Var> {
        let out = self.map_unary(a, |x| x + c);
        self.push(out, Op::AddScalar { a: a.0 }, &[a.0])
    }

    pub fn scale(&self, a: Var, c: R) -> Result<Var> {
        let out = self.map_unary(a, |x| x * c);
        self.push(out, Op::Scale { a: a.0, c }, &[a.0])
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn scale_by(&self, a: Var, s: Var) -> Result<Var> {
        let factor = {
            let sv = self.value(s);
            if sv.len() != 1 {
                return Err(Error::config(format!(
                    "scale_by expects a one-element factor, got shape {:?}",
                    sv.shape()
                )));
            }
            sv.item()
        };
        let out = self.map_unary(a, |x| x * factor);
        self.push(out, Op::ScaleBy { a: a.0, s: s.0 }, &[a.0, s.0])
    }

    /// Elementwise power with a constant exponent.
    pub fn pow(&self, a: Var, p: R) -> Result<Var> {
        let out = self.map_unary(a, |x| x.powf(p));
        self.push(out, Op::Pow { a: a.0, p }, &[a.0])
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < R::zero()) {
            return Err(Error::Domain("sqrt of a negative value".into()));
        }
        let out = self.map_unary(a, |x| x.sqrt());
        self.push(out, Op::Sqrt { a: a.0 }, &[a.0])
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let out = self.map_unary(a, |x| if x > R::zero() { x } else { R::zero() });
        self.push(out, Op::Relu { a: a.0 }, &[a.0])
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let out = self.map_unary(a, |x| R::one() / (R::one() + (-x).exp()));
        self.push(out, Op::Sigmoid { a: a.0 }, &[a.0])
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = kernels::compensated_sum(self.value(a).data());
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let s = {
            let v = self.value(a);
            kernels::compensated_sum(v.data()) / R::lit(v.len() as f64)
        };
        self.push(Tensor::scalar(s), Op::Mean { a: a.0 }, &[a.0])
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape { a: a.0 }, &[a.0])
    }

    /// Slice `index` along the leading axis, dropping that axis.
    pub fn select(&self, a: Var, index: usize) -> Result<Var> {
        let out = {
            let v = self.value(a);
            let shape = v.shape();
            if shape.len() < 2 || index >= shape[0] {
                return Err(Error::config(format!("select {index} out of range for {shape:?}")));
            }
            let inner: usize = shape[1..].iter().product();
            Tensor::from_parts(
                shape[1..].to_vec(),
                v.data()[index * inner..(index + 1) * inner].to_vec(),
            )
        };
        self.push(out, Op::Select { a: a.0, index }, &[a.0])
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = parts.first().ok_or_else(|| Error::config("stack of zero tensors"))?;
            let shape = nodes[first.0].value.shape().to_vec();
            let mut data = Vec::with_capacity(parts.len() * nodes[first.0].value.len());
            for p in parts {
                let v = &nodes[p.0].value;
                if v.shape() != shape.as_slice() {
                    return Err(Error::config(format!(
                        "stack: shape {:?} differs from {shape:?}",
                        v.shape()
                    )));
                }
                data.extend_from_slice(v.data());
            }
            let mut out_shape = vec![parts.len()];
            out_shape.extend(shape);
            Tensor::from_parts(out_shape, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(out, Op::Stack { parts: ids.clone() }, &ids)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = parts.first().ok_or_else(|| Error::config("concat of zero tensors"))?;
            let base = nodes[first.0].value.shape().to_vec();
            if axis >= base.len() {
                return Err(Error::config(format!("concat axis {axis} out of range for {base:?}")));
            }
            let mut total = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                let compatible =
                    s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::config(format!("concat: shape {s:?} incompatible with {base:?}")));
                }
                total += s[axis];
            }
            let (outer, _, inner) = axis_split(&base, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.0].value;
                    let len = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::from_parts(shape, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            out,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let out = {
            let v = self.value(a);
            if axis >= v.shape().len() {
                return Err(Error::config(format!(
                    "mean_axis {axis} out of range for {:?}",
                    v.shape()
                )));
            }
            let (outer, len, inner) = axis_split(v.shape(), axis);
            let inv = R::one() / R::lit(len as f64);
            let d = v.data();
            let mut data = vec![R::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    let src = &d[(o * len + j) * inner..(o * len + j + 1) * inner];
                    let dst = &mut data[o * inner..(o + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(s, &x)| *s += x);
                }
            }
            data.iter_mut().for_each(|s| *s *= inv);
            let mut shape = v.shape().to_vec();
            shape[axis] = 1;
            Tensor::from_parts(shape, data)
        };
        self.push(out, Op::MeanAxis { a: a.0, axis }, &[a.0])
    }

    /// Repeats an extent-1 `axis` `count` times.
    pub fn broadcast_axis(&self, a: Var, axis: usize, count: usize) -> Result<Var> {
        let out = {
            let v = self.value(a);
            if axis >= v.shape().len() || v.shape()[axis] != 1 || count == 0 {
                return Err(Error::config(format!(
                    "broadcast_axis needs extent 1 on axis {axis}, got {:?}",
                    v.shape()
                )));
            }
            let (outer, _, inner) = axis_split(v.shape(), axis);
            let d = v.data();
            let mut data = Vec::with_capacity(outer * count * inner);
            for o in 0..outer {
                for _ in 0..count {
                    data.extend_from_slice(&d[o * inner..(o + 1) * inner]);
                }
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = count;
            Tensor::from_parts(shape, data)
        };
        self.push(out, Op::BroadcastAxis { a: a.0, axis }, &[a.0])
    }

    /// Nearest-neighbour resampling of an N×C×H×W tensor.
    pub fn resize_nearest(&self, a: Var, height: usize, width: usize) -> Result<Var> {
        let out = {
            let v = self.value(a);
            let dims = v.dims4()?;
            if height == 0 || width == 0 {
                return Err(Error::config("resize target extents must be positive"));
            }
            let data = kernels::resize_nearest(v.data(), dims, height, width);
            Tensor::from_parts(vec![dims[0], dims[1], height, width], data)
        };
        self.push(out, Op::Resize { a: a.0 }, &[a.0])
    }

    pub fn max_pool2(&self, a: Var) -> Result<Var> {
        let (out, argmax) = {
            let v = self.value(a);
            let [n, c, h, w] = v.dims4()?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::config(format!("max_pool2 needs even extents, got {h}×{w}")));
            }
            let (data, arg) = kernels::max_pool2(v.data(), [n, c, h, w]);
            (Tensor::from_parts(vec![n, c, h / 2, w / 2], data), arg)
        };
        self.push(out, Op::MaxPool2 { a: a.0, argmax }, &[a.0])
    }

    /// `y[n,c,h,w] = x[n,c,h,w] · gamma[c] + beta[c]`.
    pub fn channel_affine(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let [n, c, h, w] = xv.dims4()?;
            let (g, b) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            if g.shape() != [c] || b.shape() != [c] {
                return Err(Error::config(format!(
                    "channel_affine expects [{c}] scale/shift, got {:?}/{:?}",
                    g.shape(),
                    b.shape()
                )));
            }
            let plane = h * w;
            let mut data = xv.data().to_vec();
            for (i, chunk) in data.chunks_mut(plane).enumerate() {
                let ch = i % c;
                let (gc, bc) = (g.data()[ch], b.data()[ch]);
                chunk.iter_mut().for_each(|v| *v = *v * gc + bc);
            }
            Tensor::from_parts(vec![n, c, h, w], data)
        };
        self.push(
            out,
            Op::ChannelAffine {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            &[x.0, gamma.0, beta.0],
        )
    }

    pub fn trace(&self, a: Var) -> Result<Var> {
        let t = {
            let v = self.value(a);
            let [m, n] = v.dims2()?;
            if m != n {
                return Err(Error::config(format!("trace of a non-square {m}×{n} matrix")));
            }
            (0..n).map(|i| v.data()[i * n + i]).sum()
        };
        self.push(Tensor::scalar(t), Op::Trace { a: a.0 }, &[a.0])
    }

    /// `a^{-1/2}` of a symmetric positive-definite matrix via eigendecomposition.
    ///
    /// Differentiable through the Daleckii–Krein formula.
    pub fn inv_sqrt_eig(&self, a: Var) -> Result<Var> {
        let (out, values, vectors) = {
            let v = self.value(a);
            let eig = sym_eig(&*v)?;
            let n = eig.values.len();
            let values: Vec<f64> = eig.values.data().iter().map(|x| x.as_f64()).collect();
            if let Some(bad) = values.iter().find(|&&l| l <= 0.0) {
                return Err(Error::numerical(
                    "inv_sqrt_eig",
                    format!("matrix is not positive definite (eigenvalue {bad:e})"),
                ));
            }
            let vectors: Vec<f64> = eig.vectors.data().iter().map(|x| x.as_f64()).collect();
            let f: Vec<f64> = values.iter().map(|l| l.powf(-0.5)).collect();
            let mut out = vec![R::zero(); n * n];
            for i in 0..n {
                for j in 0..n {
                    let s: f64 = (0..n).map(|k| vectors[i * n + k] * f[k] * vectors[j * n + k]).sum();
                    out[i * n + j] = R::lit(s);
                }
            }
            (Tensor::from_parts(vec![n, n], out), values, vectors)
        };
        self.push(
            out,
            Op::InvSqrtEig {
                a: a.0,
                values,
                vectors,
            },
            &[a.0],
        )
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a one-element `loss`; gradients are then available
    /// through [`grad`](Self::grad). Any previous gradients are replaced.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::config(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![R::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            backprop(&nodes, id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        for (node, g) in nodes.iter_mut().zip(grads) {
            node.grad = match g {
                Some(g) if node.requires_grad => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                _ => None,
            };
        }
        Ok(())
    }
}

fn accumulate<R: Real>(nodes: &[Node<R>], grads: &mut [Option<Vec<R>>], id: usize, contribution: Vec<R>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(contribution),
    }
}

fn backprop<R: Real>(nodes: &[Node<R>], id: usize, g: &[R], grads: &mut [Option<Vec<R>>]) -> Result<()> {
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom, cols } => {
            let cg = kernels::conv2d_backward(val(*x).data(), val(*w).data(), g, geom, wants(*x), cols);
            if wants(*x) {
                accumulate(nodes, grads, *x, cg.input);
            }
            accumulate(nodes, grads, *w, cg.weight);
            if let Some(b) = b {
                accumulate(nodes, grads, *b, cg.bias);
            }
        }
        Op::MatMul { a, b } => {
            let [m, k] = val(*a).dims2()?;
            let n = val(*b).shape()[1];
            if wants(*a) {
                let mut da = vec![R::zero(); m * k];
                kernels::gemm(m, n, k, g, false, val(*b).data(), true, &mut da, false);
                accumulate(nodes, grads, *a, da);
            }
            if wants(*b) {
                let mut db = vec![R::zero(); k * n];
                kernels::gemm(k, m, n, val(*a).data(), true, g, false, &mut db, false);
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Transpose { a } => {
            let [m, n] = val(*a).dims2()?;
            accumulate(nodes, grads, *a, kernels::transpose(g, n, m));
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Sub { a, b } => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.iter().map(|&x| -x).collect());
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if wants(*a) {
                accumulate(nodes, grads, *a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
            }
            if wants(*b) {
                accumulate(nodes, grads, *b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
            }
        }
        Op::Div { a, b } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if wants(*a) {
                accumulate(nodes, grads, *a, g.iter().zip(bv).map(|(&g, &b)| g / b).collect());
            }
            if wants(*b) {
                let db = g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&g, (&a, &b))| -g * a / (b * b))
                    .collect();
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::AddScalar { a } => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Scale { a, c } => accumulate(nodes, grads, *a, g.iter().map(|&x| x * *c).collect()),
        Op::ScaleBy { a, s } => {
            let factor = val(*s).item();
            if wants(*a) {
                accumulate(nodes, grads, *a, g.iter().map(|&x| x * factor).collect());
            }
            if wants(*s) {
                let ds = g.iter().zip(val(*a).data()).map(|(&g, &x)| g * x).sum();
                accumulate(nodes, grads, *s, vec![ds]);
            }
        }
        Op::Pow { a, p } => {
            let pm1 = *p - R::one();
            let da = g
                .iter()
                .zip(val(*a).data())
                .map(|(&g, &x)| g * *p * x.powf(pm1))
                .collect();
            accumulate(nodes, grads, *a, da);
        }
        Op::Sqrt { a } => {
            let two = R::lit(2.0);
            let da = g
                .iter()
                .zip(out.data())
                .map(|(&g, &y)| if y > R::zero() { g / (two * y) } else { R::zero() })
                .collect();
            accumulate(nodes, grads, *a, da);
        }
        Op::Relu { a } => {
            let da = g
                .iter()
                .zip(val(*a).data())
                .map(|(&g, &x)| if x > R::zero() { g } else { R::zero() })
                .collect();
            accumulate(nodes, grads, *a, da);
        }
        Op::Sigmoid { a } => {
            let da = g
                .iter()
                .zip(out.data())
                .map(|(&g, &y)| g * y * (R::one() - y))
                .collect();
            accumulate(nodes, grads, *a, da);
        }
        Op::Sum { a } => accumulate(nodes, grads, *a, vec![g[0]; val(*a).len()]),
        Op::Mean { a } => {
            let n = val(*a).len();
            accumulate(nodes, grads, *a, vec![g[0] / R::lit(n as f64); n]);
        }
        Op::Reshape { a } => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Select { a, index } => {
            let total = val(*a).len();
            let mut da = vec![R::zero(); total];
            da[index * g.len()..(index + 1) * g.len()].copy_from_slice(g);
            accumulate(nodes, grads, *a, da);
        }
        Op::Stack { parts } => {
            let len = g.len() / parts.len();
            for (i, p) in parts.iter().enumerate() {
                accumulate(nodes, grads, *p, g[i * len..(i + 1) * len].to_vec());
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = axis_split(out.shape(), *axis);
            let mut slices: Vec<Vec<R>> = parts.iter().map(|p| Vec::with_capacity(val(*p).len())).collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (i, p) in parts.iter().enumerate() {
                    let len = val(*p).shape()[*axis] * inner;
                    slices[i].extend_from_slice(&g[offset..offset + len]);
                    offset += len;
                }
            }
            for (p, s) in parts.iter().zip(slices) {
                accumulate(nodes, grads, *p, s);
            }
        }
        Op::MeanAxis { a, axis } => {
            let (outer, len, inner) = axis_split(val(*a).shape(), *axis);
            let inv = R::one() / R::lit(len as f64);
            let mut da = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                for _ in 0..len {
                    da.extend(g[o * inner..(o + 1) * inner].iter().map(|&x| x * inv));
                }
            }
            accumulate(nodes, grads, *a, da);
        }
        Op::BroadcastAxis { a, axis } => {
            let (outer, count, inner) = axis_split(out.shape(), *axis);
            let mut da = vec![R::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..count {
                    let src = &g[(o * count + j) * inner..(o * count + j + 1) * inner];
                    da[o * inner..(o + 1) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &s)| *d += s);
                }
            }
            accumulate(nodes, grads, *a, da);
        }
        Op::Resize { a } => {
            let dims = val(*a).dims4()?;
            let [_, _, ho, wo] = out.dims4()?;
            accumulate(nodes, grads, *a, kernels::resize_nearest_backward(g, dims, ho, wo));
        }
        Op::MaxPool2 { a, argmax } => {
            let mut da = vec![R::zero(); val(*a).len()];
            for (&src, &gv) in argmax.iter().zip(g) {
                da[src] += gv;
            }
            accumulate(nodes, grads, *a, da);
        }
        Op::ChannelAffine { x, gamma, beta } => {
            let xv = val(*x);
            let [_, c, h, w] = xv.dims4()?;
            let plane = h * w;
            let gam = val(*gamma).data();
            let mut dgamma = vec![R::zero(); c];
            let mut dbeta = vec![R::zero(); c];
            let mut dx = Vec::with_capacity(if wants(*x) { g.len() } else { 0 });
            for (i, (gc, xc)) in g.chunks(plane).zip(xv.data().chunks(plane)).enumerate() {
                let ch = i % c;
                for (&gv, &xv) in gc.iter().zip(xc) {
                    dgamma[ch] += gv * xv;
                    dbeta[ch] += gv;
                }
                if wants(*x) {
                    dx.extend(gc.iter().map(|&gv| gv * gam[ch]));
                }
            }
            if wants(*x) {
                accumulate(nodes, grads, *x, dx);
            }
            accumulate(nodes, grads, *gamma, dgamma);
            accumulate(nodes, grads, *beta, dbeta);
        }
        Op::Trace { a } => {
            let n = val(*a).shape()[0];
            let mut da = vec![R::zero(); n * n];
            for i in 0..n {
                da[i * n + i] = g[0];
            }
            accumulate(nodes, grads, *a, da);
        }
        Op::InvSqrtEig { a, values, vectors } => {
            // dA = V (K ∘ (Vᵀ G V)) Vᵀ with K the divided differences of λ^{-1/2}.
            let n = values.len();
            let f = |l: f64| l.powf(-0.5);
            let fprime = |l: f64| -0.5 * l.powf(-1.5);
            let v = |i: usize, j: usize| vectors[i * n + j];
            let gd: Vec<f64> = g.iter().map(|x| x.as_f64()).collect();
            let mut vg = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    vg[i * n + j] = (0..n).map(|k| v(k, i) * gd[k * n + j]).sum();
                }
            }
            let mut inner = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let m: f64 = (0..n).map(|k| vg[i * n + k] * v(k, j)).sum();
                    let (li, lj) = (values[i], values[j]);
                    let k = if (li - lj).abs() <= 1e-12 * li.abs().max(lj.abs()) {
                        fprime(0.5 * (li + lj))
                    } else {
                        (f(li) - f(lj)) / (li - lj)
                    };
                    inner[i * n + j] = k * m;
                }
            }
            let mut tmp = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    tmp[i * n + j] = (0..n).map(|k| v(i, k) * inner[k * n + j]).sum();
                }
            }
            let mut da = vec![R::zero(); n * n];
            for i in 0..n {
                for j in 0..n {
                    da[i * n + j] = R::lit((0..n).map(|k| tmp[i * n + k] * v(j, k)).sum());
                }
            }
            accumulate(nodes, grads, *a, da);
        }
    }
    Ok(())
}
