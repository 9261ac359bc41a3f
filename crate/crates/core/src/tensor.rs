//! Dense `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! [`Tensor`] is a plain row-major buffer with a shape. Differentiable
//! computation happens on a [`Graph`]: leaves are registered with
//! [`Graph::param`] (tracked) or [`Graph::constant`] (untracked), every
//! operation appends one node, and [`Graph::backward`] walks the tape once in
//! reverse creation order. Since a node can only reference nodes created before
//! it, the tape is acyclic and the reverse walk is a topological order.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut() -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(|_| f()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        self.is_scalar().then(|| self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = as_matrix(&self.shape, "transpose")?;
        Ok(Self {
            shape: vec![c, r],
            data: transpose_buf(&self.data, r, c),
        })
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[i * c..(i + 1) * c]
    }
}

/// A learnable tensor together with the metadata the optimizer and the
/// checkpoint writer need.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
    /// Belongs to an encoder block (frozen when the encoder is frozen).
    pub encoder: bool,
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBroadcast(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::SelectRows { .. } => "select_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Gather { .. } => "gather",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Operation tag of a node, e.g. `"matmul"`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    /// Gradient accumulated at `v` by [`Graph::backward`], if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.tracked(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = &self.nodes[x.0].value;
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&e| e * c).collect(),
        };
        let rg = self.tracked(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = &self.nodes[x.0].value;
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&e| e + c).collect(),
        };
        let rg = self.tracked(&[x]);
        self.push(value, Op::AddScalar(x), rg)
    }

    /// `x + b` where `b`'s shape is a trailing suffix of `x`'s shape
    /// (e.g. a bias row added to every row of a matrix).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sb = self.shape(b);
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(Error::dim("add_broadcast", format!("{sb:?} is not a suffix of {sx:?}")));
        }
        let vx = &self.nodes[x.0].value;
        let vb = &self.nodes[b.0].value;
        let n = vb.data.len();
        let mut data = vx.data.clone();
        for chunk in data.chunks_exact_mut(n) {
            for (d, &bb) in chunk.iter_mut().zip(&vb.data) {
                *d += bb;
            }
        }
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        let rg = self.tracked(&[x, b]);
        Ok(self.push(value, Op::AddBroadcast(x, b), rg))
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = mm(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, m, k, n);
        let rg = self.tracked(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.tracked(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut axis_total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", format!("{base:?} vs {s:?} along axis {axis}")));
            }
            axis_total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let block = v.shape[axis] * inner;
                data.extend_from_slice(&v.data[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_total;
        let rg = self.tracked(parts);
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::dim("slice", format!("{start}..{end} on axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let v = &self.nodes[x.0].value.data;
        let width = (end - start) * inner;
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * len * inner + start * inner;
            data.extend_from_slice(&v[base..base + width]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let rg = self.tracked(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::Slice { x, axis, start }, rg))
    }

    /// Rows of `x` (first axis) at the given indices, in order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(Error::dim("select_rows", format!("rows {rows:?} of {s:?}")));
        }
        let width: usize = s[1..].iter().product();
        let v = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&v[r * width..(r + 1) * width]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        let rg = self.tracked(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::SelectRows { x, rows: rows.to_vec() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        let rg = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value.data;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::dim("sum_axis", format!("axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let v = &self.nodes[x.0].value.data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &v[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, &e) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += e;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.tracked(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::SumAxis { x, axis }, rg))
    }

    fn check_finite(&self, op: &'static str, x: Var) -> Result<()> {
        if self.nodes[x.0].value.data.iter().any(|e| !e.is_finite()) {
            return Err(Error::Numeric(format!("{op} input contains non-finite values")));
        }
        Ok(())
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::dim("softmax", format!("axis {axis} of {s:?}")));
        }
        self.check_finite("softmax", x)?;
        let mut data = self.nodes[x.0].value.data.clone();
        for_each_lane(&s, axis, |idx| {
            let max = idx.clone().map(|i| data[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in idx.clone() {
                data[i] = (data[i] - max).exp();
                total += data[i];
            }
            for i in idx {
                data[i] /= total;
            }
        });
        let rg = self.tracked(&[x]);
        Ok(self.push(Tensor { shape: s, data }, Op::Softmax { x, axis }, rg))
    }

    /// `log(softmax(x))` along `axis` via log-sum-exp.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::dim("log_softmax", format!("axis {axis} of {s:?}")));
        }
        self.check_finite("log_softmax", x)?;
        let mut data = self.nodes[x.0].value.data.clone();
        for_each_lane(&s, axis, |idx| {
            let max = idx.clone().map(|i| data[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + idx.clone().map(|i| (data[i] - max).exp()).sum::<f64>().ln();
            for i in idx {
                data[i] -= lse;
            }
        });
        let rg = self.tracked(&[x]);
        Ok(self.push(Tensor { shape: s, data }, Op::LogSoftmax { x, axis }, rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Config(format!("layer norm eps must be positive, got {eps}")));
        }
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [d] {
                return Err(Error::dim(
                    "layer_norm",
                    format!("{name} {:?} vs last axis {d}", self.shape(p)),
                ));
            }
        }
        let vx = &self.nodes[x.0].value.data;
        let g = &self.nodes[gamma.0].value.data;
        let b = &self.nodes[beta.0].value.data;
        let rows = vx.len() / d;
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                data[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.tracked(&[x, gamma, beta]);
        Ok(self.push(
            Tensor { shape: s, data },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gaussian error linear unit, exact `erf` form.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&e| gelu(e)).collect(),
        };
        let rg = self.tracked(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// `out[i] = x[i, index[i]]` for a 2-D `x`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(x), "gather")?;
        if index.len() != r || index.iter().any(|&i| i >= c) {
            return Err(Error::dim("gather", format!("index {index:?} into [{r}, {c}]")));
        }
        let v = &self.nodes[x.0].value.data;
        let data = index.iter().enumerate().map(|(i, &j)| v[i * c + j]).collect();
        let rg = self.tracked(&[x]);
        Ok(self.push(
            Tensor { shape: vec![r], data },
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage("backward already ran on this graph".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Usage("loss does not depend on any tracked leaf".into()));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let node = &self.nodes[i];
        let mut out: Vec<(Var, Vec<f64>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|e| -e).collect()));
            }
            Op::Mul(a, b) => {
                let va = &self.nodes[a.0].value.data;
                let vb = &self.nodes[b.0].value.data;
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(vb).map(|(g, y)| g * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(va).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|e| e * c).collect())),
            Op::AddScalar(x) => out.push((*x, g.to_vec())),
            Op::AddBroadcast(x, b) => {
                out.push((*x, g.to_vec()));
                if self.wants(*b) {
                    let n = self.nodes[b.0].value.data.len();
                    let mut gb = vec![0.0; n];
                    for chunk in g.chunks_exact(n) {
                        for (d, &e) in gb.iter_mut().zip(chunk) {
                            *d += e;
                        }
                    }
                    out.push((*b, gb));
                }
            }
            Op::MatMul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                if self.wants(*a) {
                    out.push((*a, mm_nt(g, &vb.data, m, n, k)));
                }
                if self.wants(*b) {
                    out.push((*b, mm_tn(&va.data, g, m, k, n)));
                }
            }
            Op::Transpose(x) => {
                let s = &node.value.shape;
                out.push((*x, transpose_buf(g, s[0], s[1])));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(&node.value.shape, *axis);
                let total = node.value.shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let block = self.nodes[p.0].value.shape[*axis] * inner;
                    if self.wants(*p) {
                        let mut gp = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let base = o * total + offset;
                            gp.extend_from_slice(&g[base..base + block]);
                        }
                        out.push((*p, gp));
                    }
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                let src = &self.nodes[x.0].value.shape;
                let (outer, len, inner) = split_axis(src, *axis);
                let width = node.value.shape[*axis] * inner;
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    gx[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                out.push((*x, gx));
            }
            Op::SelectRows { x, rows } => {
                let n = self.nodes[x.0].value.data.len();
                let width = n / self.nodes[x.0].value.shape[0];
                let mut gx = vec![0.0; n];
                for (k, &r) in rows.iter().enumerate() {
                    for (d, &e) in gx[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(&g[k * width..(k + 1) * width])
                    {
                        *d += e;
                    }
                }
                out.push((*x, gx));
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.data.len();
                out.push((*x, vec![g[0]; n]));
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.data.len();
                out.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::SumAxis { x, axis } => {
                let src = &self.nodes[x.0].value.shape;
                let (outer, len, inner) = split_axis(src, *axis);
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                out.push((*x, gx));
            }
            Op::Softmax { x, axis } => {
                let y = &node.value.data;
                let mut gx = vec![0.0; y.len()];
                for_each_lane(&node.value.shape, *axis, |idx| {
                    let dot: f64 = idx.clone().map(|i| g[i] * y[i]).sum();
                    for i in idx {
                        gx[i] = y[i] * (g[i] - dot);
                    }
                });
                out.push((*x, gx));
            }
            Op::LogSoftmax { x, axis } => {
                let y = &node.value.data;
                let mut gx = vec![0.0; y.len()];
                for_each_lane(&node.value.shape, *axis, |idx| {
                    let total: f64 = idx.clone().map(|i| g[i]).sum();
                    for i in idx {
                        gx[i] = g[i] - y[i].exp() * total;
                    }
                });
                out.push((*x, gx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.nodes[gamma.0].value.data.len();
                let gm = &self.nodes[gamma.0].value.data;
                let rows = xhat.len() / d;
                if self.wants(*x) {
                    let mut gx = vec![0.0; xhat.len()];
                    for (r, &rs) in rstd.iter().enumerate().take(rows) {
                        let off = r * d;
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[off + j] * gm[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[off + j];
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let dh = g[off + j] * gm[j];
                            gx[off + j] = rs * (dh - inv_d * sum_dh - xhat[off + j] * inv_d * sum_dh_h);
                        }
                    }
                    out.push((*x, gx));
                }
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                            gb[j] += g[r * d + j];
                        }
                    }
                    out.push((*gamma, gg));
                    out.push((*beta, gb));
                }
            }
            Op::Gelu(x) => {
                let v = &self.nodes[x.0].value.data;
                out.push((*x, g.iter().zip(v).map(|(g, &e)| g * gelu_grad(e)).collect()));
            }
            Op::Gather { x, index } => {
                let c = self.nodes[x.0].value.shape[1];
                let mut gx = vec![0.0; self.nodes[x.0].value.data.len()];
                for (i, &j) in index.iter().enumerate() {
                    gx[i * c + j] += g[i];
                }
                out.push((*x, gx));
            }
        }
        for (v, contrib) in out {
            self.accumulate(v, contrib);
        }
    }
}

fn as_matrix(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::dim(op, format!("expected a matrix, got {shape:?}"))),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Calls `f` with the flat indices of every 1-D lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    let (outer, len, inner) = split_axis(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let start = o * len * inner + i;
            f((start..start + len * inner).step_by(inner));
        }
    }
}

fn transpose_buf(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

/// `a[m×k] · b[k×n]`.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g[m×n] · b[k×n]ᵀ`, giving `[m×k]`.
fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = gi.iter().zip(&b[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · g[m×n]`, giving `[k×n]`.
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(gi) {
                *o += av * gv;
            }
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), || rng.uniform_range(-2.0, 2.0))
    }

    /// Compares analytic gradients of `f(inputs)` against central differences.
    fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
        let h = 1e-6;
        let eval = |xs: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
            let out = f(&mut g, &vars).unwrap();
            g.value(out).item().unwrap()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.backward(out).unwrap();
        for (k, v) in vars.iter().enumerate() {
            let analytic = g.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
            for i in 0..inputs[k].numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                assert!(rel < 1e-4, "input {k}[{i}]: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = g.matmul(i, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_sum_gradient_is_column_sums() {
        let mut rng = Rng::new(1);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let mut g = Graph::new();
        let va = g.param(a.clone());
        let vb = g.constant(b.clone());
        let prod = g.matmul(va, vb).unwrap();
        let s = g.sum(prod);
        g.backward(s).unwrap();
        let ga = g.grad(va).unwrap();
        for i in 0..3 {
            for p in 0..4 {
                let expected = b.row(p).iter().sum::<f64>();
                assert_abs_diff_eq!(ga.data()[i * 4 + p], expected, epsilon = 1e-12);
            }
        }
        check(&[a, b], |g, v| {
            let m = g.matmul(v[0], v[1])?;
            Ok(g.sum(m))
        });
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &p in g.value(y).data() {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.softmax(x, 0).unwrap();
        let expect = [0.09003057317038046, 0.24472847105479764, 0.6652409557748218];
        for (p, e) in g.value(y).data().iter().zip(expect) {
            assert_abs_diff_eq!(*p, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax(x, 0), Err(Error::Numeric(_))));
        let x = g.constant(t(&[2], &[f64::INFINITY, 0.0]));
        assert!(matches!(g.softmax(x, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 3.0, 2.0, 1.0]));
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y).data();
        for j in 0..3 {
            assert_abs_diff_eq!(v[j] + v[3 + j], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gamma = g.constant(Tensor::full(vec![3], 1.0));
        let beta = g.constant(Tensor::zeros(vec![3]));
        let x = g.constant(t(&[3], &[5.0, 5.0, 5.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let gamma = g.constant(Tensor::full(vec![2], 1.0));
        let beta = g.constant(Tensor::zeros(vec![2]));
        let x = g.constant(t(&[2], &[1.0, 3.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert_abs_diff_eq!(g.value(y).data()[0], -1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(g.value(y).data()[1], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn layer_norm_rejects_bad_eps() {
        let mut g = Graph::new();
        let gamma = g.constant(Tensor::full(vec![2], 1.0));
        let beta = g.constant(Tensor::zeros(vec![2]));
        let x = g.constant(t(&[2], &[1.0, 3.0]));
        assert!(matches!(g.layer_norm(x, gamma, beta, 0.0), Err(Error::Config(_))));
        assert!(matches!(g.layer_norm(x, gamma, beta, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert_abs_diff_eq!(gelu(1.0), 0.8413447460685429, epsilon = 1e-12);
        for x in [-3.0, -0.7, 0.2, 1.5, 4.0] {
            // x·Φ(x) + x·Φ(−x) = x
            assert_abs_diff_eq!(gelu(x) - gelu(-x), x, epsilon = 1e-14);
        }
    }

    #[test]
    fn backward_simple_losses() {
        let x = t(&[3], &[1.0, -2.0, 0.5]);
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let s = g.sum(v);
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let v = g.param(x.clone());
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut g = Graph::new();
        let v = g.param(t(&[2], &[1.0, 2.0]));
        let d = g.scale(v, 2.0);
        assert!(matches!(g.backward(d), Err(Error::Usage(_))));
        let s = g.sum(d);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Usage(_))));
    }

    #[test]
    fn untracked_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let p = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let m = g.mul(p, c).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn gradient_checks_per_op() {
        let mut rng = Rng::new(11);
        let a = random(&[2, 3], &mut rng);
        let b = random(&[2, 3], &mut rng);
        let w = random(&[3], &mut rng);
        check(&[a.clone(), b.clone()], |g, v| {
            let x = g.add(v[0], v[1])?;
            let y = g.sub(x, v[1])?;
            let z = g.mul(y, v[1])?;
            Ok(g.sum(z))
        });
        check(std::slice::from_ref(&a), |g, v| {
            let x = g.scale(v[0], -1.7);
            let y = g.add_scalar(x, 0.3);
            let z = g.mul(y, y)?;
            Ok(g.mean(z))
        });
        check(&[a.clone(), w.clone()], |g, v| {
            let x = g.add_broadcast(v[0], v[1])?;
            let z = g.mul(x, x)?;
            Ok(g.sum(z))
        });
        check(std::slice::from_ref(&a), |g, v| {
            let x = g.transpose(v[0])?;
            let y = g.reshape(x, vec![6])?;
            let c = g.constant(Tensor::from_fn(vec![6], || 1.5));
            let z = g.mul(y, c)?;
            let z = g.mul(z, y)?;
            Ok(g.sum(z))
        });
        check(&[a.clone(), b.clone()], |g, v| {
            let x = g.concat(&[v[0], v[1]], 1)?;
            let y = g.slice(x, 1, 2, 5)?;
            let z = g.mul(y, y)?;
            let r = g.sum_axis(z, 0)?;
            let q = g.mul(r, r)?;
            Ok(g.sum(q))
        });
        check(std::slice::from_ref(&a), |g, v| {
            let x = g.select_rows(v[0], &[1, 0, 1])?;
            let z = g.mul(x, x)?;
            Ok(g.sum(z))
        });
        check(std::slice::from_ref(&a), |g, v| {
            let s = g.softmax(v[0], 1)?;
            let c = g.constant(Tensor::from_fn(vec![2, 3], || 0.7));
            let weighted = g.mul(s, c)?;
            let sq = g.mul(weighted, s)?;
            Ok(g.sum(sq))
        });
        check(std::slice::from_ref(&a), |g, v| {
            let s = g.log_softmax(v[0], 0)?;
            let z = g.mul(s, s)?;
            Ok(g.sum(z))
        });
        check(&[a.clone(), w.clone(), random(&[3], &mut rng)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-12)?;
            let c = g.constant(Tensor::from_fn(vec![2, 3], || 0.3));
            let z = g.mul(y, c)?;
            let z = g.mul(z, y)?;
            Ok(g.sum(z))
        });
        check(std::slice::from_ref(&a), |g, v| {
            let y = g.gelu(v[0]);
            Ok(g.sum(y))
        });
        check(&[a], |g, v| {
            let y = g.gather(v[0], &[2, 0])?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        });
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let mut rng = Rng::new(5);
            let a = random(&[4, 5], &mut rng);
            let b = random(&[5, 3], &mut rng);
            let mut g = Graph::new();
            let va = g.param(a);
            let vb = g.param(b);
            let m = g.matmul(va, vb).unwrap();
            let s = g.softmax(m, 1).unwrap();
            let l = g.sum(s);
            let q = g.mul(s, s).unwrap();
            let l2 = g.sum(q);
            let tot = g.add(l, l2).unwrap();
            g.backward(tot).unwrap();
            (g.grad(va).unwrap(), g.grad(vb).unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn op_tags_are_recorded() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(vec![2, 2]));
        let b = g.matmul(a, a).unwrap();
        assert_eq!(g.op_name(a), "leaf");
        assert_eq!(g.op_name(b), "matmul");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(xs in prop::collection::vec(-50.0f64..50.0, 12)) {
                let mut g = Graph::new();
                let x = g.constant(Tensor::new(vec![3, 4], xs).unwrap());
                let y = g.softmax(x, 1).unwrap();
                for r in 0..3 {
                    let row = g.value(y).row(r);
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(row.iter().all(|&p| p > 0.0));
                }
            }

            #[test]
            fn reshape_transpose_round_trip(xs in prop::collection::vec(-1e6f64..1e6, 6)) {
                let x = Tensor::new(vec![2, 3], xs).unwrap();
                let back = x.transpose().unwrap().transpose().unwrap();
                prop_assert_eq!(&back, &x);
                let flat = x.reshape(vec![6]).unwrap().reshape(vec![2, 3]).unwrap();
                prop_assert_eq!(&flat, &x);
            }
        }
    }
}
