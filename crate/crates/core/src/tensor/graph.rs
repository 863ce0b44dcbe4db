//! Reverse-mode tape.
//!
//! A [`Graph`] records every differentiable operation in execution order. Node
//! values are computed eagerly; [`Graph::backward`] walks the records in
//! reverse and accumulates gradients. A graph borrows the [`ParamStore`] it
//! reads weights from and hands parameter gradients back as owned vectors,
//! so the store can be updated once the graph is dropped.

use std::collections::HashMap;
use std::sync::Arc;

use super::conv::{self, ConvSpec, Geometry};
use super::params::{ParamId, ParamStore};
use super::{axis_split, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One output position of a resampling op: weighted sum of input columns.
pub type Taps<T> = [(usize, T); 2];

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, T),
    AddConst(Var),
    MulConst(Var, Arc<Vec<T>>),
    Dot(Var, Arc<Vec<T>>),
    MatMul(Var, Var, [usize; 3]),
    Transpose(Var, [usize; 2]),
    Linear(Var, Var, Var, [usize; 3]),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp(Var, T, T),
    Softmax(Var, usize),
    Mean(Var, usize),
    L2Norm(Var, usize),
    Sum(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Stack(Vec<Var>),
    Conv(Var, Var, Var, ConvSpec),
    Resample(Var, Arc<Vec<Taps<T>>>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Real> {
    store: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    /// A tape with no parameter store; only [`Graph::input`] leaves.
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Graph {
            store: Some(store),
            ..Graph::new()
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store.expect("graph has no parameter store")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every record so the tape can be reused for a fresh forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.grads.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            op => self.parents(op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::MatMul(a, b, _) => vec![*a, *b],
            Op::Linear(x, w, b, _) | Op::Conv(x, w, b, _) => vec![*x, *w, *b],
            Op::Stack(vs) => vs.clone(),
            Op::Affine(a, _)
            | Op::AddConst(a)
            | Op::MulConst(a, _)
            | Op::Dot(a, _)
            | Op::Transpose(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Ln(a)
            | Op::Clamp(a, _, _)
            | Op::Softmax(a, _)
            | Op::Mean(a, _)
            | Op::L2Norm(a, _)
            | Op::Sum(a)
            | Op::Reshape(a)
            | Op::GatherRows(a, _)
            | Op::Resample(a, _) => vec![*a],
        }
    }

    /// A constant or differentiable input leaf.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let v = self.push(value, Op::Leaf, "input")?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.input(value, false)
    }

    /// Leaf holding the current value of a stored parameter; one leaf per id.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = self.store().value(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |p, q| p + q);
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |p, q| p - q);
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |p, q| p * q);
        self.push(v, Op::Mul(a, b), "mul")
    }

    /// Adds vector `row` (`[d]`) to every row of `x` (`[n, d]`).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let rs = self.shape(row);
        if xs.len() != 2 || rs != [xs[1]] {
            return Err(Error::dim("add_row", format!("{xs:?} + {rs:?}")));
        }
        let r = self.value(row).data().to_vec();
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_mut(xs[1]) {
            for (a, &b) in chunk.iter_mut().zip(&r) {
                *a += b;
            }
        }
        self.push(v, Op::AddRow(x, row), "add_row")
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let v = self.value(x).map(|a| scale * a + shift);
        self.push(v, Op::Affine(x, scale), "affine")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.affine(x, s, T::zero())
    }

    /// `x + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::dim("add_const", format!("{:?} vs {:?}", self.shape(x), c.shape())));
        }
        let v = Tensor::new(
            c.shape().to_vec(),
            self.value(x).data().iter().zip(c.data()).map(|(&a, &b)| a + b).collect(),
        )?;
        self.push(v, Op::AddConst(x), "add_const")
    }

    /// Elementwise product with a constant (e.g. a validity mask).
    pub fn mul_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::dim("mul_const", format!("{:?} vs {:?}", self.shape(x), c.shape())));
        }
        let v = Tensor::new(
            c.shape().to_vec(),
            self.value(x).data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect(),
        )?;
        self.push(v, Op::MulConst(x, Arc::new(c.data().to_vec())), "mul_const")
    }

    /// Scalar `sum_i w_i x_i` against constant weights.
    pub fn dot_const(&mut self, x: Var, w: &[T]) -> Result<Var> {
        if self.value(x).len() != w.len() {
            return Err(Error::dim("dot_const", format!("{} vs {}", self.value(x).len(), w.len())));
        }
        let s = self.value(x).data().iter().zip(w).map(|(&a, &b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::Dot(x, Arc::new(w.to_vec())), "dot_const")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b, [m, k, n]), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("{s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose_raw(self.value(a).data(), r, c);
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a, [r, c]), "transpose")
    }

    /// `y = x W + b` for `x: [n, in]` (or `[in]`), `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        let (rows, inner) = match xs.as_slice() {
            [i] => (1, *i),
            [n, i] => (*n, *i),
            _ => return Err(Error::dim("linear", format!("input {xs:?}"))),
        };
        if ws.len() != 2 || ws[0] != inner || bs != [ws[1]] {
            return Err(Error::dim(
                "linear",
                format!("x {xs:?}, W {ws:?}, b {bs:?}"),
            ));
        }
        let out_dim = ws[1];
        let mut y = matmul_raw(self.value(x).data(), self.value(w).data(), rows, inner, out_dim);
        let bias = self.value(b).data();
        for chunk in y.chunks_mut(out_dim) {
            for (a, &c) in chunk.iter_mut().zip(bias) {
                *a += c;
            }
        }
        let shape = if xs.len() == 1 { vec![out_dim] } else { vec![rows, out_dim] };
        self.push(Tensor::new(shape, y)?, Op::Linear(x, w, b, [rows, inner, out_dim]), "linear")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| if a > T::zero() { a } else { T::zero() });
        self.push(v, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), "sigmoid")
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.ln());
        self.push(v, Op::Ln(x), "ln")
    }

    /// Clips into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(lo).min(hi));
        self.push(v, Op::Clamp(x, lo, hi), "clamp")
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::dim("softmax", format!("axis {axis} of {s:?}")));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| src[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..n {
                    let e = (src[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] = out[at(k)] / z;
                }
            }
        }
        self.push(Tensor::new(s, out)?, Op::Softmax(x, axis), "softmax")
    }

    fn reduce_shape(&self, op: &'static str, x: Var, axis: usize) -> Result<(Vec<usize>, (usize, usize, usize))> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::dim(op, format!("axis {axis} of {s:?}")));
        }
        if s[axis] == 0 {
            return Err(Error::dim(op, "empty axis"));
        }
        let split = axis_split(&s, axis);
        let mut out = s;
        out.remove(axis);
        Ok((out, split))
    }

    /// Arithmetic mean along `axis` (the axis is removed).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, (outer, n, inner)) = self.reduce_shape("mean_pool", x, axis)?;
        let src = self.value(x).data();
        let inv = T::one() / T::lit(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * n + k) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(Tensor::new(shape, out)?, Op::Mean(x, axis), "mean_pool")
    }

    /// Euclidean norm along `axis` (the axis is removed).
    pub fn l2_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, (outer, n, inner)) = self.reduce_shape("l2_norm", x, axis)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    let v = src[(o * n + k) * inner + i];
                    out[o * inner + i] += v * v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
        self.push(Tensor::new(shape, out)?, Op::L2Norm(x, axis), "l2_norm")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x), "reshape")
    }

    /// Rows `idx` of a `[n, d]` matrix, in the given order.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || idx.iter().any(|&i| i >= s[0]) {
            return Err(Error::dim("gather_rows", format!("{idx:?} from {s:?}")));
        }
        let src = self.value(x);
        let data = idx.iter().flat_map(|&i| src.row(i).iter().copied()).collect();
        self.push(
            Tensor::new(vec![idx.len(), s[1]], data)?,
            Op::GatherRows(x, idx.to_vec()),
            "gather_rows",
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::EmptySet { op: "stack" });
        };
        let s = self.shape(first).to_vec();
        let mut data = Vec::with_capacity(s.iter().product::<usize>() * xs.len());
        for &x in xs {
            if self.shape(x) != s.as_slice() {
                return Err(Error::dim("stack", format!("{:?} vs {s:?}", self.shape(x))));
            }
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![xs.len()];
        shape.extend(s);
        self.push(Tensor::new(shape, data)?, Op::Stack(xs.to_vec()), "stack")
    }

    /// Convolution (cross-correlation) of `x: [C, spatial..]` with `w: [O, C, kernel..]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, spec: &ConvSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if self.shape(b) != [ws[0]] {
            return Err(Error::dim("conv", format!("bias {:?} for {} filters", self.shape(b), ws[0])));
        }
        let geom = Geometry::new(spec, &xs, &ws)?;
        let out_shape = spec.output_shape(&xs, ws[0])?;
        let out = conv::forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        self.push(Tensor::new(out_shape, out)?, Op::Conv(x, w, b, spec.clone()), "conv")
    }

    /// Linear resampling along the last axis: for `x: [C, L]`, output column `j`
    /// is `sum_k taps[j][k].1 * x[:, taps[j][k].0]`. The result has shape
    /// `[C, out_tail..]` where `out_tail` multiplies out to `taps.len()`.
    pub fn resample(&mut self, x: Var, taps: Arc<Vec<Taps<T>>>, out_tail: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || out_tail.iter().product::<usize>() != taps.len() {
            return Err(Error::dim("resample", format!("{s:?} -> {out_tail:?}")));
        }
        let (c, l) = (s[0], s[1]);
        if taps.iter().flatten().any(|&(i, _)| i >= l) {
            return Err(Error::dim("resample", "tap index out of range"));
        }
        let src = self.value(x).data();
        let j = taps.len();
        let mut out = vec![T::zero(); c * j];
        for ch in 0..c {
            let row = &src[ch * l..(ch + 1) * l];
            let dst = &mut out[ch * j..(ch + 1) * j];
            for (d, tap) in dst.iter_mut().zip(taps.iter()) {
                *d = tap[0].1 * row[tap[0].0] + tap[1].1 * row[tap[1].0];
            }
        }
        let mut shape = vec![c];
        shape.extend_from_slice(out_tail);
        self.push(Tensor::new(shape, out)?, Op::Resample(x, taps), "resample")
    }

    /// Reverse sweep from a scalar `loss`. Gradients of leaves that require
    /// them are then available through [`Graph::grad`] and
    /// [`Graph::param_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeReused);
        }
        let ls = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Owned gradients of every parameter leaf used on this tape.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = self
                    .grad(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); self.value(v).len()]);
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (a, b) in existing.iter_mut().zip(contrib) {
                        *a += b;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                acc(*b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
            }
            Op::AddRow(x, row) => {
                let d = self.nodes[row.0].value.len();
                let mut gr = vec![T::zero(); d];
                for chunk in g.chunks(d) {
                    for (a, &b) in gr.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                acc(*x, g.to_vec());
                acc(*row, gr);
            }
            Op::Affine(x, s) => acc(*x, g.iter().map(|&v| v * *s).collect()),
            Op::AddConst(x) | Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::MulConst(x, c) => acc(*x, g.iter().zip(c.iter()).map(|(&a, &b)| a * b).collect()),
            Op::Dot(x, w) => acc(*x, w.iter().map(|&b| b * g[0]).collect()),
            Op::MatMul(a, b, [m, k, n]) => {
                let (m, k, n) = (*m, *k, *n);
                let bt = transpose_raw(val(*b), k, n);
                acc(*a, matmul_raw(g, &bt, m, n, k));
                let at = transpose_raw(val(*a), m, k);
                acc(*b, matmul_raw(&at, g, k, m, n));
            }
            Op::Transpose(a, [r, c]) => acc(*a, transpose_raw(g, *c, *r)),
            Op::Linear(x, w, b, [rows, inner, out]) => {
                let (rows, inner, out) = (*rows, *inner, *out);
                let wt = transpose_raw(val(*w), inner, out);
                acc(*x, matmul_raw(g, &wt, rows, out, inner));
                let xt = transpose_raw(val(*x), rows, inner);
                acc(*w, matmul_raw(&xt, g, inner, rows, out));
                let mut gb = vec![T::zero(); out];
                for chunk in g.chunks(out) {
                    for (a, &c) in gb.iter_mut().zip(chunk) {
                        *a += c;
                    }
                }
                acc(*b, gb);
            }
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect(),
            ),
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect());
            }
            Op::Ln(x) => acc(*x, g.iter().zip(val(*x)).map(|(&d, &v)| d / v).collect()),
            Op::Clamp(x, lo, hi) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&d, &v)| if v >= *lo && v <= *hi { d } else { T::zero() })
                    .collect(),
            ),
            Op::Softmax(x, axis) => {
                let s = node.value.shape();
                let (outer, n, inner) = axis_split(s, *axis);
                let y = node.value.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: T = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Mean(x, axis) => {
                let s = self.nodes[x.0].value.shape();
                let (outer, n, inner) = axis_split(s, *axis);
                let inv = T::one() / T::lit(n as f64);
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            gx[(o * n + k) * inner + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::L2Norm(x, axis) => {
                let s = self.nodes[x.0].value.shape();
                let (outer, n, inner) = axis_split(s, *axis);
                let xv = val(*x);
                let norms = node.value.data();
                let mut gx = vec![T::zero(); xv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let nrm = norms[o * inner + i];
                        if nrm == T::zero() {
                            continue;
                        }
                        let f = g[o * inner + i] / nrm;
                        for k in 0..n {
                            let at = (o * n + k) * inner + i;
                            gx[at] = f * xv[at];
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.nodes[x.0].value.len()]),
            Op::GatherRows(x, idx) => {
                let s = self.nodes[x.0].value.shape();
                let d = s[1];
                let mut gx = vec![T::zero(); s[0] * d];
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..d {
                        gx[src * d + c] += g[r * d + c];
                    }
                }
                acc(*x, gx);
            }
            Op::Stack(xs) => {
                let each = self.nodes[xs[0].0].value.len();
                for (k, &x) in xs.iter().enumerate() {
                    acc(x, g[k * each..(k + 1) * each].to_vec());
                }
            }
            Op::Conv(x, w, b, spec) => {
                let geom = Geometry::new(spec, self.nodes[x.0].value.shape(), self.nodes[w.0].value.shape())
                    .expect("validated in forward");
                let (dx, dw, db) = conv::backward(&geom, val(*x), val(*w), g);
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Resample(x, taps) => {
                let s = self.nodes[x.0].value.shape();
                let (c, l) = (s[0], s[1]);
                let j = taps.len();
                let mut gx = vec![T::zero(); c * l];
                for ch in 0..c {
                    let gsrc = &g[ch * j..(ch + 1) * j];
                    let dst = &mut gx[ch * l..(ch + 1) * l];
                    for (&d, tap) in gsrc.iter().zip(taps.iter()) {
                        dst[tap[0].0] += tap[0].1 * d;
                        dst[tap[1].0] += tap[1].1 * d;
                    }
                }
                acc(*x, gx);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw<T: Real>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn linear_identity_and_analytic() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let w = g.constant(Tensor::identity(2)).unwrap();
        let b = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x = g.constant(t(&[2], &[1.0, 1.0])).unwrap();
        let w = g.constant(t(&[2, 1], &[1.0, 1.0])).unwrap();
        let b = g.constant(t(&[1], &[0.5])).unwrap();
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let w = g.constant(Tensor::identity(2)).unwrap();
        let b = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        assert!(matches!(g.linear(x, w, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn activations() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[1.0, 1.0, 1.0])).unwrap();
        let s = g.softmax(x, 0).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[0.0, 3f64.ln()])).unwrap();
        let s = g.softmax(x, 0).unwrap();
        assert!((g.value(s).data()[0] - 0.25).abs() < 1e-12);
        assert!((g.value(s).data()[1] - 0.75).abs() < 1e-12);
        let z = g.constant(Tensor::scalar(0.0)).unwrap();
        let sg = g.sigmoid(z).unwrap();
        assert_eq!(g.value(sg).item(), 0.5);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::vector(vec![1000.0, -1000.0, 999.0])).unwrap();
        let s = g.softmax(x, 0).unwrap();
        let sum: f32 = g.value(s).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[3.0, 4.0])).unwrap();
        let n = g.l2_norm(x, 0).unwrap();
        assert_eq!(g.value(n).item(), 5.0);
        let m = g.constant(t(&[2, 2], &[1.0, 3.0, 5.0, 7.0])).unwrap();
        let p = g.mean(m, 0).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 5.0]);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2, 3]), true).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(3.0), true).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::TapeReused)));
        g.reset();
        let x = g.input(Tensor::zeros(&[2]), true).unwrap();
        let s = g.sum(x).unwrap();
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[0.0])).unwrap();
        assert!(matches!(g.ln(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn identity_conv1d() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4], &[1.0, -2.0, 3.0, 0.5])).unwrap();
        let w = g.constant(t(&[1, 1, 1], &[1.0])).unwrap();
        let b = g.constant(t(&[1], &[0.0])).unwrap();
        let y = g.conv(x, w, b, &ConvSpec::conv1d(1, 0)).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }
}
