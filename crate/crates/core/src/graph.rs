//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape. Every forward call pushes one node
//! holding its output value and the rule needed to push gradients back to
//! its inputs. [`Graph::backward`] walks the tape once in reverse execution
//! order. Reductions sum left to right so a replay with the same inputs is
//! bitwise identical.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Silu(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    CrossEntropy(Var, Vec<usize>),
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    MulRows(Var, Var),
    RmsNorm(Var),
    StopGradient,
    ScaleGradient(Var, T),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape for one forward/backward pass.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    params: Vec<Option<Var>>,
    bound: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const RMS_EPS: f64 = 1e-6;

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            params: Vec::new(),
            bound: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::from_vec(&n.shape, n.data.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> T {
        self.value(v)[0]
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// Drops every accumulated leaf gradient.
    pub fn clear_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Registers a leaf; it is differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Binds a stored parameter as a differentiable leaf (memoized per graph).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(Some(v)) = self.params.get(id.index()) {
            return *v;
        }
        let t = store.tensor(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        if self.params.len() <= id.index() {
            self.params.resize(id.index() + 1, None);
        }
        self.params[id.index()] = Some(v);
        self.bound.push((id, v));
        v
    }

    /// Parameters bound on this graph with their leaf handles.
    pub fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.bound
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::Shape(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?} inner dimensions differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let src = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg)
    }

    /// Adds a non-differentiable constant of the same shape.
    pub fn add_const(&mut self, a: Var, c: &[T]) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::Shape(format!(
                "add_const: {} constants for shape {:?}",
                c.len(),
                self.shape(a)
            )));
        }
        let out = self.value(a).iter().zip(c).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddConst(a), rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Silu(a), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let out = softmax_along(self.value(x), &shape, axis, false);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax(x, axis), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let out = softmax_along(self.value(x), &shape, axis, true);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::LogSoftmax(x, axis), rg))
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, v) = self.dims2(logits)?;
        if targets.len() != r {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {r} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Contract(format!(
                "cross_entropy: target {bad} outside vocabulary of {v}"
            )));
        }
        let logp = softmax_along(self.value(logits), &[r, v], 1, true);
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            total -= logp[i * v + t];
        }
        let loss = total / T::lit(r as f64);
        let rg = self.rg(logits);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy(logits, targets.to_vec()), rg))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let n = T::lit(self.value(pred).len() as f64);
        let mut acc = T::zero();
        for (&p, &t) in self.value(pred).iter().zip(self.value(target)) {
            let d = p - t;
            acc += d * d;
        }
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(vec![1], vec![acc / n], Op::Mse(pred, target), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut acc = T::zero();
        for &x in self.value(a) {
            acc += x;
        }
        let rg = self.rg(a);
        self.push(vec![1], vec![acc], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let mut acc = T::zero();
        for &x in self.value(a) {
            acc += x;
        }
        let n = T::lit(self.value(a).len() as f64);
        let rg = self.rg(a);
        self.push(vec![1], vec![acc / n], Op::Mean(a), rg)
    }

    /// Sums along `axis`, keeping it as a dimension of size one.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let base = (o * len + i) * inner;
                for j in 0..inner {
                    out[o * inner + j] += src[base + j];
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let rg = self.rg(x);
        Ok(self.push(oshape, out, Op::SumAxis(x, axis), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::lit(n as f64)))
    }

    /// Gathers flat element positions into a tensor of `shape`.
    pub fn gather(&mut self, x: Var, flat: &[usize], shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != flat.len() {
            return Err(Error::Shape(format!(
                "gather: {} indices for shape {shape:?}",
                flat.len()
            )));
        }
        if let Some(&bad) = flat.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!("gather: index {bad} >= {n}")));
        }
        let src = self.value(x);
        let out = flat.iter().map(|&i| src[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Gather(x, flat.to_vec()), rg))
    }

    /// Per-row top-k: indices (descending value, ties to the lower index)
    /// and the gathered values, which stay differentiable.
    pub fn top_k(&mut self, x: Var, k: usize) -> Result<(Vec<Vec<usize>>, Var)> {
        let (r, n) = self.dims2(x)?;
        if k == 0 || k > n {
            return Err(Error::Config(format!("top_k: k={k} with {n} candidates")));
        }
        let vals = self.value(x);
        let mut ids = Vec::with_capacity(r);
        let mut flat = Vec::with_capacity(r * k);
        for i in 0..r {
            let row = &vals[i * n..(i + 1) * n];
            let sel = top_k_indices(row, k);
            flat.extend(sel.iter().map(|&j| i * n + j));
            ids.push(sel);
        }
        let v = self.gather(x, &flat, &[r, k])?;
        Ok((ids, v))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        self.check_axis(first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    s, base
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.value(p);
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, out, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * dim + start) * inner;
            out.extend_from_slice(&src[b..b + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(oshape, out, Op::Slice { x, axis, start }, rg))
    }

    /// Row gather: `out[i] = x[rows[i]]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if rows.is_empty() {
            return Err(Error::Shape("gather_rows with no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!("row {bad} out of range for {r} rows")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows.len(), c], out, Op::GatherRows(x, rows.to_vec()), rg))
    }

    /// Embedding lookup; identical to a row gather on the table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Index-add: a zero `[n_rows x C]` tensor with `x[i]` added into row
    /// `rows[i]`. Repeated targets accumulate in input order.
    pub fn scatter_add_rows(&mut self, x: Var, rows: &[usize], n_rows: usize) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if rows.len() != r {
            return Err(Error::Shape(format!(
                "scatter_add_rows: {} targets for {r} rows",
                rows.len()
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= n_rows) {
            return Err(Error::Contract(format!("row {bad} out of range for {n_rows} rows")));
        }
        let src = self.value(x);
        let mut out = vec![T::zero(); n_rows * c];
        for (i, &t) in rows.iter().enumerate() {
            let dst = &mut out[t * c..(t + 1) * c];
            for (d, &s) in dst.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *d += s;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n_rows, c], out, Op::ScatterAddRows(x, rows.to_vec()), rg))
    }

    /// Scales each row of `x [R x C]` by the matching entry of `col [R x 1]`.
    pub fn mul_rows(&mut self, x: Var, col: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if self.value(col).len() != r {
            return Err(Error::Shape(format!(
                "mul_rows: column {:?} for {r} rows",
                self.shape(col)
            )));
        }
        let src = self.value(x);
        let w = self.value(col);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(src[i * c..(i + 1) * c].iter().map(|&v| v * w[i]));
        }
        let rg = self.rg(x) || self.rg(col);
        Ok(self.push(vec![r, c], out, Op::MulRows(x, col), rg))
    }

    /// Row-wise RMS normalisation without a learned gain.
    pub fn rms_norm(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let src = self.value(x);
        let eps = T::lit(RMS_EPS);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mut ms = T::zero();
            for &v in row {
                ms += v * v;
            }
            let inv = T::one() / (ms / T::lit(c as f64) + eps).sqrt();
            out.extend(row.iter().map(|&v| v * inv));
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, c], out, Op::RmsNorm(x), rg))
    }

    /// Identity forward; no gradient flows back into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let data = self.value(x).to_vec();
        self.push(self.shape(x).to_vec(), data, Op::StopGradient, false)
    }

    /// Identity forward; the incoming gradient is multiplied by `s`.
    pub fn scale_gradient(&mut self, x: Var, s: T) -> Var {
        let data = self.value(x).to_vec();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, Op::ScaleGradient(x, s), rg)
    }

    /// Reverse pass from a scalar loss. Leaf gradients accumulate across
    /// calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if want(*a) {
                    let bv = &nodes[b.0].data;
                    let da = slot(adj, *a, m * k);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            let mut acc = T::zero();
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            da[r * k + kk] += acc;
                        }
                    }
                }
                if want(*b) {
                    let av = &nodes[a.0].data;
                    let db = slot(adj, *b, k * n);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let s = av[r * k + kk];
                            if s == T::zero() {
                                continue;
                            }
                            let drow = &mut db[kk * n..(kk + 1) * n];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += s * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let da = slot(adj, *a, r * c);
                for ii in 0..r {
                    for j in 0..c {
                        da[ii * c + j] += g[j * r + ii];
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        add_into(slot(adj, v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    add_into(slot(adj, *a, g.len()), g);
                }
                if want(*b) {
                    let db = slot(adj, *b, g.len());
                    db.iter_mut().zip(g).for_each(|(d, &x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bv = &nodes[b.0].data;
                    let da = slot(adj, *a, g.len());
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                }
                if want(*b) {
                    let av = &nodes[a.0].data;
                    let db = slot(adj, *b, g.len());
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                }
            }
            Op::Scale(a, c) | Op::ScaleGradient(a, c) => {
                let da = slot(adj, *a, g.len());
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *c);
            }
            Op::AddConst(a) => add_into(slot(adj, *a, g.len()), g),
            Op::Silu(a) => {
                let av = &nodes[a.0].data;
                let da = slot(adj, *a, g.len());
                for ((d, &x), &gv) in da.iter_mut().zip(av).zip(g) {
                    let s = sigmoid(x);
                    *d += gv * s * (T::one() + x * (T::one() - s));
                }
            }
            Op::Softmax(a, axis) => {
                let y = &node.data;
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let da = slot(adj, *a, g.len());
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |t: usize| (o * len + t) * inner + j;
                        let mut dot = T::zero();
                        for t in 0..len {
                            dot += g[idx(t)] * y[idx(t)];
                        }
                        for t in 0..len {
                            da[idx(t)] += y[idx(t)] * (g[idx(t)] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a, axis) => {
                let y = &node.data;
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let da = slot(adj, *a, g.len());
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |t: usize| (o * len + t) * inner + j;
                        let mut gs = T::zero();
                        for t in 0..len {
                            gs += g[idx(t)];
                        }
                        for t in 0..len {
                            da[idx(t)] += g[idx(t)] - y[idx(t)].exp() * gs;
                        }
                    }
                }
            }
            Op::CrossEntropy(logits, targets) => {
                let (r, v) = (nodes[logits.0].shape[0], nodes[logits.0].shape[1]);
                let p = softmax_along(&nodes[logits.0].data, &[r, v], 1, false);
                let scale = g[0] / T::lit(r as f64);
                let da = slot(adj, *logits, r * v);
                for (row, &t) in targets.iter().enumerate() {
                    for c in 0..v {
                        let onehot = if c == t { T::one() } else { T::zero() };
                        da[row * v + c] += (p[row * v + c] - onehot) * scale;
                    }
                }
            }
            Op::Mse(a, b) => {
                let av = &nodes[a.0].data;
                let bv = &nodes[b.0].data;
                let k = T::lit(2.0) * g[0] / T::lit(av.len() as f64);
                if want(*a) {
                    let da = slot(adj, *a, av.len());
                    for ((d, &x), &y) in da.iter_mut().zip(av).zip(bv) {
                        *d += (x - y) * k;
                    }
                }
                if want(*b) {
                    let db = slot(adj, *b, av.len());
                    for ((d, &x), &y) in db.iter_mut().zip(av).zip(bv) {
                        *d -= (x - y) * k;
                    }
                }
            }
            Op::Sum(a) => {
                let n = nodes[a.0].data.len();
                slot(adj, *a, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(a) => {
                let n = nodes[a.0].data.len();
                let s = g[0] / T::lit(n as f64);
                slot(adj, *a, n).iter_mut().for_each(|d| *d += s);
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_split(&nodes[a.0].shape, *axis);
                let da = slot(adj, *a, outer * len * inner);
                for o in 0..outer {
                    for t in 0..len {
                        for j in 0..inner {
                            da[(o * len + t) * inner + j] += g[o * inner + j];
                        }
                    }
                }
            }
            Op::Gather(a, flat) => {
                let n = nodes[a.0].data.len();
                let da = slot(adj, *a, n);
                for (&src, &gv) in flat.iter().zip(g) {
                    da[src] += gv;
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].shape[*axis];
                    if want(p) {
                        let dp = slot(adj, p, outer * len * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut dp[o * len * inner..(o + 1) * len * inner], src);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, dim, inner) = axis_split(&nodes[x.0].shape, *axis);
                let len = node.shape[*axis];
                let dx = slot(adj, *x, outer * dim * inner);
                for o in 0..outer {
                    let b = (o * dim + start) * inner;
                    add_into(&mut dx[b..b + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                }
            }
            Op::GatherRows(x, rows) => {
                let c = nodes[x.0].shape[1];
                let n = nodes[x.0].data.len();
                let dx = slot(adj, *x, n);
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut dx[r * c..(r + 1) * c], &g[i * c..(i + 1) * c]);
                }
            }
            Op::ScatterAddRows(x, rows) => {
                let c = nodes[x.0].shape[1];
                let n = nodes[x.0].data.len();
                let dx = slot(adj, *x, n);
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut dx[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
            Op::MulRows(x, col) => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let xv = &nodes[x.0].data;
                let w = &nodes[col.0].data;
                if want(*x) {
                    let dx = slot(adj, *x, r * c);
                    for ii in 0..r {
                        for j in 0..c {
                            dx[ii * c + j] += g[ii * c + j] * w[ii];
                        }
                    }
                }
                if want(*col) {
                    let dc = slot(adj, *col, r);
                    for ii in 0..r {
                        let mut acc = T::zero();
                        for j in 0..c {
                            acc += g[ii * c + j] * xv[ii * c + j];
                        }
                        dc[ii] += acc;
                    }
                }
            }
            Op::RmsNorm(x) => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let xv = &nodes[x.0].data;
                let y = &node.data;
                let eps = T::lit(RMS_EPS);
                let cn = T::lit(c as f64);
                let dx = slot(adj, *x, r * c);
                for ii in 0..r {
                    let row = &xv[ii * c..(ii + 1) * c];
                    let mut ms = T::zero();
                    for &v in row {
                        ms += v * v;
                    }
                    let inv = T::one() / (ms / cn + eps).sqrt();
                    let mut gy = T::zero();
                    for j in 0..c {
                        gy += g[ii * c + j] * y[ii * c + j];
                    }
                    let m = gy / cn;
                    for j in 0..c {
                        dx[ii * c + j] += (g[ii * c + j] - y[ii * c + j] * m) * inv;
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(adj: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    adj[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `out += a [m x k] * b [k x n]`, row-major.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let s = a[i * k + kk];
            if s == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
}

/// Max-subtracted softmax (or log-softmax) along `axis`.
pub(crate) fn softmax_along<T: Scalar>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |t: usize| (o * len + t) * inner + j;
            let mut mx = T::neg_infinity();
            for t in 0..len {
                mx = mx.max(x[idx(t)]);
            }
            let mut z = T::zero();
            for t in 0..len {
                let e = (x[idx(t)] - mx).exp();
                out[idx(t)] = e;
                z += e;
            }
            if log {
                let lz = z.ln();
                for t in 0..len {
                    out[idx(t)] = x[idx(t)] - mx - lz;
                }
            } else {
                for t in 0..len {
                    out[idx(t)] = out[idx(t)] / z;
                }
            }
        }
    }
    out
}

/// Indices of the `k` largest entries, descending, ties to the lower index.
pub fn top_k_indices<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar_rule() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[3.0, 4.0, 5.0, 6.0]);

        let mut g = Graph::new();
        let a = g.leaf(t(&[1, 1], &[2.0]).with_grad());
        let b = g.leaf(t(&[1, 1], &[3.0]).with_grad());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[6.0]);
        let l = g.sum(c);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[3.0]);
        assert_eq!(g.grad(b).unwrap(), &[2.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_saturation() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y)[0] - 1.0).abs() < 1e-12);
        assert!(g.value(y)[1].abs() < 1e-12);
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn stop_gradient_blocks_and_is_idempotent() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_grad());
        let w = g.leaf(t(&[3], &[4.0, 5.0, 6.0]).with_grad());
        let s = g.stop_gradient(x);
        let s2 = g.stop_gradient(s);
        assert_eq!(g.value(s2), &[1.0, 2.0, 3.0]);
        let p = g.mul(s2, w).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert!(g.grad(x).is_none_or(|gr| gr.iter().all(|&v| v == 0.0)));
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, -1.0]).with_grad());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn mse_of_self_is_zero_with_zero_grads() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[0.3, -1.0, 2.0, 5.0]).with_grad());
        let l = g.mse(x, x).unwrap();
        assert_eq!(g.item(l), 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn top_k_ties_break_low() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4], &[1.0, 1.0, 1.0, 1.0]));
        let (ids, vals) = g.top_k(x, 2).unwrap();
        assert_eq!(ids, vec![vec![0, 1]]);
        assert_eq!(g.value(vals), &[1.0, 1.0]);
        assert!(matches!(g.top_k(x, 5), Err(Error::Config(_))));
    }

    #[test]
    fn unrelated_leaf_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let y = g.leaf(t(&[2], &[3.0, 4.0]).with_grad());
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(g.grad(y).is_none());
    }

    #[test]
    fn scatter_accumulates_duplicates_in_order() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3, 1], &[1.0, 2.0, 4.0]).with_grad());
        let y = g.scatter_add_rows(x, &[1, 1, 0], 2).unwrap();
        assert_eq!(g.value(y), &[4.0, 3.0]);
        let w = g.constant(t(&[2, 1], &[10.0, 100.0]));
        let p = g.mul(y, w).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[100.0, 100.0, 10.0]);
    }
}
