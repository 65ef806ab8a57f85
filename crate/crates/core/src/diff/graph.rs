//! Reverse-mode tape.
//!
//! Every op appends a node holding its value. Backward walks the node list
//! in reverse, accumulating vector-Jacobian products into the inputs that
//! need them. Parameters enter the tape once per graph as named leaves, so
//! their gradients are collected by name.

use std::collections::BTreeMap;

use crate::diff::float::{lit, Float};
use crate::diff::params::ParameterStore;
use crate::diff::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var, broadcast: bool },
    Mul { a: Var, b: Var },
    Scale { a: Var, k: T },
    Relu { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    MaskedMeanPool { x: Var, mask: Vec<bool>, count: usize },
    ConcatLast { parts: Vec<(Var, usize)> },
    ConcatRows { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    Dot { a: Var, b: Var },
    Sum { a: Var },
    Mean { a: Var },
    Reshape { a: Var },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The primitive set exposed through [`Graph::apply`].
#[derive(Clone, Debug)]
pub enum OpKind {
    MatMul,
    Add,
    Scale(f64),
    Relu,
    SoftmaxLastDim,
    LayerNorm { eps: f64 },
    EmbeddingLookup(Vec<usize>),
    MaskedMeanPool(Vec<bool>),
    ConcatLastDim,
    Dot,
}

/// A recorded computation.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    record: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: BTreeMap::new(), record: true }
    }

    /// A graph that keeps values but records nothing for backward.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), params: BTreeMap::new(), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, what: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(what));
        }
        let needs_grad = needs_grad && self.record;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// A free input; when `requires_grad` its gradient is reported by
    /// [`Gradients::of`].
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(t, Op::Leaf, requires_grad, "input")
    }

    /// The leaf for a named parameter, created on first use.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name:?}")))?
            .clone();
        let v = self.push(t, Op::Leaf, true, "parameter")?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::contract(format!("{kind:?} takes {n} inputs, got {}", inputs.len())))
            }
        };
        match kind {
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Scale(k) => {
                arity(1)?;
                self.scale(inputs[0], k)
            }
            OpKind::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            OpKind::SoftmaxLastDim => {
                arity(1)?;
                self.softmax(inputs[0], None)
            }
            OpKind::LayerNorm { eps } => {
                arity(3)?;
                self.layer_norm(inputs[0], inputs[1], inputs[2], eps)
            }
            OpKind::EmbeddingLookup(ref ids) => {
                arity(1)?;
                self.gather_rows(inputs[0], ids)
            }
            OpKind::MaskedMeanPool(ref mask) => {
                arity(1)?;
                self.masked_mean_pool(inputs[0], mask)
            }
            OpKind::ConcatLastDim => self.concat_last(inputs),
            OpKind::Dot => {
                arity(2)?;
                self.dot(inputs[0], inputs[1])
            }
        }
    }

    /// `a[m,k] @ b[k,n]`; a rank-1 `a` is treated as a single row and the
    /// result is rank 1.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || sa.len() > 2 {
            return Err(Error::contract(format!("matmul expects [m,k]x[k,n], got {sa:?}x{sb:?}")));
        }
        let (m, k) = if sa.len() == 1 { (1, sa[0]) } else { (sa[0], sa[1]) };
        let n = sb[1];
        if k != sb[0] {
            return Err(Error::contract(format!("matmul inner dims differ: {sa:?}x{sb:?}")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let shape = if sa.len() == 1 { vec![n] } else { vec![m, n] };
        let needs = self.any_grad(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, m, k, n }, needs, "matmul")
    }

    /// `a[m,k] @ b[n,k]^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::contract(format!("matmul_nt expects [m,k]x[n,k], got {sa:?}x{sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        gemm_nt_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.any_grad(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt { a, b, m, k, n }, needs, "matmul_nt")
    }

    /// Elementwise sum. `b` may also be a rank-1 row broadcast over the rows
    /// of `a` (bias add).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let broadcast = if sa == sb {
            false
        } else if sb.len() == 1 && sa.len() == 2 && sa[1] == sb[0] {
            true
        } else {
            return Err(Error::contract(format!("add shape mismatch {sa:?} + {sb:?}")));
        };
        let bv = self.value(b).data();
        let c = bv.len();
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + if broadcast { bv[i % c] } else { bv[i] })
            .collect();
        let needs = self.any_grad(&[a, b]);
        self.push(Tensor::new(sa, out)?, Op::Add { a, b, broadcast }, needs, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::contract(format!(
                "mul shape mismatch {:?} * {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.any_grad(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, needs, "mul")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let k: T = lit(k);
        let out = self.value(a).data().iter().map(|&x| x * k).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.any_grad(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Scale { a, k }, needs, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.any_grad(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Relu { a }, needs, "relu")
    }

    /// Softmax over the last dimension. Positions where `mask` is false get
    /// probability exactly zero; a row with no active position is an error.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        if let Some(m) = mask {
            if m.len() != x.numel() {
                return Err(Error::contract("softmax mask size differs from input"));
            }
        }
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..x.rows() {
            let row = x.row(r);
            let active = |j: usize| mask.map_or(true, |m| m[r * c + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if active(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::contract("softmax row has no active position"));
            }
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if active(j) {
                    let e = (v - max).exp();
                    out[r * c + j] = e;
                    sum += e;
                }
            }
            for o in &mut out[r * c..(r + 1) * c] {
                *o /= sum;
            }
        }
        let shape = x.shape().to_vec();
        let needs = self.any_grad(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Softmax { a }, needs, "softmax")
    }

    /// Normalizes each row of `x` over its last dimension, then applies the
    /// learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::contract("layer_norm gain/bias must match the last dimension"));
        }
        let eps: T = lit(eps);
        let n: T = lit(c as f64);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                xhat[r * c + j] = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out = xhat.iter().enumerate().map(|(i, &h)| g[i % c] * h + b[i % c]).collect();
        let shape = xv.shape().to_vec();
        let needs = self.any_grad(&[x, gamma, beta]);
        self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, needs, "layer_norm")
    }

    /// Rows `ids` of a `[rows, d]` table, as `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::contract("gather_rows expects a matrix"));
        }
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no ids"));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(Error::contract(format!("row {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(t.row(i));
        }
        let needs = self.any_grad(&[table]);
        self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather { table, ids: ids.to_vec() },
            needs,
            "gather_rows",
        )
    }

    /// Mean over the rows of `x[L,d]` whose mask entry is true.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || xv.rows() != mask.len() {
            return Err(Error::contract("masked_mean_pool mask length must equal the row count"));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::contract("masked_mean_pool with every position masked"));
        }
        let d = xv.cols();
        let mut out = vec![T::zero(); d];
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (o, &v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let cnt: T = lit(count as f64);
        for o in &mut out {
            *o /= cnt;
        }
        let needs = self.any_grad(&[x]);
        self.push(Tensor::vector(out), Op::MaskedMeanPool { x, mask: mask.to_vec(), count }, needs, "masked_mean_pool")
    }

    /// Concatenation along the last dimension. All parts must agree on the
    /// leading extents.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let lead = self.shape(*first)[..self.shape(*first).len().saturating_sub(1)].to_vec();
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::contract("concat_last leading shapes differ"));
            }
            widths.push(self.value(p).cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let needs = self.any_grad(parts);
        let parts = parts.iter().copied().zip(widths).collect();
        self.push(Tensor::new(shape, out)?, Op::ConcatLast { parts }, needs, "concat_last")
    }

    /// Stacks rows: each part is `[r_i, d]` or a rank-1 `[d]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let d = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().is_empty() || v.shape().len() > 2 || v.cols() != d {
                return Err(Error::contract("concat_rows widths differ"));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let needs = self.any_grad(parts);
        self.push(Tensor::new(vec![rows, d], out)?, Op::ConcatRows { parts: parts.to_vec() }, needs, "concat_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let c = v.cols();
        if v.shape().len() != 2 || start + len > c || len == 0 {
            return Err(Error::contract("slice_cols out of range"));
        }
        let mut out = Vec::with_capacity(v.rows() * len);
        for r in 0..v.rows() {
            out.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let shape = vec![v.rows(), len];
        let needs = self.any_grad(&[a]);
        self.push(Tensor::new(shape, out)?, Op::SliceCols { a, start }, needs, "slice_cols")
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sa != sb {
            return Err(Error::contract(format!("dot expects equal vectors, got {sa:?}.{sb:?}")));
        }
        let s = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).sum();
        let needs = self.any_grad(&[a, b]);
        self.push(Tensor::scalar(s), Op::Dot { a, b }, needs, "dot")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        let needs = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, needs, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<T>() / lit(v.numel() as f64);
        let needs = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean { a }, needs, "mean")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let needs = self.any_grad(&[a]);
        self.push(t, Op::Reshape { a }, needs, "reshape")
    }

    /// Mean negative log-likelihood of `targets` under a row-wise softmax of
    /// `logits[m,c]`. Rows whose target is `None` are skipped; columns where
    /// `mask` is false are excluded from the normalizer.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(logits);
        if x.shape().len() != 2 || x.rows() != targets.len() {
            return Err(Error::contract("cross_entropy expects one target per logit row"));
        }
        let c = x.cols();
        if let Some(m) = mask {
            if m.len() != x.numel() {
                return Err(Error::contract("cross_entropy mask size differs from logits"));
            }
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::contract("cross_entropy with no targets"));
        }
        let mut probs = vec![T::zero(); x.numel()];
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let active = |j: usize| mask.map_or(true, |m| m[r * c + j]);
            if t >= c || !active(t) {
                return Err(Error::contract(format!("target {t} is not an active class")));
            }
            let row = x.row(r);
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| active(*j))
                .fold(T::neg_infinity(), |m, (_, &v)| if v > m { v } else { m });
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if active(j) {
                    let e = (v - max).exp();
                    probs[r * c + j] = e;
                    sum += e;
                }
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p /= sum;
            }
            total += sum.ln() + max - row[t];
        }
        let loss = total / lit(count as f64);
        let needs = self.any_grad(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            needs,
            "cross_entropy",
        )
    }

    /// Consumes the tape and returns gradients of `loss` with respect to
    /// every recorded leaf.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(dout) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, &dout, &mut grads);
            grads[id] = Some(dout);
        }
        let mut by_param = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads[v.0].take().unwrap_or_else(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            by_param.insert(name.clone(), Tensor::new(self.nodes[v.0].value.shape().to_vec(), g)?);
        }
        let by_node = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match (&n.op, g) {
                (Op::Leaf, Some(g)) if n.needs_grad => Some(g),
                _ => None,
            })
            .collect();
        Ok(Gradients { by_param, by_node })
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, dout: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.requires_grad(a) {
                    let bv = self.value(b).data();
                    accumulate(grads, a, m * k, |g| gemm_nt_acc(g, dout, bv, m, n, k));
                }
                if self.requires_grad(b) {
                    let av = self.value(a).data();
                    accumulate(grads, b, k * n, |g| gemm_tn_acc(g, av, dout, m, k, n));
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if self.requires_grad(a) {
                    let bv = self.value(b).data();
                    accumulate(grads, a, m * k, |g| gemm_acc(g, dout, bv, m, n, k));
                }
                if self.requires_grad(b) {
                    let av = self.value(a).data();
                    accumulate(grads, b, n * k, |g| gemm_tn_acc(g, dout, av, m, n, k));
                }
            }
            &Op::Add { a, b, broadcast } => {
                if self.requires_grad(a) {
                    accumulate(grads, a, dout.len(), |g| add_into(g, dout));
                }
                if self.requires_grad(b) {
                    let c = self.value(b).numel();
                    accumulate(grads, b, c, |g| {
                        if broadcast {
                            for (i, &d) in dout.iter().enumerate() {
                                g[i % c] += d;
                            }
                        } else {
                            add_into(g, dout);
                        }
                    });
                }
            }
            &Op::Mul { a, b } => {
                for (x, y) in [(a, b), (b, a)] {
                    if self.requires_grad(x) {
                        let yv = self.value(y).data();
                        accumulate(grads, x, dout.len(), |g| {
                            for ((gi, &d), &yi) in g.iter_mut().zip(dout).zip(yv) {
                                *gi += d * yi;
                            }
                        });
                    }
                }
            }
            &Op::Scale { a, k } => {
                accumulate(grads, a, dout.len(), |g| {
                    for (gi, &d) in g.iter_mut().zip(dout) {
                        *gi += d * k;
                    }
                });
            }
            &Op::Relu { a } => {
                let xv = self.value(a).data();
                accumulate(grads, a, dout.len(), |g| {
                    for ((gi, &d), &x) in g.iter_mut().zip(dout).zip(xv) {
                        if x > T::zero() {
                            *gi += d;
                        }
                    }
                });
            }
            &Op::Softmax { a } => {
                let c = out.cols();
                let y = out.data();
                accumulate(grads, a, dout.len(), |g| {
                    for r in 0..out.rows() {
                        let s = r * c..(r + 1) * c;
                        let inner: T = y[s.clone()].iter().zip(&dout[s.clone()]).map(|(&p, &d)| p * d).sum();
                        for j in s {
                            g[j] += y[j] * (dout[j] - inner);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = out.cols();
                let rows = out.rows();
                if self.requires_grad(*gamma) {
                    accumulate(grads, *gamma, c, |g| {
                        for (i, (&d, &h)) in dout.iter().zip(xhat).enumerate() {
                            g[i % c] += d * h;
                        }
                    });
                }
                if self.requires_grad(*beta) {
                    accumulate(grads, *beta, c, |g| {
                        for (i, &d) in dout.iter().enumerate() {
                            g[i % c] += d;
                        }
                    });
                }
                if self.requires_grad(*x) {
                    let gv = self.value(*gamma).data();
                    let n: T = lit(c as f64);
                    accumulate(grads, *x, dout.len(), |g| {
                        let mut dxhat = vec![T::zero(); c];
                        for r in 0..rows {
                            let s = r * c;
                            for j in 0..c {
                                dxhat[j] = dout[s + j] * gv[j];
                            }
                            let mean_d = dxhat.iter().copied().sum::<T>() / n;
                            let mean_dh = dxhat.iter().zip(&xhat[s..s + c]).map(|(&d, &h)| d * h).sum::<T>() / n;
                            for j in 0..c {
                                g[s + j] += rstd[r] * (dxhat[j] - mean_d - xhat[s + j] * mean_dh);
                            }
                        }
                    });
                }
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                accumulate(grads, *table, t.numel(), |g| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut g[i * d..(i + 1) * d], &dout[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::MaskedMeanPool { x, mask, count } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let cnt: T = lit(*count as f64);
                accumulate(grads, *x, xv.numel(), |g| {
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for j in 0..d {
                            g[r * d + j] += dout[j] / cnt;
                        }
                    }
                });
            }
            Op::ConcatLast { parts } => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &(p, w) in parts {
                    if self.requires_grad(p) {
                        accumulate(grads, p, rows * w, |g| {
                            for r in 0..rows {
                                add_into(&mut g[r * w..(r + 1) * w], &dout[r * total + offset..r * total + offset + w]);
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.requires_grad(p) {
                        accumulate(grads, p, n, |g| add_into(g, &dout[offset..offset + n]));
                    }
                    offset += n;
                }
            }
            &Op::SliceCols { a, start } => {
                let c = self.value(a).cols();
                let len = out.cols();
                accumulate(grads, a, self.value(a).numel(), |g| {
                    for r in 0..out.rows() {
                        add_into(&mut g[r * c + start..r * c + start + len], &dout[r * len..(r + 1) * len]);
                    }
                });
            }
            &Op::Dot { a, b } => {
                for (x, y) in [(a, b), (b, a)] {
                    if self.requires_grad(x) {
                        let yv = self.value(y).data();
                        accumulate(grads, x, yv.len(), |g| {
                            for (gi, &yi) in g.iter_mut().zip(yv) {
                                *gi += dout[0] * yi;
                            }
                        });
                    }
                }
            }
            &Op::Sum { a } => {
                let n = self.value(a).numel();
                accumulate(grads, a, n, |g| g.iter_mut().for_each(|gi| *gi += dout[0]));
            }
            &Op::Mean { a } => {
                let n = self.value(a).numel();
                let d = dout[0] / lit(n as f64);
                accumulate(grads, a, n, |g| g.iter_mut().for_each(|gi| *gi += d));
            }
            &Op::Reshape { a } => {
                accumulate(grads, a, dout.len(), |g| add_into(g, dout));
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let c = self.value(*logits).cols();
                let scale = dout[0] / lit(*count as f64);
                accumulate(grads, *logits, probs.len(), |g| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..c {
                            g[r * c + j] += probs[r * c + j] * scale;
                        }
                        g[r * c + t] -= scale;
                    }
                });
            }
        }
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Vec<T>>], v: Var, n: usize, f: impl FnOnce(&mut [T])) {
    let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
    f(g);
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    by_param: BTreeMap<String, Tensor<T>>,
    by_node: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a named parameter; `None` if it never entered the graph.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_param.get(name)
    }

    /// Gradient of an [`Graph::input`] leaf created with `requires_grad`.
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    /// One entry per parameter of `store`; parameters the loss never touched
    /// get zeros.
    pub fn for_store(&self, store: &ParameterStore<T>) -> BTreeMap<String, Tensor<T>> {
        store
            .iter()
            .map(|(name, t)| {
                let g = self.by_param.get(name).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
                (name.to_string(), g)
            })
            .collect()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.by_param.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_finite(&self) -> bool {
        self.by_param.values().all(Tensor::is_finite)
    }
}
