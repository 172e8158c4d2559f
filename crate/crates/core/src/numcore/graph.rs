//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its vector-Jacobian product. `backward` walks the tape in
//! reverse. Nodes that do not depend on any tracked input are never visited.

use std::rc::Rc;

use super::kernels::{self, sigmoid};
use super::{Real, RngState, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Clamp(Var, T, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: T,
        probs: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    IndexRows {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Relu(..) => "relu",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::IndexRows { .. } => "index_rows",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    training: bool,
    first_non_finite: Option<&'static str>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new(false)
    }
}

impl<T: Real> Graph<T> {
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            first_non_finite: None,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A tracked leaf (parameter or differentiable input).
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let mut v = t.clone();
        v.clear_grad();
        self.push(v, Op::Leaf, true)
    }

    /// An untracked leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        if self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some(op.name());
        }
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: &[usize], data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, tracked))
    }

    /// Errors if any forward value so far contained NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(op) => Err(Error::NonFinite(op.to_string())),
            None => Ok(()),
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Contract(format!("{op} expects a 2-D operand, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.data(a), self.data(b), m, k, n, &mut out);
        self.push_op(&[m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (n, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_bt_acc(self.data(a), self.data(b), m, k, n, &mut out);
        self.push_op(&[m, n], out, Op::MatMulBt(a, b), &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(&shape, out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(&shape, out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(&shape, out, Op::Mul(a, b), &[a, b])
    }

    /// `x[r×c] + bias[c]`, bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "add_row")?;
        if self.value(bias).numel() != c {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        self.push_op(&[r, c], out, Op::AddRow(x, bias), &[x, bias])
    }

    /// `x[r×c] ⊙ g[r]`, each row scaled by its own factor.
    pub fn mul_col(&mut self, x: Var, g: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "mul_col")?;
        if self.value(g).numel() != r {
            return Err(Error::shape("mul_col", self.shape(x), self.shape(g)));
        }
        let gs = self.data(g);
        let mut out = self.data(x).to_vec();
        for (row, &gv) in out.chunks_exact_mut(c).zip(gs) {
            row.iter_mut().for_each(|v| *v = *v * gv);
        }
        self.push_op(&[r, c], out, Op::MulCol(x, g), &[x, g])
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(&shape, out, op, &[x])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, |v| v + s, Op::AddScalar(x, s))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, T::ln, Op::Log(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::Contract("clamp with lo > hi".into()));
        }
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    pub fn min_scalar(&mut self, x: Var, hi: T) -> Result<Var> {
        self.clamp(x, T::neg_infinity(), hi)
    }

    pub fn max_scalar(&mut self, x: Var, lo: T) -> Result<Var> {
        self.clamp(x, lo, T::infinity())
    }

    /// Row-wise softmax over the last axis. Entries with `allowed[i] == false`
    /// (same layout as `x`) receive exactly zero probability.
    pub fn softmax_rows(&mut self, x: Var, allowed: Option<Rc<[bool]>>) -> Result<Var> {
        let (r, c) = self.dims2(x, "softmax")?;
        if let Some(a) = &allowed {
            if a.len() != r * c {
                return Err(Error::shape("softmax mask", &[r, c], &[a.len()]));
            }
        }
        let mut out = self.data(x).to_vec();
        for (i, row) in out.chunks_exact_mut(c).enumerate() {
            let mask = allowed.as_ref().map(|a| &a[i * c..(i + 1) * c]);
            if !kernels::softmax_in_place(row, mask) {
                return Err(Error::Contract(format!("attention row {i} has no allowed key")));
            }
        }
        self.push_op(&[r, c], out, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let mut out = vec![T::zero(); r * c];
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        kernels::layer_norm_rows(
            self.data(x),
            c,
            self.data(gamma),
            self.data(beta),
            eps,
            &mut out,
            &mut xhat,
            &mut rstd,
        );
        self.push_op(
            &[r, c],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::Contract("embedding of empty id list".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= rows {
                return Err(Error::Contract(format!("token id {id} outside table of {rows} rows")));
            }
            out.extend_from_slice(&self.data(table)[id * c..(id + 1) * c]);
        }
        self.push_op(
            &[ids.len(), c],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Inverted dropout. Identity (no node) when not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngState) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout rate {p} must be < 1")));
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.uniform_open() >= p { keep } else { T::zero() })
            .collect();
        let out = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(&shape, out, Op::Dropout { x, mask }, &[x])
    }

    /// Label-smoothed cross-entropy summed over rows:
    /// `Σ_rows −Σ_k q_k log p_k` with `q = (1−ε)·onehot(target) + ε/V`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let (r, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", &[r, v], &[targets.len()]));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Config(format!("label smoothing {smoothing} outside [0,1)")));
        }
        let eps = T::lit(smoothing);
        let mut probs = self.data(logits).to_vec();
        let mut total = T::zero();
        for (i, row) in probs.chunks_exact_mut(v).enumerate() {
            let t = targets[i];
            if t >= v {
                return Err(Error::Contract(format!("target {t} outside vocabulary {v}")));
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            let mut loss = T::zero();
            if smoothing > 0.0 {
                let mean_nll = row.iter().map(|&z| lse - z).sum::<T>() / T::lit(v as f64);
                loss = eps * mean_nll;
            }
            loss = loss + (T::one() - eps) * (lse - row[t]);
            total = total + loss;
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
        }
        self.push_op(
            &[1],
            vec![total],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing: eps,
                probs,
            },
            &[logits],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (r, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        self.push_op(&[r, total], out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, c) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += pr;
            out.extend_from_slice(self.data(p));
        }
        self.push_op(&[rows, c], out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(Error::Contract(format!("column slice {start}+{len} outside {c}")));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in self.data(x).chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        self.push_op(&[r, len], out, Op::SliceCols { x, start }, &[x])
    }

    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(x).index_rows(idx)?;
        let tracked = self.tracked(x);
        Ok(self.push(
            value,
            Op::IndexRows {
                x,
                idx: idx.to_vec(),
            },
            tracked,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum();
        self.push_op(&[1], vec![s], Op::Sum(x), &[x])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.vjp(&node.op, Var(i), &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, op: &Op<T>, out: Var, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].tracked {
                return;
            }
            let n = nodes[v.0].value.numel();
            let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(g);
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                acc(*a, &mut |g| kernels::matmul_bt_acc(dy, self.data(*b), m, n, k, g));
                acc(*b, &mut |g| kernels::matmul_at_acc(self.data(*a), dy, m, k, n, g));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                acc(*a, &mut |g| kernels::matmul_acc(dy, self.data(*b), m, n, k, g));
                acc(*b, &mut |g| kernels::matmul_at_acc(dy, self.data(*a), m, n, k, g));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| kernels::axpy(T::one(), dy, g));
                acc(*b, &mut |g| kernels::axpy(T::one(), dy, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| kernels::axpy(T::one(), dy, g));
                acc(*b, &mut |g| kernels::axpy(-T::one(), dy, g));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |g| {
                    for ((gv, &d), &bv) in g.iter_mut().zip(dy).zip(self.data(*b)) {
                        *gv = *gv + d * bv;
                    }
                });
                acc(*b, &mut |g| {
                    for ((gv, &d), &av) in g.iter_mut().zip(dy).zip(self.data(*a)) {
                        *gv = *gv + d * av;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                let c = self.shape(*x)[1];
                acc(*x, &mut |g| kernels::axpy(T::one(), dy, g));
                acc(*bias, &mut |g| {
                    for row in dy.chunks_exact(c) {
                        kernels::axpy(T::one(), row, g);
                    }
                });
            }
            Op::MulCol(x, gate) => {
                let c = self.shape(*x)[1];
                let gs = self.data(*gate);
                acc(*x, &mut |g| {
                    for ((grow, drow), &gv) in g.chunks_exact_mut(c).zip(dy.chunks_exact(c)).zip(gs) {
                        kernels::axpy(gv, drow, grow);
                    }
                });
                let xs = self.data(*x);
                acc(*gate, &mut |g| {
                    for (i, gv) in g.iter_mut().enumerate() {
                        *gv = *gv + kernels::dot(&dy[i * c..(i + 1) * c], &xs[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |g| kernels::axpy(*s, dy, g)),
            Op::AddScalar(x, _) => acc(*x, &mut |g| kernels::axpy(T::one(), dy, g)),
            Op::Sigmoid(x) => {
                let y = self.data(out);
                acc(*x, &mut |g| {
                    for ((gv, &d), &yv) in g.iter_mut().zip(dy).zip(y) {
                        *gv = *gv + d * yv * (T::one() - yv);
                    }
                });
            }
            Op::Exp(x) => {
                let y = self.data(out);
                acc(*x, &mut |g| {
                    for ((gv, &d), &yv) in g.iter_mut().zip(dy).zip(y) {
                        *gv = *gv + d * yv;
                    }
                });
            }
            Op::Log(x) => {
                let xs = self.data(*x);
                acc(*x, &mut |g| {
                    for ((gv, &d), &xv) in g.iter_mut().zip(dy).zip(xs) {
                        *gv = *gv + d / xv;
                    }
                });
            }
            Op::Relu(x) => {
                let xs = self.data(*x);
                acc(*x, &mut |g| {
                    for ((gv, &d), &xv) in g.iter_mut().zip(dy).zip(xs) {
                        if xv > T::zero() {
                            *gv = *gv + d;
                        }
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xs = self.data(*x);
                acc(*x, &mut |g| {
                    for ((gv, &d), &xv) in g.iter_mut().zip(dy).zip(xs) {
                        if xv > *lo && xv < *hi {
                            *gv = *gv + d;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = self.shape(*x)[1];
                let y = self.data(out);
                acc(*x, &mut |g| {
                    for ((grow, drow), yrow) in
                        g.chunks_exact_mut(c).zip(dy.chunks_exact(c)).zip(y.chunks_exact(c))
                    {
                        let s = kernels::dot(drow, yrow);
                        for ((gv, &d), &yv) in grow.iter_mut().zip(drow).zip(yrow) {
                            *gv = *gv + yv * (d - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.shape(*x)[1];
                let gm = self.data(*gamma);
                let n = T::lit(c as f64);
                acc(*x, &mut |g| {
                    let mut dxhat = vec![T::zero(); c];
                    for (r, (grow, drow)) in g.chunks_exact_mut(c).zip(dy.chunks_exact(c)).enumerate() {
                        let hrow = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = drow[j] * gm[j];
                        }
                        let s1: T = dxhat.iter().copied().sum();
                        let s2 = kernels::dot(&dxhat, hrow);
                        let k = rstd[r] / n;
                        for j in 0..c {
                            grow[j] = grow[j] + k * (n * dxhat[j] - s1 - hrow[j] * s2);
                        }
                    }
                });
                acc(*gamma, &mut |g| {
                    for (drow, hrow) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            g[j] = g[j] + drow[j] * hrow[j];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for drow in dy.chunks_exact(c) {
                        kernels::axpy(T::one(), drow, g);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let c = self.shape(*table)[1];
                acc(*table, &mut |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::axpy(T::one(), &dy[r * c..(r + 1) * c], &mut g[id * c..(id + 1) * c]);
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |g| {
                for ((gv, &d), &m) in g.iter_mut().zip(dy).zip(mask) {
                    *gv = *gv + d * m;
                }
            }),
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                let uniform = *smoothing / T::lit(v as f64);
                let scale = dy[0];
                acc(*logits, &mut |g| {
                    for (r, (grow, prow)) in g.chunks_exact_mut(v).zip(probs.chunks_exact(v)).enumerate() {
                        for (k, (gv, &p)) in grow.iter_mut().zip(prow).enumerate() {
                            let mut q = uniform;
                            if k == targets[r] {
                                q = q + T::one() - *smoothing;
                            }
                            *gv = *gv + scale * (p - q);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = self.shape(out)[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    acc(p, &mut |g| {
                        for (grow, drow) in g.chunks_exact_mut(w).zip(dy.chunks_exact(total)) {
                            kernels::axpy(T::one(), &drow[offset..offset + w], grow);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, &mut |g| kernels::axpy(T::one(), &dy[offset..offset + n], g));
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.shape(*x)[1];
                let w = self.shape(out)[1];
                acc(*x, &mut |g| {
                    for (grow, drow) in g.chunks_exact_mut(c).zip(dy.chunks_exact(w)) {
                        kernels::axpy(T::one(), drow, &mut grow[*start..*start + w]);
                    }
                });
            }
            Op::IndexRows { x, idx } => {
                let c = self.shape(*x)[1];
                acc(*x, &mut |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        kernels::axpy(T::one(), &dy[r * c..(r + 1) * c], &mut g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::Sum(x) => {
                let d = dy[0];
                acc(*x, &mut |g| g.iter_mut().for_each(|v| *v = *v + d));
            }
        }
    }
}
