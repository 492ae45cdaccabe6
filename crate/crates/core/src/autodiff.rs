//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are only
//! ever appended, so construction order is a topological order and
//! [`Graph::backward`] walks the tape in reverse.
//!
//! Leaves are created with [`Graph::param`] (differentiable) or
//! [`Graph::constant`]. Gradients are propagated only along nodes that
//! depend on a differentiable leaf.

use crate::error::{ensure, Error, Result};
use crate::tensor::{cholesky_inverse, Tensor};

/// Variance floor used by batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    LogClamped(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Covariance {
        w: Var,
        centered: Tensor,
    },
    LogDet {
        sigma: Var,
        inverse: Tensor,
    },
    Trace(Var),
    AdditionConstraint(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddRow(..) => "add_row",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Exp(..) => "exp",
            Op::LogClamped(..) => "log",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::LogSoftmaxRows(..) => "log_softmax",
            Op::SoftmaxRows(..) => "softmax",
            Op::NormalizeRows { .. } => "l2_normalize",
            Op::BatchNormTrain { .. } => "batch_norm(train)",
            Op::BatchNormEval { .. } => "batch_norm(eval)",
            Op::Covariance { .. } => "batch_covariance",
            Op::LogDet { .. } => "logdet_psd",
            Op::Trace(..) => "trace",
            Op::AdditionConstraint(..) => "addition_constraint",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddRow(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::LeakyRelu(a, _)
            | Op::Exp(a)
            | Op::LogClamped(a, _)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::LogSoftmaxRows(a)
            | Op::SoftmaxRows(a)
            | Op::Trace(a)
            | Op::AdditionConstraint(a) => vec![a],
            Op::NormalizeRows { x, .. } => vec![x],
            Op::BatchNormTrain { x, gamma, beta, .. }
            | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![x, gamma, beta]
            }
            Op::Covariance { w, .. } => vec![w],
            Op::LogDet { sigma, .. } => vec![sigma],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of evaluated operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    first_non_finite: Option<(usize, &'static str)>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`; zeros when `v` is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Moves the gradient out, leaving zeros semantics for later calls.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Operation that first produced a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.first_non_finite.map(|(_, name)| name)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let idx = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((idx, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(idx)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            "{op}: shapes differ, {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    fn matrix(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        ensure!(s.len() == 2, "{op}: expected a matrix, got shape {s:?}");
        Ok((s[0], s[1]))
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).map(|x| x.max(floor).ln());
        self.push(v, Op::LogClamped(a, floor))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    // ── reductions and shape ────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.matrix(a, "transpose")?;
        let v = self.value(a).transpose();
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix(a, "trace")?;
        ensure!(r == c, "trace of non-square {r}x{c}");
        let t = self.value(a);
        let v = Tensor::scalar((0..r).map(|i| t.get(i, i)).sum());
        Ok(self.push(v, Op::Trace(a)))
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matrix(a, "matmul")?;
        self.matrix(b, "matmul")?;
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `x + b` with the vector `b` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c) = self.matrix(x, "add_row")?;
        ensure!(
            self.shape(b) == [c],
            "add_row: bias shape {:?} does not match {c} columns",
            self.shape(b)
        );
        let mut v = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in v.data_mut().chunks_mut(c) {
            for (o, bi) in row.iter_mut().zip(&bias) {
                *o += bi;
            }
        }
        Ok(self.push(v, Op::AddRow(x, b)))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.matrix(x, "log_softmax")?;
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|r| *r -= lse);
        }
        Ok(self.push(v, Op::LogSoftmaxRows(x)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.matrix(x, "softmax")?;
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|r| *r = (*r - lse).exp());
        }
        Ok(self.push(v, Op::SoftmaxRows(x)))
    }

    /// Projects every row onto the unit sphere.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.matrix(x, "l2_normalize")?;
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(v.rows());
        for (i, row) in v.data_mut().chunks_mut(c).enumerate() {
            let n = row.iter().map(|r| r * r).sum::<f64>().sqrt();
            if !n.is_finite() || n <= 0.0 {
                return Err(Error::Numerical {
                    op: "l2_normalize",
                    detail: format!("row {i} has norm {n}"),
                });
            }
            row.iter_mut().for_each(|r| *r /= n);
            norms.push(n);
        }
        Ok(self.push(v, Op::NormalizeRows { x, norms }))
    }

    /// Batch normalization using the statistics of the batch itself.
    /// Returns the output together with the batch mean and (biased) variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c) = self.matrix(x, "batch_norm")?;
        ensure!(
            n >= 2,
            "batch_norm in training mode needs a batch of at least 2, got {n}"
        );
        ensure!(
            self.shape(gamma) == [c] && self.shape(beta) == [c],
            "batch_norm: affine parameters must have shape [{c}]"
        );
        let xv = self.value(x);
        let mean = xv.column_means();
        let mut var = vec![0.0; c];
        for row in xv.data().chunks(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, &mean, &inv_std);
        let v = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let (_, c) = self.matrix(x, "batch_norm")?;
        ensure!(
            self.shape(gamma) == [c]
                && self.shape(beta) == [c]
                && running_mean.len() == c
                && running_var.len() == c,
            "batch_norm: parameter and statistic lengths must equal {c}"
        );
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, running_mean, &inv_std);
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Tensor, Tensor) {
        let xv = self.value(x);
        let c = xv.cols();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = xv.clone();
        for row in xhat.data_mut().chunks_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(c) {
            for j in 0..c {
                row[j] = g[j] * row[j] + b[j];
            }
        }
        (xhat, out)
    }

    /// Unnormalized batch covariance `Σᵢ (wᵢ − w̄)(wᵢ − w̄)ᵀ + βI` of the rows of `w`.
    pub fn batch_covariance(&mut self, w: Var, beta: f64) -> Result<Var> {
        let (n, h) = self.matrix(w, "batch_covariance")?;
        ensure!(
            beta > 0.0,
            "batch_covariance: beta must be positive, got {beta}"
        );
        let wv = self.value(w);
        let mean = wv.column_means();
        let mut centered = wv.clone();
        for row in centered.data_mut().chunks_mut(h) {
            for j in 0..h {
                row[j] -= mean[j];
            }
        }
        debug_assert!(n >= 1);
        let mut sigma = centered.matmul_tn(&centered)?;
        for i in 0..h {
            let d = sigma.get(i, i);
            sigma.set(i, i, d + beta);
        }
        Ok(self.push(sigma, Op::Covariance { w, centered }))
    }

    /// `log|Σ|` of a symmetric positive-definite matrix via Cholesky.
    /// The input is symmetrized first, so the gradient is `Σ⁻¹`.
    pub fn logdet_psd(&mut self, sigma: Var) -> Result<Var> {
        let (r, c) = self.matrix(sigma, "logdet_psd")?;
        ensure!(r == c, "logdet_psd of non-square {r}x{c}");
        let s = self.value(sigma);
        let sym = s.zip_map(&s.transpose(), |a, b| 0.5 * (a + b));
        let l = sym.cholesky().ok_or_else(|| Error::Numerical {
            op: "logdet_psd",
            detail: "matrix is not positive-definite".into(),
        })?;
        let logdet = 2.0 * (0..r).map(|i| l.get(i, i).ln()).sum::<f64>();
        let inverse = cholesky_inverse(&l);
        Ok(self.push(Tensor::scalar(logdet), Op::LogDet { sigma, inverse }))
    }

    /// Probability that per-row digit distributions of consecutive triplets
    /// satisfy `y₁ + y₂ = y₃`. Input is `3k × m`, output has shape `[k]`.
    pub fn addition_constraint(&mut self, probs: Var) -> Result<Var> {
        let (n, m) = self.matrix(probs, "addition_constraint")?;
        ensure!(
            n % 3 == 0,
            "addition_constraint: {n} rows is not a multiple of 3"
        );
        let p = self.value(probs);
        let out: Vec<f64> = (0..n / 3)
            .map(|t| addition_probability(p.row(3 * t), p.row(3 * t + 1), p.row(3 * t + 2)))
            .collect();
        debug_assert!(m > 0);
        Ok(self.push(Tensor::vector(out), Op::AdditionConstraint(probs)))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        ensure!(
            self.value(loss).len() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        if let Some((idx, name)) = self.first_non_finite {
            if idx <= loss.0 {
                return Err(Error::Numerical {
                    op: name,
                    detail: format!("non-finite value produced at node {idx}"),
                });
            }
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.local_gradients(&node.op, &node.value, &g)?;
            for (input, contribution) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if !contribution.is_finite() {
                    return Err(Error::Numerical {
                        op: node.op.name(),
                        detail: format!("non-finite gradient flowing into node {}", input.0),
                    });
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.axpy(1.0, &contribution),
                    slot => *slot = Some(contribution),
                }
            }
            // Interior nodes keep their gradient available for inspection.
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_gradients(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut res = Vec::with_capacity(3);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                res.push((a, g.clone()));
                res.push((b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((a, g.clone()));
                res.push((b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    res.push((a, g.zip_map(val(b), |x, y| x * y)));
                }
                if self.wants(b) {
                    res.push((b, g.zip_map(val(a), |x, y| x * y)));
                }
            }
            Op::Scale(a, c) => res.push((a, g.map(|x| c * x))),
            Op::MatMul(a, b) => {
                if self.wants(a) {
                    res.push((a, g.matmul_nt(val(b))?));
                }
                if self.wants(b) {
                    res.push((b, val(a).matmul_tn(g)?));
                }
            }
            Op::Transpose(a) => res.push((a, g.transpose())),
            Op::AddRow(x, b) => {
                if self.wants(b) {
                    res.push((b, Tensor::vector(column_sums(g))));
                }
                res.push((x, g.clone()));
            }
            Op::LeakyRelu(a, slope) => {
                res.push((
                    a,
                    g.zip_map(val(a), |gi, x| if x > 0.0 { gi } else { slope * gi }),
                ));
            }
            Op::Exp(a) => res.push((a, g.zip_map(out, |gi, y| gi * y))),
            Op::LogClamped(a, floor) => {
                res.push((
                    a,
                    g.zip_map(val(a), |gi, x| if x > floor { gi / x } else { 0.0 }),
                ));
            }
            Op::Square(a) => res.push((a, g.zip_map(val(a), |gi, x| 2.0 * gi * x))),
            Op::Sum(a) => res.push((a, Tensor::full(val(a).shape(), g.item()))),
            Op::Mean(a) => {
                let n = val(a).len() as f64;
                res.push((a, Tensor::full(val(a).shape(), g.item() / n)));
            }
            Op::Reshape(a) => res.push((a, g.clone().reshape(val(a).shape())?)),
            Op::LogSoftmaxRows(a) => {
                let c = out.cols();
                let mut ga = g.clone();
                for (grow, yrow) in ga.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let s: f64 = grow.iter().sum();
                    for (gi, y) in grow.iter_mut().zip(yrow) {
                        *gi -= y.exp() * s;
                    }
                }
                res.push((a, ga));
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut ga = g.clone();
                for (grow, yrow) in ga.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let s: f64 = grow.iter().zip(yrow).map(|(gi, y)| gi * y).sum();
                    for (gi, y) in grow.iter_mut().zip(yrow) {
                        *gi = y * (*gi - s);
                    }
                }
                res.push((a, ga));
            }
            Op::NormalizeRows { x, ref norms } => {
                let c = out.cols();
                let mut gx = g.clone();
                for ((grow, yrow), n) in gx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(norms)
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(gi, y)| gi * y).sum();
                    for (gi, y) in grow.iter_mut().zip(yrow) {
                        *gi = (*gi - y * dot) / n;
                    }
                }
                res.push((x, gx));
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
            } => {
                let (n, c) = (xhat.rows(), xhat.cols());
                let gam = val(gamma).data();
                if self.wants(gamma) {
                    res.push((
                        gamma,
                        Tensor::vector(column_sums(&g.zip_map(xhat, |a, b| a * b))),
                    ));
                }
                if self.wants(beta) {
                    res.push((beta, Tensor::vector(column_sums(g))));
                }
                if self.wants(x) {
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for (grow, xrow) in g.data().chunks(c).zip(xhat.data().chunks(c)) {
                        for j in 0..c {
                            let gh = grow[j] * gam[j];
                            sum_g[j] += gh;
                            sum_gx[j] += gh * xrow[j];
                        }
                    }
                    let nf = n as f64;
                    let mut gx = g.clone();
                    for (grow, xrow) in gx.data_mut().chunks_mut(c).zip(xhat.data().chunks(c)) {
                        for j in 0..c {
                            let gh = grow[j] * gam[j];
                            grow[j] = inv_std[j] / nf * (nf * gh - sum_g[j] - xrow[j] * sum_gx[j]);
                        }
                    }
                    res.push((x, gx));
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
            } => {
                let c = xhat.cols();
                let gam = val(gamma).data();
                if self.wants(gamma) {
                    res.push((
                        gamma,
                        Tensor::vector(column_sums(&g.zip_map(xhat, |a, b| a * b))),
                    ));
                }
                if self.wants(beta) {
                    res.push((beta, Tensor::vector(column_sums(g))));
                }
                if self.wants(x) {
                    let mut gx = g.clone();
                    for row in gx.data_mut().chunks_mut(c) {
                        for j in 0..c {
                            row[j] *= gam[j] * inv_std[j];
                        }
                    }
                    res.push((x, gx));
                }
            }
            Op::Covariance { w, ref centered } => {
                // d/dW of CᵀC with C = W − 1w̄ᵀ is C(G + Gᵀ); the centering
                // term vanishes because the columns of C sum to zero.
                let sym = g.zip_map(&g.transpose(), |a, b| a + b);
                res.push((w, centered.matmul(&sym)?));
            }
            Op::LogDet { sigma, ref inverse } => {
                let s = g.item();
                res.push((sigma, inverse.map(|v| s * v)));
            }
            Op::Trace(a) => {
                let n = val(a).rows();
                let mut t = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    t.set(i, i, g.item());
                }
                res.push((a, t));
            }
            Op::AdditionConstraint(a) => {
                let p = val(a);
                let m = p.cols();
                let mut ga = Tensor::zeros(p.shape());
                for t in 0..p.rows() / 3 {
                    let (p1, p2, p3) = (p.row(3 * t), p.row(3 * t + 1), p.row(3 * t + 2));
                    let gt = g.data()[t];
                    let mut d1 = vec![0.0; m];
                    let mut d2 = vec![0.0; m];
                    let mut d3 = vec![0.0; m];
                    for a in 0..m {
                        for b in 0..m - a {
                            let c = a + b;
                            d1[a] += p2[b] * p3[c];
                            d2[b] += p1[a] * p3[c];
                            d3[c] += p1[a] * p2[b];
                        }
                    }
                    for (dst, src) in [(3 * t, &d1), (3 * t + 1, &d2), (3 * t + 2, &d3)] {
                        for (o, s) in ga.row_mut(dst).iter_mut().zip(src.iter()) {
                            *o = gt * s;
                        }
                    }
                }
                res.push((a, ga));
            }
        }
        Ok(res)
    }
}

/// `Σ_{a+b=c, c<m} p1(a) p2(b) p3(c)` for distributions over `m` digits.
pub fn addition_probability(p1: &[f64], p2: &[f64], p3: &[f64]) -> f64 {
    let m = p1.len();
    let mut total = 0.0;
    for a in 0..m {
        for b in 0..m - a {
            total += p1[a] * p2[b] * p3[a + b];
        }
    }
    total
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|r| (r - max).exp()).sum::<f64>().ln()
}

fn column_sums(t: &Tensor) -> Vec<f64> {
    let c = t.cols();
    let mut s = vec![0.0; c];
    for row in t.data().chunks(c) {
        for (acc, v) in s.iter_mut().zip(row) {
            *acc += v;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, SeededRng};
    use proptest::prelude::*;

    fn random(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng::normal(rng)).collect()).unwrap()
    }

    fn random_pd(rng: &mut SeededRng, h: usize) -> Tensor {
        let a = random(rng, &[h, h]);
        let mut s = a.matmul_tn(&a).unwrap();
        for i in 0..h {
            s.set(i, i, s.get(i, i) + 0.5);
        }
        s
    }

    /// Compares reverse-mode gradients of `build` with central differences
    /// (h = 1e-5) for every input, returning the worst norm-relative error.
    fn grad_check<F>(inputs: &[Tensor], build: F) -> f64
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let eval = |xs: &[Tensor]| {
            let mut g = Graph::new();
            let vs: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
            let out = build(&mut g, &vs);
            let loss = g.sum(out);
            g.value(loss).item()
        };
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
        let out = build(&mut g, &vs);
        let loss = g.sum(out);
        let grads = g.backward(loss).unwrap();
        let step = 1e-5;
        let mut worst: f64 = 0.0;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vs[k]);
            let mut numeric = vec![0.0; x.len()];
            for i in 0..x.len() {
                let mut xs = inputs.to_vec();
                xs[k].data_mut()[i] += step;
                let up = eval(&xs);
                xs[k].data_mut()[i] -= 2.0 * step;
                let down = eval(&xs);
                numeric[i] = (up - down) / (2.0 * step);
            }
            let diff = analytic
                .data()
                .iter()
                .zip(&numeric)
                .map(|(a, n)| (a - n).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = analytic
                .norm()
                .max(numeric.iter().map(|v| v * v).sum::<f64>().sqrt())
                .max(1e-6);
            worst = worst.max(diff / scale);
        }
        worst
    }

    fn check_over_seeds(
        label: &str,
        make: impl Fn(&mut SeededRng) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Var>),
    ) {
        for seed in 0..20 {
            let mut r = rng::seeded(seed);
            let (inputs, build) = make(&mut r);
            let err = grad_check(&inputs, build);
            assert!(err <= 1e-4, "{label}: seed {seed} relative error {err}");
        }
    }

    // Random weights on the output keep the sum from hiding sign errors.
    fn weighted(g: &mut Graph, out: Var, w: &Tensor) -> Var {
        let c = g.constant(w.clone());
        g.mul(out, c).unwrap()
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x).item(), 6.0);
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[3, 4], 2.5));
        let s = g.sum(x);
        assert!(g
            .backward(s)
            .unwrap()
            .wrt(x)
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn unreachable_params_get_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let y = g.param(Tensor::vector(vec![1.0, 2.0]));
        let s = g.square(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(y).data(), &[0.0, 0.0]);
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn constants_carry_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).item(), 5.0);
        assert!(!g.requires_grad(c));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_is_reported_with_op_name() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1000.0));
        let e = g.exp(x);
        let y = g.mul(e, e).unwrap();
        match g.backward(y) {
            Err(Error::Numerical { op, .. }) => assert_eq!(op, "exp"),
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        check_over_seeds("mlp", |r| {
            let x = random(r, &[5, 4]);
            let w1 = random(r, &[4, 6]);
            let b1 = random(r, &[6]);
            let w2 = random(r, &[6, 5]);
            let b2 = random(r, &[5]);
            let w3 = random(r, &[5, 1]);
            (
                vec![x, w1, b1, w2, b2, w3],
                Box::new(|g: &mut Graph, v: &[Var]| {
                    let h = g.matmul(v[0], v[1]).unwrap();
                    let h = g.add_row(h, v[2]).unwrap();
                    let h = g.leaky_relu(h, 0.2);
                    let h = g.matmul(h, v[3]).unwrap();
                    let h = g.add_row(h, v[4]).unwrap();
                    let h = g.leaky_relu(h, 0.2);
                    g.matmul(h, v[5]).unwrap()
                }),
            )
        });
    }

    #[test]
    fn elementwise_gradients() {
        check_over_seeds("elementwise", |r| {
            let a = random(r, &[3, 4]);
            let b = random(r, &[3, 4]);
            let w = random(r, &[3, 4]);
            (
                vec![a, b],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let s = g.sub(v[0], v[1]).unwrap();
                    let p = g.mul(s, v[1]).unwrap();
                    let q = g.square(p);
                    let e = g.exp(v[0]);
                    let t = g.add(q, e).unwrap();
                    let t = g.scale(t, 0.7);
                    let t = g.transpose(t).unwrap();
                    let t = g.transpose(t).unwrap();
                    let t = g.reshape(t, &[12]).unwrap();
                    let t = g.reshape(t, &[3, 4]).unwrap();
                    let m = g.mean(t);
                    let out = weighted(g, t, &w);
                    let s = g.sum(out);
                    g.add(s, m).unwrap()
                }),
            )
        });
    }

    #[test]
    fn log_gradient_above_floor() {
        check_over_seeds("log", |r| {
            let a = random(r, &[6]).map(|v| v.abs() + 0.1);
            let w = random(r, &[6]);
            (
                vec![a],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let l = g.log_clamped(v[0], 1e-12);
                    weighted(g, l, &w)
                }),
            )
        });
    }

    #[test]
    fn softmax_gradients() {
        check_over_seeds("softmax", |r| {
            let a = random(r, &[4, 5]);
            let w1 = random(r, &[4, 5]);
            let w2 = random(r, &[4, 5]);
            (
                vec![a],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let l = g.log_softmax_rows(v[0]).unwrap();
                    let s = g.softmax_rows(v[0]).unwrap();
                    let l = weighted(g, l, &w1);
                    let s = weighted(g, s, &w2);
                    g.add(l, s).unwrap()
                }),
            )
        });
    }

    #[test]
    fn normalize_gradients() {
        check_over_seeds("l2_normalize", |r| {
            let a = random(r, &[4, 3]);
            let w = random(r, &[4, 3]);
            (
                vec![a],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let n = g.l2_normalize_rows(v[0]).unwrap();
                    weighted(g, n, &w)
                }),
            )
        });
    }

    #[test]
    fn normalize_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(2, 2, vec![3.0, 4.0, 0.6, 0.8]));
        let n = g.l2_normalize_rows(x).unwrap();
        let v = g.value(n).data();
        for (a, b) in v.iter().zip([0.6, 0.8, 0.6, 0.8]) {
            assert!((a - b).abs() < 1e-15);
        }
        let z = g.param(Tensor::matrix(1, 2, vec![0.0, 0.0]));
        assert!(matches!(
            g.l2_normalize_rows(z),
            Err(Error::Numerical { .. })
        ));
    }

    #[test]
    fn batch_norm_gradients() {
        check_over_seeds("batch_norm", |r| {
            let x = random(r, &[6, 3]);
            let gamma = random(r, &[3]);
            let beta = random(r, &[3]);
            let w = random(r, &[6, 3]);
            (
                vec![x, gamma, beta],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let (y, _, _) = g.batch_norm_train(v[0], v[1], v[2]).unwrap();
                    weighted(g, y, &w)
                }),
            )
        });
        check_over_seeds("batch_norm_eval", |r| {
            let x = random(r, &[4, 3]);
            let gamma = random(r, &[3]);
            let beta = random(r, &[3]);
            let w = random(r, &[4, 3]);
            (
                vec![x, gamma, beta],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let y = g
                        .batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0])
                        .unwrap();
                    weighted(g, y, &w)
                }),
            )
        });
    }

    #[test]
    fn batch_norm_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(3, 2, vec![7.0, 1.0, 7.0, 2.0, 7.0, 6.0]));
        let gamma = g.param(Tensor::vector(vec![1.0, 1.0]));
        let beta = g.param(Tensor::vector(vec![0.25, 0.0]));
        let (y, _, _) = g.batch_norm_train(x, gamma, beta).unwrap();
        let y = g.value(y);
        let col1: Vec<f64> = (0..3).map(|i| y.get(i, 1)).collect();
        for i in 0..3 {
            assert_eq!(y.get(i, 0), 0.25);
        }
        let mean = col1.iter().sum::<f64>() / 3.0;
        let var = col1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);

        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let gamma = g.param(Tensor::vector(vec![1.0, 1.0]));
        let beta = g.param(Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(
            g.batch_norm_train(x, gamma, beta),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn covariance_gradients() {
        check_over_seeds("batch_covariance", |r| {
            let w = random(r, &[5, 3]);
            let o = random(r, &[3, 3]);
            (
                vec![w],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let s = g.batch_covariance(v[0], 0.1).unwrap();
                    weighted(g, s, &o)
                }),
            )
        });
    }

    #[test]
    fn covariance_examples() {
        let mut g = Graph::new();
        let w = g.param(Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]));
        let s = g.batch_covariance(w, 0.1).unwrap();
        assert_eq!(g.value(s).data(), &[2.1, 0.0, 0.0, 0.1]);

        let w = g.param(Tensor::matrix(3, 2, vec![0.3, 0.4, 0.3, 0.4, 0.3, 0.4]));
        let s = g.batch_covariance(w, 0.5).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.0, 0.0, 0.5]);
        assert!(g.batch_covariance(w, 0.0).is_err());
    }

    #[test]
    fn logdet_examples() {
        let mut g = Graph::new();
        let i = g.param(Tensor::identity(4));
        let l = g.logdet_psd(i).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let d = g.param(Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]));
        let l = g.logdet_psd(d).unwrap();
        assert!((g.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-15);
        let bad = g.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]));
        assert!(matches!(g.logdet_psd(bad), Err(Error::Numerical { .. })));
    }

    #[test]
    fn logdet_gradients() {
        check_over_seeds("logdet", |r| {
            let s = random_pd(r, 5);
            (
                vec![s],
                Box::new(|g: &mut Graph, v: &[Var]| g.logdet_psd(v[0]).unwrap()),
            )
        });
    }

    #[test]
    fn trace_gradient() {
        check_over_seeds("trace", |r| {
            let s = random(r, &[4, 4]);
            (
                vec![s],
                Box::new(|g: &mut Graph, v: &[Var]| g.trace(v[0]).unwrap()),
            )
        });
    }

    #[test]
    fn addition_constraint_gradients() {
        check_over_seeds("addition_constraint", |r| {
            let logits = random(r, &[6, 10]);
            let w = random(r, &[2]);
            (
                vec![logits],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let p = g.softmax_rows(v[0]).unwrap();
                    let c = g.addition_constraint(p).unwrap();
                    weighted(g, c, &w)
                }),
            )
        });
    }

    #[test]
    fn backward_is_deterministic() {
        let build = |seed| {
            let mut r = rng::seeded(seed);
            let mut g = Graph::new();
            let x = g.param(random(&mut r, &[8, 3]));
            let w = g.param(random(&mut r, &[3, 3]));
            let h = g.matmul(x, w).unwrap();
            let s = g.batch_covariance(h, 1e-3).unwrap();
            let l = g.logdet_psd(s).unwrap();
            let grads = g.backward(l).unwrap();
            (grads.wrt(x), grads.wrt(w), g.backward(l).unwrap().wrt(w))
        };
        let (a1, b1, c1) = build(3);
        let (a2, b2, _) = build(3);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a1), bits(&a2));
        assert_eq!(bits(&b1), bits(&b2));
        assert_eq!(bits(&b1), bits(&c1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn covariance_eigenvalues_exceed_beta(
            n in 1usize..8,
            h in 1usize..6,
            seed in any::<u64>(),
            beta in 1e-4f64..1.0,
        ) {
            let mut r = rng::seeded(seed);
            let mut g = Graph::new();
            let w = g.param(random(&mut r, &[n, h]));
            let s = g.batch_covariance(w, beta).unwrap();
            let sigma = g.value(s);
            prop_assert_eq!(sigma.clone(), sigma.transpose());
            // Σ − β(1 − 1e-9)·I positive-definite ⇔ every eigenvalue ≥ β(1 − 1e-9).
            let mut shifted = sigma.clone();
            for i in 0..h {
                shifted.set(i, i, sigma.get(i, i) - beta * (1.0 - 1e-9));
            }
            prop_assert!(shifted.cholesky().is_some());
        }

        #[test]
        fn covariance_excess_rank_bounded(n in 1usize..5, seed in any::<u64>()) {
            // With n ≤ h, Σ − βI has rank ≤ n − 1 < h, so it is singular.
            let h = 5;
            let mut r = rng::seeded(seed);
            let mut g = Graph::new();
            let w = g.param(random(&mut r, &[n, h]));
            let s = g.batch_covariance(w, 1.0).unwrap();
            let mut excess = g.value(s).clone();
            for i in 0..h {
                excess.set(i, i, excess.get(i, i) - 1.0 - 1e-9);
            }
            prop_assert!(excess.cholesky().is_none());
        }

        #[test]
        fn normalized_rows_are_unit(seed in any::<u64>(), n in 1usize..6, d in 1usize..6) {
            let mut r = rng::seeded(seed);
            let mut g = Graph::new();
            let x = g.param(random(&mut r, &[n, d]));
            let y = g.l2_normalize_rows(x).unwrap();
            for i in 0..n {
                let norm = g.value(y).row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() <= 1e-12);
            }
        }
    }
}
