//! Loss terms and their weighted combination.
//!
//! Every loss here is written as a quantity to *minimize*; the training
//! objective is the negative of the lower bound being maximized.
//!
//! - generative: `mean f(sampled) − mean f(real)`, whose gradient is the
//!   persistent contrastive divergence estimate of `−∇ log p(x)`;
//! - negative-free: `KL(N(0,Σ)‖N(0,I)) + ½ Σᵢ ‖enc(xᵢ) − enc(xᵢ′)‖²`;
//! - discriminative: swapped cross-entropy against Sinkhorn-Knopp targets;
//! - contrastive: InfoNCE;
//! - neuro-symbolic: `−log P(y₁ + y₂ = y₃)` per triplet.
//!
//! The entropy of the cluster posterior is carried by the entropic
//! regularization of the transport problem; targets are constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::{addition_probability, log_sum_exp, Graph, Var};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Floor applied to constraint probabilities before taking the log.
pub const NESY_LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub gen: f64,
    pub nf: f64,
    pub di_aug: f64,
    pub di_dam: f64,
    #[serde(default)]
    pub nesy: f64,
}

impl LossWeights {
    /// Default weights for a given batch size (negative-free weight `1/batch`).
    pub fn gedi(batch: usize) -> Self {
        Self {
            gen: 1.0,
            nf: 1.0 / batch as f64,
            di_aug: 1000.0,
            di_dam: 500.0,
            nesy: 0.0,
        }
    }

    pub fn zero() -> Self {
        Self {
            gen: 0.0,
            nf: 0.0,
            di_aug: 0.0,
            di_dam: 0.0,
            nesy: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("gen", self.gen),
            ("nf", self.nf),
            ("di_aug", self.di_aug),
            ("di_dam", self.di_dam),
            ("nesy", self.nesy),
        ] {
            ensure!(
                w.is_finite() && w >= 0.0,
                "loss weight `{name}` must be nonnegative, got {w}"
            );
        }
        Ok(())
    }
}

// ── Sinkhorn-Knopp ──────────────────────────────────────────────────

/// Soft assignment matrix with (approximately) uniform marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    /// `n × c`, rows sum to `1/n`, columns to `1/c`.
    pub q: Tensor,
    /// Largest absolute deviation of any row or column sum from uniform.
    pub marginal_error: f64,
}

/// Entropic optimal transport of `n` samples onto `c` clusters with uniform
/// marginals. Runs in the log domain; each iteration rescales columns then
/// rows, so row sums are exact on return.
pub fn sinkhorn(scores: &Tensor, epsilon: f64, iters: usize) -> Result<TransportPlan> {
    ensure!(scores.rank() == 2, "sinkhorn expects an n×c score matrix");
    ensure!(epsilon > 0.0, "sinkhorn epsilon must be positive");
    ensure!(iters >= 1, "sinkhorn needs at least one iteration");
    ensure!(scores.is_finite(), "sinkhorn scores must be finite");
    let (n, c) = (scores.rows(), scores.cols());
    let log_k = scores.map(|s| s / epsilon);
    let log_row = -(n as f64).ln();
    let log_col = -(c as f64).ln();
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; c];
    let mut buf = vec![0.0; n.max(c)];
    for _ in 0..iters {
        for j in 0..c {
            for i in 0..n {
                buf[i] = log_k.get(i, j) + u[i];
            }
            v[j] = log_col - log_sum_exp(&buf[..n]);
        }
        for i in 0..n {
            for j in 0..c {
                buf[j] = log_k.get(i, j) + v[j];
            }
            u[i] = log_row - log_sum_exp(&buf[..c]);
        }
    }
    let mut q = Tensor::zeros(&[n, c]);
    for i in 0..n {
        for j in 0..c {
            q.set(i, j, (log_k.get(i, j) + u[i] + v[j]).exp());
        }
    }
    let marginal_error = marginal_error(&q);
    Ok(TransportPlan { q, marginal_error })
}

fn marginal_error(q: &Tensor) -> f64 {
    let (n, c) = (q.rows(), q.cols());
    let mut err: f64 = 0.0;
    for i in 0..n {
        err = err.max((q.row(i).iter().sum::<f64>() - 1.0 / n as f64).abs());
    }
    for j in 0..c {
        let s: f64 = (0..n).map(|i| q.get(i, j)).sum();
        err = err.max((s - 1.0 / c as f64).abs());
    }
    err
}

// ── discriminative ──────────────────────────────────────────────────

/// `−Σᵢ Σ_y Q_{iy} log softmax(logits)_{iy}`: the mean cross-entropy of the
/// predictions against the per-sample targets `n·Q_{i:}`.
pub fn loss_di(g: &mut Graph, logits: Var, plan: &TransportPlan) -> Result<Var> {
    ensure!(
        g.value(logits).shape() == plan.q.shape(),
        "loss_di: logits {:?} and plan {:?} differ",
        g.value(logits).shape(),
        plan.q.shape()
    );
    let logp = g.log_softmax_rows(logits)?;
    let q = g.constant(plan.q.clone());
    let prod = g.mul(logp, q)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub iters: usize,
    /// Average both prediction directions (x→x′ and x′→x).
    #[serde(default = "yes")]
    pub symmetrize: bool,
}

fn yes() -> bool {
    true
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            iters: 3,
            symmetrize: true,
        }
    }
}

/// Swapped prediction between two views: predictions on one view are
/// trained towards the transport plan computed from the other view's
/// cosine scores (`logits · τ`). Returns the loss and the worst marginal
/// error of the plans used.
pub fn loss_di_swapped(
    g: &mut Graph,
    logits_x: Var,
    logits_xp: Var,
    temperature: f64,
    cfg: &SinkhornConfig,
) -> Result<(Var, f64)> {
    let scores_xp = g.value(logits_xp).map(|v| v * temperature);
    let plan_xp = sinkhorn(&scores_xp, cfg.epsilon, cfg.iters)?;
    let forward = loss_di(g, logits_x, &plan_xp)?;
    if !cfg.symmetrize {
        return Ok((forward, plan_xp.marginal_error));
    }
    let scores_x = g.value(logits_x).map(|v| v * temperature);
    let plan_x = sinkhorn(&scores_x, cfg.epsilon, cfg.iters)?;
    let backward = loss_di(g, logits_xp, &plan_x)?;
    let both = g.add(forward, backward)?;
    Ok((
        g.scale(both, 0.5),
        plan_xp.marginal_error.max(plan_x.marginal_error),
    ))
}

// ── negative-free ───────────────────────────────────────────────────

/// Decorrelation (Gaussian KL of the batch covariance of `w`) plus
/// invariance (`½ Σᵢ ‖enc(xᵢ) − enc(xᵢ′)‖²`).
pub fn loss_nf(g: &mut Graph, enc_x: Var, enc_xp: Var, w: Var, beta: f64) -> Result<Var> {
    let sigma = g.batch_covariance(w, beta)?;
    let kl = gaussian_kl_to_standard(g, sigma)?;
    let diff = g.sub(enc_x, enc_xp)?;
    let sq = g.square(diff);
    let inv = g.sum(sq);
    let inv = g.scale(inv, 0.5);
    g.add(kl, inv)
}

/// `KL(N(0,Σ)‖N(0,I)) = (tr Σ − h − log|Σ|) / 2`
pub fn gaussian_kl_to_standard(g: &mut Graph, sigma: Var) -> Result<Var> {
    let h = g.value(sigma).rows() as f64;
    let tr = g.trace(sigma)?;
    let ld = g.logdet_psd(sigma)?;
    let d = g.sub(tr, ld)?;
    let shifted = g.scale(d, 0.5);
    // The constant −h/2 is kept so that Σ = I gives exactly zero.
    let offset = g.constant(Tensor::scalar(-0.5 * h));
    g.add(shifted, offset)
}

// ── contrastive ─────────────────────────────────────────────────────

/// InfoNCE over paired unit embeddings: row `i` of `w` must pick `w′ᵢ`
/// among all rows of `w′`.
pub fn loss_infonce(g: &mut Graph, w: Var, wp: Var, temperature: f64) -> Result<Var> {
    ensure!(
        g.value(w).rows() >= 1,
        "loss_infonce needs a nonempty batch"
    );
    ensure!(
        g.value(w).shape() == g.value(wp).shape(),
        "loss_infonce: paired batches differ in shape"
    );
    let n = g.value(w).rows();
    let wpt = g.transpose(wp)?;
    let sims = g.matmul(w, wpt)?;
    let logits = g.scale(sims, 1.0 / temperature);
    let logp = g.log_softmax_rows(logits)?;
    let eye = g.constant(Tensor::identity(n));
    let diag = g.mul(logp, eye)?;
    let s = g.sum(diag);
    Ok(g.scale(s, -1.0 / n as f64))
}

// ── generative ──────────────────────────────────────────────────────

/// `mean f(sampled) − mean f(real)` for log-density columns `f`.
pub fn loss_gen(g: &mut Graph, f_real: Var, f_sampled: Var) -> Result<Var> {
    ensure!(
        !g.value(f_real).is_empty() && !g.value(f_sampled).is_empty(),
        "loss_gen needs nonempty batches"
    );
    let a = g.mean(f_sampled);
    let b = g.mean(f_real);
    g.sub(a, b)
}

// ── neuro-symbolic ──────────────────────────────────────────────────

/// `P(y₁ + y₂ = y₃)` for three digit distributions.
pub fn constraint_prob(p1: &[f64], p2: &[f64], p3: &[f64]) -> Result<f64> {
    for (k, p) in [p1, p2, p3].iter().enumerate() {
        ensure!(
            p.len() == p1.len() && !p.is_empty(),
            "constraint_prob: distributions must share a nonzero length"
        );
        ensure!(
            p.iter().all(|&v| v >= 0.0),
            "constraint_prob: distribution {} has negative entries",
            k + 1
        );
        let s: f64 = p.iter().sum();
        ensure!(
            (s - 1.0).abs() <= 1e-9,
            "constraint_prob: distribution {} sums to {s}",
            k + 1
        );
    }
    Ok(addition_probability(p1, p2, p3))
}

/// `−(1/k) Σ_t log max(P_t, 10⁻¹²)` over `k` consecutive row triplets of
/// class probabilities.
pub fn loss_nesy(g: &mut Graph, probs: Var) -> Result<Var> {
    let rows = g.value(probs).rows();
    ensure!(
        rows >= 3 && rows.is_multiple_of(3),
        "loss_nesy: batch of {rows} rows is not a positive multiple of 3"
    );
    let p = g.addition_constraint(probs)?;
    let lp = g.log_clamped(p, NESY_LOG_FLOOR);
    let m = g.mean(lp);
    Ok(g.scale(m, -1.0))
}

// ── combination ─────────────────────────────────────────────────────

/// Individual loss terms computed on one batch; absent terms contribute 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub gen: Option<Var>,
    pub nf: Option<Var>,
    pub di_aug: Option<Var>,
    pub di_dam: Option<Var>,
    pub nesy: Option<Var>,
}

pub fn total_loss(g: &mut Graph, parts: &LossParts, weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let mut acc: Option<Var> = None;
    for (part, w) in [
        (parts.gen, weights.gen),
        (parts.nf, weights.nf),
        (parts.di_aug, weights.di_aug),
        (parts.di_dam, weights.di_dam),
        (parts.nesy, weights.nesy),
    ] {
        let Some(v) = part else { continue };
        if w == 0.0 {
            continue;
        }
        let term = g.scale(v, w);
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
}
