//! SGLD sampling with a persistent replay buffer, and the manifold walk
//! augmentation (DAM).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::{self, SeededRng};
use crate::tensor::Tensor;

/// A differentiable log unnormalized density over input rows.
pub trait LogDensity {
    /// Per-row `f(x)` and `∇ₓ f(x)` (same shape as `x`).
    fn log_density_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)>;
}

// ── replay buffer ───────────────────────────────────────────────────

/// FIFO store of persistent chain states.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    dim: usize,
    data: Vec<f64>,
    /// Slot the next push overwrites once full.
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0 && dim > 0);
        Self {
            capacity,
            dim,
            data: Vec::new(),
            head: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Appends a state, overwriting the oldest one when full.
    pub fn push(&mut self, state: &[f64]) {
        assert_eq!(state.len(), self.dim);
        if self.len() < self.capacity {
            self.data.extend_from_slice(state);
        } else {
            let h = self.head;
            self.data[h * self.dim..(h + 1) * self.dim].copy_from_slice(state);
            self.head = (h + 1) % self.capacity;
        }
    }

    /// Overwrites slot `i` in place.
    pub fn replace(&mut self, i: usize, state: &[f64]) {
        self.data[i * self.dim..(i + 1) * self.dim].copy_from_slice(state);
    }

    /// Uniformly chosen slot index, or `None` when empty.
    pub fn draw_index(&self, rng: &mut SeededRng) -> Option<usize> {
        (!self.is_empty()).then(|| rng.random_range(0..self.len()))
    }

    /// `n` uniform draws (with replacement). `None` when empty.
    pub fn draw(&self, n: usize, rng: &mut SeededRng) -> Option<(Vec<usize>, Tensor)> {
        if self.is_empty() || n == 0 {
            return None;
        }
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len())).collect();
        let mut data = Vec::with_capacity(n * self.dim);
        for &i in &idx {
            data.extend_from_slice(self.state(i));
        }
        Some((idx, Tensor::matrix(n, self.dim, data)))
    }

    /// Raw parts for serialization: (capacity, dim, head, flat states).
    pub fn to_parts(&self) -> (usize, usize, usize, &[f64]) {
        (self.capacity, self.dim, self.head, &self.data)
    }

    pub fn from_parts(capacity: usize, dim: usize, head: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            capacity > 0 && dim > 0,
            "buffer capacity and dim must be positive"
        );
        ensure!(
            data.len().is_multiple_of(dim),
            "buffer data is not a whole number of states"
        );
        ensure!(
            data.len() / dim <= capacity,
            "buffer holds more states than its capacity"
        );
        ensure!(head < capacity, "buffer head out of range");
        Ok(Self {
            capacity,
            dim,
            data,
            head,
        })
    }
}

// ── bounds ──────────────────────────────────────────────────────────

/// Axis-aligned box that chains are clamped to and reinitialized in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Self {
        Self {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
        }
    }

    /// Bounding box of the rows of `x`, widened by `margin` of its extent per side.
    pub fn of_data(x: &Tensor, margin: f64) -> Self {
        let d = x.cols();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for i in 0..x.rows() {
            for (j, &v) in x.row(i).iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        for j in 0..d {
            let pad = margin * (hi[j] - lo[j]);
            lo[j] -= pad;
            hi[j] += pad;
        }
        Self { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn clamp(&self, row: &mut [f64]) {
        for ((v, lo), hi) in row.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*lo, *hi);
        }
    }

    fn sample(&self, rng: &mut SeededRng) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&lo, &hi)| rng::uniform(rng, lo, hi))
            .collect()
    }
}

// ── SGLD ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgldConfig {
    pub steps: usize,
    pub step_size: f64,
    pub noise_std: f64,
    pub reinit_prob: f64,
    pub buffer_size: usize,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            step_size: 1.0,
            noise_std: 0.01,
            reinit_prob: 0.05,
            buffer_size: 10_000,
        }
    }
}

impl SgldConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, "sgld steps must be at least 1");
        ensure!(self.noise_std >= 0.0, "sgld noise_std must be nonnegative");
        ensure!(
            (0.0..=1.0).contains(&self.reinit_prob),
            "sgld reinit_prob must lie in [0, 1]"
        );
        ensure!(self.step_size >= 0.0, "sgld step_size must be nonnegative");
        ensure!(self.buffer_size >= 1, "buffer size must be positive");
        Ok(())
    }
}

/// Samples and diagnostics of one SGLD round.
#[derive(Clone, Debug)]
pub struct SgldOutput {
    pub samples: Tensor,
    /// Chains started from the uniform box instead of the buffer.
    pub reinit: usize,
    /// Chains reset after producing a non-finite state.
    pub nan_chains: usize,
}

/// Runs `batch` persistent chains of `x ← x + step·∇f(x) + σ·ξ`, clamped to
/// `bounds` after every step, and writes the final states back.
///
/// Chains drawn from the buffer are written back to their slot; freshly
/// initialized chains are appended.
pub fn sgld_sample(
    density: &dyn LogDensity,
    buffer: &mut ReplayBuffer,
    cfg: &SgldConfig,
    bounds: &Bounds,
    batch: usize,
    rng: &mut SeededRng,
) -> Result<SgldOutput> {
    cfg.validate()?;
    ensure!(batch >= 1, "sgld batch must be positive");
    ensure!(
        bounds.dim() == buffer.dim(),
        "bounds have dimension {}, buffer {}",
        bounds.dim(),
        buffer.dim()
    );
    let d = buffer.dim();
    let mut sources = Vec::with_capacity(batch);
    let mut data = Vec::with_capacity(batch * d);
    let mut reinit = 0;
    for _ in 0..batch {
        let from_buffer = !buffer.is_empty() && rng.random::<f64>() >= cfg.reinit_prob;
        if from_buffer {
            let i = buffer.draw_index(rng).expect("buffer is nonempty");
            data.extend_from_slice(buffer.state(i));
            sources.push(Some(i));
        } else {
            data.extend(bounds.sample(rng));
            sources.push(None);
            reinit += 1;
        }
    }
    let mut x = Tensor::matrix(batch, d, data);
    let mut nan_chains = 0;
    for _ in 0..cfg.steps {
        let (_, grad) = density.log_density_grad(&x)?;
        for i in 0..batch {
            let gi = grad.row(i).to_vec();
            let row = x.row_mut(i);
            for (v, gv) in row.iter_mut().zip(&gi) {
                *v += cfg.step_size * gv;
            }
            if cfg.noise_std > 0.0 {
                for v in row.iter_mut() {
                    *v += cfg.noise_std * rng::normal(rng);
                }
            }
            if row.iter().any(|v| !v.is_finite()) {
                nan_chains += 1;
                let fresh = bounds.sample(rng);
                row.copy_from_slice(&fresh);
            }
            bounds.clamp(row);
        }
    }
    for (i, src) in sources.iter().enumerate() {
        match src {
            Some(slot) => buffer.replace(*slot, x.row(i)),
            None => buffer.push(x.row(i)),
        }
    }
    Ok(SgldOutput {
        samples: x,
        reinit,
        nan_chains,
    })
}

// ── DAM ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DamConfig {
    /// Radius of the perturbation ball.
    pub epsilon: f64,
    /// Number of projected moves.
    pub steps: usize,
    /// Below this gradient norm the projection is skipped.
    #[serde(default = "default_grad_floor")]
    pub grad_floor: f64,
    /// Draw a new perturbation every move instead of reusing the first.
    #[serde(default)]
    pub fresh_delta: bool,
}

fn default_grad_floor() -> f64 {
    1e-8
}

impl Default for DamConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.03,
            steps: 10,
            grad_floor: default_grad_floor(),
            fresh_delta: false,
        }
    }
}

impl DamConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epsilon > 0.0, "dam epsilon must be positive");
        ensure!(self.grad_floor >= 0.0, "dam grad_floor must be nonnegative");
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DamOutput {
    pub augmented: Tensor,
    /// Row-moves where the gradient norm fell below the floor.
    pub skipped: usize,
}

/// One projected move, recorded for inspection.
#[derive(Clone, Debug)]
pub struct DamMove {
    pub displacement: Tensor,
    pub gradient: Tensor,
}

/// Walks each row along the tangent plane of the density's level set:
/// `x ← x + Δ − (gᵀΔ / ‖g‖²) g` with `g = ∇f(x + Δ)`.
pub fn dam(
    x: &Tensor,
    density: &dyn LogDensity,
    cfg: &DamConfig,
    rng: &mut SeededRng,
) -> Result<DamOutput> {
    dam_inner(x, density, cfg, rng, None)
}

/// [`dam`] that also returns every applied move.
pub fn dam_traced(
    x: &Tensor,
    density: &dyn LogDensity,
    cfg: &DamConfig,
    rng: &mut SeededRng,
) -> Result<(DamOutput, Vec<DamMove>)> {
    let mut trace = Vec::new();
    let out = dam_inner(x, density, cfg, rng, Some(&mut trace))?;
    Ok((out, trace))
}

fn dam_inner(
    x: &Tensor,
    density: &dyn LogDensity,
    cfg: &DamConfig,
    rng: &mut SeededRng,
    mut trace: Option<&mut Vec<DamMove>>,
) -> Result<DamOutput> {
    cfg.validate()?;
    ensure!(
        x.rank() == 2,
        "dam expects a batch matrix, got shape {:?}",
        x.shape()
    );
    let (n, d) = (x.rows(), x.cols());
    let mut cur = x.clone();
    let mut skipped = 0;
    if cfg.steps == 0 {
        return Ok(DamOutput {
            augmented: cur,
            skipped,
        });
    }
    let draw = |rng: &mut SeededRng| {
        let mut delta = Vec::with_capacity(n * d);
        for _ in 0..n {
            delta.extend(rng::in_ball(rng, d, cfg.epsilon));
        }
        Tensor::matrix(n, d, delta)
    };
    let mut delta = draw(rng);
    for _ in 0..cfg.steps {
        let probe = cur.zip_map(&delta, |a, b| a + b);
        let (_, grad) = density.log_density_grad(&probe)?;
        let mut disp = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let g = grad.row(i);
            let dl = delta.row(i);
            let gg: f64 = g.iter().map(|v| v * v).sum();
            let out = disp.row_mut(i);
            if gg.sqrt() < cfg.grad_floor || !gg.is_finite() {
                skipped += 1;
                out.copy_from_slice(dl);
            } else {
                let coef = g.iter().zip(dl).map(|(a, b)| a * b).sum::<f64>() / gg;
                for ((o, &di), &gi) in out.iter_mut().zip(dl).zip(g) {
                    *o = di - coef * gi;
                }
            }
        }
        cur.axpy(1.0, &disp);
        if let Some(t) = trace.as_deref_mut() {
            t.push(DamMove {
                displacement: disp,
                gradient: grad,
            });
        }
        if cfg.fresh_delta {
            delta = draw(rng);
        }
    }
    Ok(DamOutput {
        augmented: cur,
        skipped,
    })
}
