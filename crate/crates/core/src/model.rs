//! The GEDI network: an MLP encoder shared by an energy head and a
//! projector/prototype classification head.
//!
//! ```text
//!   x ──enc──▶ ξ ──proj──▶ w ∈ S^{h-1} ──cos/τ vs U──▶ cluster logits
//!              └──uᵀξ──▶ f(x)  (log unnormalized density)
//! ```
//!
//! The density is `p(x) ∝ exp(f(x))` with `f(x) = uᵀ enc(x)`; the partition
//! function is never evaluated.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::rng::{self, SeededRng};
use crate::sampling::LogDensity;
use crate::tensor::Tensor;

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub num_prototypes: usize,
    pub encoder_hidden: Vec<usize>,
    pub projector_hidden: usize,
    pub temperature: f64,
    pub leaky_slope: f64,
    /// Separate encoder for the discriminative head (ablation "2 enc.").
    #[serde(default)]
    pub two_encoders: bool,
}

impl ModelConfig {
    /// 2-D toy setting: encoder 100-100, h = 2, projector hidden 4, two clusters.
    pub fn toy() -> Self {
        Self {
            input_dim: 2,
            latent_dim: 2,
            num_prototypes: 2,
            encoder_hidden: vec![100, 100],
            projector_hidden: 4,
            temperature: 0.1,
            leaky_slope: 0.2,
            two_encoders: false,
        }
    }

    /// Flattened 28×28 digits: encoder 512-256, h = 128, projector hidden 256.
    pub fn mnist() -> Self {
        Self {
            input_dim: 784,
            latent_dim: 128,
            num_prototypes: 10,
            encoder_hidden: vec![512, 256],
            projector_hidden: 256,
            temperature: 0.1,
            leaky_slope: 0.2,
            two_encoders: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.input_dim > 0, "input_dim must be positive");
        ensure!(self.latent_dim > 0, "latent_dim must be positive");
        ensure!(self.num_prototypes > 0, "num_prototypes must be positive");
        ensure!(
            self.projector_hidden > 0,
            "projector_hidden must be positive"
        );
        ensure!(
            self.encoder_hidden.iter().all(|&w| w > 0),
            "encoder widths must be positive"
        );
        ensure!(self.temperature > 0.0, "temperature must be positive");
        ensure!(
            self.leaky_slope.is_finite() && self.leaky_slope >= 0.0,
            "leaky_slope must be nonnegative"
        );
        Ok(())
    }
}

/// Batch-norm behaviour of the projector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng::uniform(rng, -bound, bound))
            .collect();
        let b = (0..fan_out)
            .map(|_| rng::uniform(rng, -bound, bound))
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, w),
            bias: Tensor::vector(b),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: Tensor::full(&[width], 1.0),
            beta: Tensor::zeros(&[width]),
            running_mean: Tensor::zeros(&[width]),
            running_var: Tensor::full(&[width], 1.0),
        }
    }

    fn update(&mut self, mean: &[f64], var: &[f64], n: usize) {
        // Running variance tracks the unbiased estimate.
        let correction = if n > 1 {
            n as f64 / (n as f64 - 1.0)
        } else {
            1.0
        };
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
        }
    }
}

/// Multilayer perceptron with LeakyReLU between layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn init(rng: &mut SeededRng, widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Linear::init(rng, w[0], w[1]))
            .collect();
        Self { layers }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub hidden: Linear,
    pub hidden_bn: BatchNorm,
    pub out: Linear,
    pub out_bn: BatchNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GediModel {
    pub config: ModelConfig,
    pub encoder: Mlp,
    pub disc_encoder: Option<Mlp>,
    pub projector: Projector,
    /// `h × c`, unit-norm columns.
    pub prototypes: Tensor,
    /// Energy direction `u`, shape `[h]`.
    pub energy: Tensor,
}

/// Batch statistics produced by a training-mode projector pass.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub batch: usize,
    pub hidden: (Vec<f64>, Vec<f64>),
    pub out: (Vec<f64>, Vec<f64>),
}

/// Which encoder a forward pass goes through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Energy,
    Discriminative,
}

/// Parameters of a model placed on a graph as leaves.
#[derive(Clone, Debug)]
pub struct Bound {
    encoder: Vec<(Var, Var)>,
    disc_encoder: Option<Vec<(Var, Var)>>,
    proj: [Var; 8],
    prototypes: Var,
    energy: Var,
    /// All parameter leaves, in [`GediModel::params`] order.
    pub params: Vec<Var>,
}

impl GediModel {
    pub fn new(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut widths = vec![config.input_dim];
        widths.extend(&config.encoder_hidden);
        widths.push(config.latent_dim);
        let encoder = Mlp::init(rng, &widths);
        let disc_encoder = config.two_encoders.then(|| Mlp::init(rng, &widths));
        let (h, c, ph) = (
            config.latent_dim,
            config.num_prototypes,
            config.projector_hidden,
        );
        let projector = Projector {
            hidden: Linear::init(rng, h, ph),
            hidden_bn: BatchNorm::new(ph),
            out: Linear::init(rng, ph, h),
            out_bn: BatchNorm::new(h),
        };
        let mut prototypes = Tensor::matrix(h, c, (0..h * c).map(|_| rng::normal(rng)).collect());
        normalize_columns(&mut prototypes);
        let bound = 1.0 / (h as f64).sqrt();
        let energy = Tensor::vector((0..h).map(|_| rng.random_range(-bound..bound)).collect());
        Ok(Self {
            config,
            encoder,
            disc_encoder,
            projector,
            prototypes,
            energy,
        })
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &l.weight));
            out.push((format!("encoder.{i}.bias"), &l.bias));
        }
        if let Some(enc) = &self.disc_encoder {
            for (i, l) in enc.layers.iter().enumerate() {
                out.push((format!("disc_encoder.{i}.weight"), &l.weight));
                out.push((format!("disc_encoder.{i}.bias"), &l.bias));
            }
        }
        let p = &self.projector;
        out.push(("projector.hidden.weight".into(), &p.hidden.weight));
        out.push(("projector.hidden.bias".into(), &p.hidden.bias));
        out.push(("projector.hidden_bn.gamma".into(), &p.hidden_bn.gamma));
        out.push(("projector.hidden_bn.beta".into(), &p.hidden_bn.beta));
        out.push(("projector.out.weight".into(), &p.out.weight));
        out.push(("projector.out.bias".into(), &p.out.bias));
        out.push(("projector.out_bn.gamma".into(), &p.out_bn.gamma));
        out.push(("projector.out_bn.beta".into(), &p.out_bn.beta));
        out.push(("prototypes".into(), &self.prototypes));
        out.push(("energy".into(), &self.energy));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in self.encoder.layers.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if let Some(enc) = &mut self.disc_encoder {
            for l in enc.layers.iter_mut() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        let p = &mut self.projector;
        out.push(&mut p.hidden.weight);
        out.push(&mut p.hidden.bias);
        out.push(&mut p.hidden_bn.gamma);
        out.push(&mut p.hidden_bn.beta);
        out.push(&mut p.out.weight);
        out.push(&mut p.out.bias);
        out.push(&mut p.out_bn.gamma);
        out.push(&mut p.out_bn.beta);
        out.push(&mut self.prototypes);
        out.push(&mut self.energy);
        out
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        let p = &self.projector;
        vec![
            (
                "projector.hidden_bn.running_mean".into(),
                &p.hidden_bn.running_mean,
            ),
            (
                "projector.hidden_bn.running_var".into(),
                &p.hidden_bn.running_var,
            ),
            (
                "projector.out_bn.running_mean".into(),
                &p.out_bn.running_mean,
            ),
            ("projector.out_bn.running_var".into(), &p.out_bn.running_var),
        ]
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        let p = &mut self.projector;
        vec![
            &mut p.hidden_bn.running_mean,
            &mut p.hidden_bn.running_var,
            &mut p.out_bn.running_mean,
            &mut p.out_bn.running_var,
        ]
    }

    /// Indices into [`Self::params`] that belong to the energy model
    /// (energy encoder and `u`).
    pub fn energy_param_indices(&self) -> Vec<usize> {
        let n_enc = 2 * self.encoder.layers.len();
        let total = self.params().len();
        let mut idx: Vec<usize> = (0..n_enc).collect();
        idx.push(total - 1);
        idx
    }

    /// Places every parameter on `g`; `trainable` controls differentiability.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let mut params = Vec::new();
        let bind_mlp = |mlp: &Mlp, params: &mut Vec<Var>, leaf: &mut dyn FnMut(&Tensor) -> Var| {
            mlp.layers
                .iter()
                .map(|l| {
                    let w = leaf(&l.weight);
                    let b = leaf(&l.bias);
                    params.push(w);
                    params.push(b);
                    (w, b)
                })
                .collect::<Vec<_>>()
        };
        let encoder = bind_mlp(&self.encoder, &mut params, &mut leaf);
        let disc_encoder = self
            .disc_encoder
            .as_ref()
            .map(|m| bind_mlp(m, &mut params, &mut leaf));
        let p = &self.projector;
        let proj = [
            leaf(&p.hidden.weight),
            leaf(&p.hidden.bias),
            leaf(&p.hidden_bn.gamma),
            leaf(&p.hidden_bn.beta),
            leaf(&p.out.weight),
            leaf(&p.out.bias),
            leaf(&p.out_bn.gamma),
            leaf(&p.out_bn.beta),
        ];
        params.extend(proj);
        let prototypes = leaf(&self.prototypes);
        let energy = leaf(&self.energy);
        params.push(prototypes);
        params.push(energy);
        Bound {
            encoder,
            disc_encoder,
            proj,
            prototypes,
            energy,
            params,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        ensure!(
            x.rank() == 2 && x.cols() == self.config.input_dim,
            "input rows must have dimension {}, got shape {:?}",
            self.config.input_dim,
            x.shape()
        );
        Ok(())
    }

    // ── graph-level forward passes ──────────────────────────────────

    pub fn encode_var(&self, g: &mut Graph, b: &Bound, x: Var, head: Head) -> Result<Var> {
        let layers = match (head, &b.disc_encoder) {
            (Head::Discriminative, Some(d)) => d,
            _ => &b.encoder,
        };
        let mut h = x;
        for (i, &(w, bias)) in layers.iter().enumerate() {
            h = g.matmul(h, w)?;
            h = g.add_row(h, bias)?;
            if i + 1 < layers.len() {
                h = g.leaky_relu(h, self.config.leaky_slope);
            }
        }
        Ok(h)
    }

    /// Projector head: latent rows to unit-norm embeddings.
    pub fn project_var(
        &self,
        g: &mut Graph,
        b: &Bound,
        latent: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BnBatchStats>)> {
        let [w1, b1, g1, be1, w2, b2, g2, be2] = b.proj;
        let p = &self.projector;
        let n = g.value(latent).rows();
        let mut h = g.matmul(latent, w1)?;
        h = g.add_row(h, b1)?;
        let mut stats = None;
        let hidden_stats;
        match mode {
            Mode::Train => {
                let (o, m, v) = g.batch_norm_train(h, g1, be1)?;
                h = o;
                hidden_stats = Some((m, v));
            }
            Mode::Eval => {
                h = g.batch_norm_eval(
                    h,
                    g1,
                    be1,
                    p.hidden_bn.running_mean.data(),
                    p.hidden_bn.running_var.data(),
                )?;
                hidden_stats = None;
            }
        }
        h = g.leaky_relu(h, self.config.leaky_slope);
        h = g.matmul(h, w2)?;
        h = g.add_row(h, b2)?;
        match mode {
            Mode::Train => {
                let (o, m, v) = g.batch_norm_train(h, g2, be2)?;
                h = o;
                stats = Some(BnBatchStats {
                    batch: n,
                    hidden: hidden_stats.expect("train mode records hidden stats"),
                    out: (m, v),
                });
            }
            Mode::Eval => {
                h = g.batch_norm_eval(
                    h,
                    g2,
                    be2,
                    p.out_bn.running_mean.data(),
                    p.out_bn.running_var.data(),
                )?;
            }
        }
        let w = g.l2_normalize_rows(h)?;
        Ok((w, stats))
    }

    /// Cosine similarity of each embedding row with each prototype, over τ.
    pub fn logits_var(&self, g: &mut Graph, b: &Bound, w: Var) -> Result<Var> {
        let ut = g.transpose(b.prototypes)?;
        let ut = g.l2_normalize_rows(ut)?;
        let u = g.transpose(ut)?;
        let cos = g.matmul(w, u)?;
        Ok(g.scale(cos, 1.0 / self.config.temperature))
    }

    /// `f = uᵀ ξ` per row, shape `[n, 1]`.
    pub fn energy_var(&self, g: &mut Graph, b: &Bound, latent: Var) -> Result<Var> {
        let u = g.reshape(b.energy, &[self.config.latent_dim, 1])?;
        g.matmul(latent, u)
    }

    pub fn update_running_stats(&mut self, stats: &BnBatchStats) {
        self.projector
            .hidden_bn
            .update(&stats.hidden.0, &stats.hidden.1, stats.batch);
        self.projector
            .out_bn
            .update(&stats.out.0, &stats.out.1, stats.batch);
    }

    /// Rescales prototype columns to unit norm.
    pub fn renormalize_prototypes(&mut self) {
        normalize_columns(&mut self.prototypes);
    }

    // ── convenience evaluation (no gradients) ───────────────────────

    /// Latent rows `enc(x)` of the energy encoder.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encode_head(x, Head::Energy)
    }

    pub fn encode_head(&self, x: &Tensor, head: Head) -> Result<Tensor> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let z = self.encode_var(&mut g, &b, xv, head)?;
        Ok(g.value(z).clone())
    }

    /// Unit-norm embeddings of the discriminative path.
    pub fn embed(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let z = self.encode_var(&mut g, &b, xv, Head::Discriminative)?;
        let (w, _) = self.project_var(&mut g, &b, z, mode)?;
        Ok(g.value(w).clone())
    }

    /// `cos(wᵢ, U_{:y}) / τ` for embedding rows `w`.
    pub fn cluster_logits(&self, w: &Tensor) -> Result<Tensor> {
        ensure!(
            w.rank() == 2 && w.cols() == self.config.latent_dim,
            "embeddings must have {} columns",
            self.config.latent_dim
        );
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let wv = g.constant(w.clone());
        let l = self.logits_var(&mut g, &b, wv)?;
        Ok(g.value(l).clone())
    }

    /// Class probabilities `p(y|x)` in evaluation mode.
    pub fn class_probs(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.embed(x, Mode::Eval)?;
        let logits = self.cluster_logits(&w)?;
        let mut g = Graph::new();
        let l = g.constant(logits);
        let p = g.softmax_rows(l)?;
        Ok(g.value(p).clone())
    }

    /// Hard cluster assignment per row (evaluation mode).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let w = self.embed(x, Mode::Eval)?;
        let logits = self.cluster_logits(&w)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    /// Log unnormalized density `f(x) = uᵀ enc(x)` per row.
    pub fn energy_logdensity(&self, x: &Tensor) -> Result<Vec<f64>> {
        let z = self.encode(x)?;
        let u = self.energy.data();
        Ok((0..z.rows())
            .map(|i| z.row(i).iter().zip(u).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Checks a loaded tensor against the slot it is meant to fill.
    pub fn load_named(&mut self, name: &str, value: Tensor) -> Result<()> {
        let names: Vec<String> = self
            .named_params()
            .into_iter()
            .chain(self.named_buffers())
            .map(|(n, _)| n)
            .collect();
        let pos = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Contract(format!("unknown model tensor `{name}`")))?;
        let n_params = self.params().len();
        let slot: &mut Tensor = if pos < n_params {
            self.params_mut().swap_remove(pos)
        } else {
            self.buffers_mut().swap_remove(pos - n_params)
        };
        ensure!(
            slot.shape() == value.shape(),
            "tensor `{name}` has shape {:?}, expected {:?}",
            value.shape(),
            slot.shape()
        );
        *slot = value;
        Ok(())
    }
}

impl LogDensity for GediModel {
    fn log_density_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xv = g.param(x.clone());
        let z = self.encode_var(&mut g, &b, xv, Head::Energy)?;
        let f = self.energy_var(&mut g, &b, z)?;
        let total = g.sum(f);
        let grads = g.backward(total)?;
        Ok((g.value(f).data().to_vec(), grads.wrt(xv)))
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn normalize_columns(t: &mut Tensor) {
    let (r, c) = (t.rows(), t.cols());
    for j in 0..c {
        let n = (0..r).map(|i| t.get(i, j).powi(2)).sum::<f64>().sqrt();
        if n > 0.0 {
            for i in 0..r {
                let v = t.get(i, j) / n;
                t.set(i, j, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(seed: u64) -> GediModel {
        GediModel::new(ModelConfig::toy(), &mut rng::seeded(seed)).unwrap()
    }

    fn batch(seed: u64, n: usize, d: usize) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::matrix(n, d, (0..n * d).map(|_| rng::normal(&mut r)).collect())
    }

    #[test]
    fn zero_encoder_gives_zero_latents() {
        let mut m = toy(0);
        for l in m.encoder.layers.iter_mut() {
            l.weight = l.weight.zeros_like();
            l.bias = l.bias.zeros_like();
        }
        let z = m.encode(&batch(1, 5, 2)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_rejects_wrong_dimension() {
        assert!(toy(0).encode(&batch(1, 4, 3)).is_err());
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let m = toy(3);
        let x = batch(4, 32, 2);
        for mode in [Mode::Train, Mode::Eval] {
            let w = m.embed(&x, mode).unwrap();
            for i in 0..w.rows() {
                let n: f64 = w.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn duplicated_rows_embed_identically_in_eval_mode() {
        let m = toy(5);
        let x = batch(6, 3, 2);
        let dup = Tensor::vstack(&[&x, &x]).unwrap();
        let w = m.embed(&dup, Mode::Eval).unwrap();
        for i in 0..3 {
            assert_eq!(w.row(i), w.row(i + 3));
        }
    }

    #[test]
    fn logits_of_a_prototype_are_maximal() {
        let m = toy(7);
        let u0: Vec<f64> = (0..2).map(|i| m.prototypes.get(i, 0)).collect();
        let l = m.cluster_logits(&Tensor::matrix(1, 2, u0)).unwrap();
        assert!((l.get(0, 0) - 10.0).abs() < 1e-9);
        assert!(l.get(0, 1) <= l.get(0, 0));
    }

    #[test]
    fn orthogonal_prototypes_give_one_hot_logits() {
        let mut cfg = ModelConfig::toy();
        cfg.latent_dim = 3;
        cfg.num_prototypes = 3;
        let mut m = GediModel::new(cfg, &mut rng::seeded(0)).unwrap();
        m.prototypes = Tensor::identity(3);
        let l = m
            .cluster_logits(&Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]))
            .unwrap();
        assert_eq!(l.data(), &[10.0, 0.0, 0.0]);
    }

    #[test]
    fn temperature_scaling_example() {
        // cos = (0.5, -0.5) with τ = 0.1 gives logits (5, -5).
        let mut m = toy(0);
        let a = std::f64::consts::FRAC_PI_3;
        m.prototypes = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.0, 0.0]);
        let w = Tensor::matrix(1, 2, vec![a.cos(), a.sin()]);
        let l = m.cluster_logits(&w).unwrap();
        assert!((l.get(0, 0) - 5.0).abs() < 1e-12);
        assert!((l.get(0, 1) + 5.0).abs() < 1e-12);
        let mut g = Graph::new();
        let lv = g.constant(l);
        let p = g.softmax_rows(lv).unwrap();
        assert!((g.value(p).get(0, 0) - 0.999_954_602_131_297_6).abs() < 1e-12);
    }

    #[test]
    fn renormalizing_prototypes_keeps_logits() {
        let mut m = toy(11);
        let w = m.embed(&batch(12, 20, 2), Mode::Eval).unwrap();
        let before = m.cluster_logits(&w).unwrap();
        for v in m.prototypes.data_mut() {
            *v *= 3.7;
        }
        m.renormalize_prototypes();
        let after = m.cluster_logits(&w).unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_energy_vector_scores_zero() {
        let mut m = toy(2);
        m.energy = m.energy.zeros_like();
        assert!(m
            .energy_logdensity(&batch(3, 7, 2))
            .unwrap()
            .iter()
            .all(|&f| f == 0.0));
    }

    #[test]
    fn unit_energy_vector_reads_first_latent() {
        let mut m = toy(2);
        m.energy = Tensor::vector(vec![1.0, 0.0]);
        let x = batch(3, 7, 2);
        let z = m.encode(&x).unwrap();
        let f = m.energy_logdensity(&x).unwrap();
        for i in 0..7 {
            assert!((f[i] - z.get(i, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_encoder_model_has_independent_paths() {
        let mut cfg = ModelConfig::toy();
        cfg.two_encoders = true;
        let m = GediModel::new(cfg, &mut rng::seeded(9)).unwrap();
        let x = batch(1, 4, 2);
        assert_ne!(
            m.encode_head(&x, Head::Energy).unwrap(),
            m.encode_head(&x, Head::Discriminative).unwrap()
        );
        assert_eq!(m.params().len(), m.named_params().len());
    }
}
