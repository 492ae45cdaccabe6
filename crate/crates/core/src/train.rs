//! Two-stage training driver.
//!
//! Stage 1 fits the energy head alone by persistent contrastive divergence.
//! Stage 2 optimizes the full weighted objective: generative, negative-free,
//! swapped cluster prediction on stochastic views and on manifold-walk
//! views, and optionally the digit-addition constraint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{self, AugmentConfig, Dataset, Layout, MnistSplit, ToyKind, TripletSet};
use crate::error::{ensure, Error, Result};
use crate::eval::{self, EvalReport};
use crate::model::{GediModel, Head, Mode, ModelConfig};
use crate::objectives::{self, LossParts, LossWeights, SinkhornConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{self, SeededRng};
use crate::sampling::{self, Bounds, DamConfig, ReplayBuffer, SgldConfig};
use crate::tensor::Tensor;

/// Losses beyond this magnitude abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Sinkhorn marginal errors above this are flagged in the metrics.
pub const SINKHORN_WARN: f64 = 1e-3;

// ── configuration ───────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    Toy {
        shape: ToyKind,
        n_train: usize,
        n_test: usize,
        noise_std: f64,
        #[serde(default = "default_inner_scale")]
        inner_scale: f64,
        /// SGLD box: training bounding box widened by this fraction per side.
        #[serde(default = "default_margin")]
        bounds_margin: f64,
    },
    Addition {
        triplets: usize,
        /// Directory holding the IDX files; falls back to the data-root
        /// environment variable, then `data/mnist`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        root: Option<PathBuf>,
    },
}

fn default_inner_scale() -> f64 {
    0.5
}

fn default_margin() -> f64 {
    0.1
}

/// Ablation switches folded into the effective configuration by
/// [`TrainConfig::expanded`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    #[serde(default)]
    pub no_nf: bool,
    #[serde(default)]
    pub no_stage1: bool,
    #[serde(default)]
    pub two_encoders: bool,
    #[serde(default)]
    pub nesy_on: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub name: String,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub batch: usize,
    pub weights: LossWeights,
    pub sgld: SgldConfig,
    pub dam: DamConfig,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
    #[serde(default)]
    pub sinkhorn: SinkhornConfig,
    /// Jitter added to the batch covariance diagonal.
    #[serde(default = "default_cov_beta")]
    pub cov_beta: f64,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_cov_beta() -> f64 {
    1e-3
}

fn default_log_every() -> usize {
    50
}

fn default_eval_every() -> usize {
    500
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Effective configuration with every ablation flag applied and cleared:
    /// `no_nf` zeroes the negative-free weight, `no_stage1` skips stage 1,
    /// `two_encoders` splits the encoder, and the constraint weight is
    /// dropped unless `nesy_on`.
    pub fn expanded(&self) -> Self {
        let mut c = self.clone();
        let a = c.ablation;
        if a.no_nf {
            c.weights.nf = 0.0;
        }
        if a.no_stage1 {
            c.stage1_iters = 0;
        }
        if a.two_encoders {
            c.model.two_encoders = true;
        }
        if !a.nesy_on {
            c.weights.nesy = 0.0;
        }
        c.ablation = Ablation {
            nesy_on: a.nesy_on,
            ..Ablation::default()
        };
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(as_config)?;
        self.weights.validate().map_err(as_config)?;
        self.sgld.validate().map_err(as_config)?;
        self.dam.validate().map_err(as_config)?;
        self.augment.validate().map_err(as_config)?;
        let cfg = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        cfg(
            self.batch >= 2,
            format!("batch must be at least 2, got {}", self.batch),
        )?;
        let nesy = self.ablation.nesy_on || matches!(self.data, DataConfig::Addition { .. });
        if nesy {
            cfg(
                self.batch.is_multiple_of(3),
                format!(
                    "batch {} must be a multiple of 3 for triplet data",
                    self.batch
                ),
            )?;
        }
        cfg(self.cov_beta > 0.0, "cov_beta must be positive".into())?;
        cfg(self.adam.lr > 0.0, "adam.lr must be positive".into())?;
        cfg(
            (0.0..1.0).contains(&self.adam.beta1) && (0.0..1.0).contains(&self.adam.beta2),
            "adam betas must lie in [0, 1)".into(),
        )?;
        cfg(
            self.sinkhorn.epsilon > 0.0 && self.sinkhorn.iters >= 1,
            "sinkhorn needs epsilon > 0 and iters ≥ 1".into(),
        )?;
        cfg(
            self.log_every >= 1 && self.eval_every >= 1,
            "log_every and eval_every must be positive".into(),
        )?;
        match &self.data {
            DataConfig::Toy {
                n_train,
                n_test,
                noise_std,
                inner_scale,
                ..
            } => {
                cfg(
                    *n_train >= self.batch,
                    format!("n_train {n_train} is smaller than the batch"),
                )?;
                cfg(*n_test >= 2, "n_test must be at least 2".into())?;
                cfg(*noise_std >= 0.0, "noise_std must be nonnegative".into())?;
                cfg(
                    *inner_scale > 0.0 && *inner_scale < 1.0,
                    "inner_scale must lie in (0, 1)".into(),
                )?;
            }
            DataConfig::Addition { triplets, .. } => {
                cfg(
                    *triplets * 3 >= self.batch,
                    format!("{triplets} triplets cannot fill a batch of {}", self.batch),
                )?;
                cfg(
                    self.model.num_prototypes == 10,
                    "addition needs 10 prototypes".into(),
                )?;
            }
        }
        Ok(())
    }

    /// Toy preset: GEDI on moons or circles.
    pub fn toy(shape: ToyKind) -> Self {
        let noise_std = match shape {
            ToyKind::Moons => 0.05,
            ToyKind::Circles => 0.03,
        };
        let batch = 400;
        Self {
            name: format!("{}-gedi", toy_name(shape)),
            seed: 0,
            data: DataConfig::Toy {
                shape,
                n_train: 1000,
                n_test: 1000,
                noise_std,
                inner_scale: default_inner_scale(),
                bounds_margin: default_margin(),
            },
            model: ModelConfig::toy(),
            stage1_iters: 1000,
            stage2_iters: 7000,
            batch,
            weights: LossWeights::gedi(batch),
            sgld: SgldConfig {
                steps: 1,
                ..SgldConfig::default()
            },
            dam: DamConfig::default(),
            augment: AugmentConfig::toy(),
            adam: AdamConfig {
                lr: 1e-3,
                beta1: 0.0,
                beta2: 0.9,
                ..AdamConfig::default()
            },
            sinkhorn: SinkhornConfig::default(),
            cov_beta: default_cov_beta(),
            ablation: Ablation::default(),
            log_every: default_log_every(),
            eval_every: default_eval_every(),
        }
    }

    /// Addition preset for `triplets` training triplets; the epoch
    /// budget is split evenly between the two stages.
    pub fn addition(triplets: usize, constraint: bool, gedi: bool) -> Self {
        let batch = 60;
        let epochs = match triplets {
            0..=100 => 100,
            101..=1000 => 30,
            _ => 5,
        };
        let per_epoch = (3 * triplets).div_ceil(batch).max(1);
        let half = epochs * per_epoch / 2;
        let mut weights = LossWeights::gedi(batch);
        if !gedi {
            weights = LossWeights::zero();
        }
        weights.nesy = if constraint { 3000.0 } else { 0.0 };
        let tag = match (gedi, constraint) {
            (true, true) => "gedi-constraint",
            (true, false) => "gedi",
            (false, true) => "constraint",
            (false, false) => "none",
        };
        Self {
            name: format!("addition-{triplets}-{tag}"),
            seed: 0,
            data: DataConfig::Addition {
                triplets,
                root: None,
            },
            model: ModelConfig::mnist(),
            stage1_iters: if gedi { half } else { 0 },
            stage2_iters: if gedi { half } else { 2 * half },
            batch,
            weights,
            sgld: SgldConfig {
                steps: 10,
                ..SgldConfig::default()
            },
            dam: DamConfig::default(),
            augment: AugmentConfig::addition(),
            adam: AdamConfig {
                lr: 1e-4,
                ..AdamConfig::default()
            },
            sinkhorn: SinkhornConfig::default(),
            cov_beta: default_cov_beta(),
            ablation: Ablation {
                nesy_on: constraint,
                ..Ablation::default()
            },
            log_every: default_log_every(),
            eval_every: default_eval_every(),
        }
    }
}

/// Named configurations of the toy comparison and ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Gedi,
    SwavOnly,
    JemOnly,
    NoNf,
    NoNfNoStage1,
    NoNf2enc,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Gedi,
        Variant::SwavOnly,
        Variant::JemOnly,
        Variant::NoNf,
        Variant::NoNfNoStage1,
        Variant::NoNf2enc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gedi => "gedi",
            Variant::SwavOnly => "swav-only",
            Variant::JemOnly => "jem-only",
            Variant::NoNf => "no-nf",
            Variant::NoNfNoStage1 => "no-nf-no-stage1",
            Variant::NoNf2enc => "no-nf-2enc",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown variant `{name}`")))
    }

    /// Rewrites a full GEDI configuration into this variant. The single
    /// objective baselines skip stage 1 and spend the whole budget on
    /// their one loss.
    pub fn apply(self, cfg: &mut TrainConfig) {
        let gedi = cfg.weights;
        match self {
            Variant::Gedi => {}
            Variant::SwavOnly => {
                cfg.weights = LossWeights {
                    di_aug: gedi.di_aug,
                    ..LossWeights::zero()
                };
                cfg.stage1_iters = 0;
            }
            Variant::JemOnly => {
                cfg.weights = LossWeights {
                    gen: gedi.gen,
                    ..LossWeights::zero()
                };
                cfg.stage1_iters = 0;
            }
            Variant::NoNf => cfg.ablation.no_nf = true,
            Variant::NoNfNoStage1 => {
                cfg.ablation.no_nf = true;
                cfg.ablation.no_stage1 = true;
            }
            Variant::NoNf2enc => {
                cfg.ablation.no_nf = true;
                cfg.ablation.two_encoders = true;
            }
        }
    }
}

impl TrainConfig {
    pub fn toy_variant(shape: ToyKind, variant: Variant) -> Self {
        let mut cfg = Self::toy(shape);
        variant.apply(&mut cfg);
        cfg.name = format!("{}-{}", toy_name(shape), variant.name());
        cfg
    }
}

fn toy_name(shape: ToyKind) -> &'static str {
    match shape {
        ToyKind::Moons => "moons",
        ToyKind::Circles => "circles",
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Contract(m) => Error::Config(m),
        other => other,
    }
}

// ── data preparation ────────────────────────────────────────────────

/// Name of the environment variable pointing at the MNIST directory.
pub const DATA_ROOT_ENV: &str = "GEDI_DATA_ROOT";

/// Training and evaluation data for one run.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Dataset,
    pub test: Dataset,
    pub layout: Layout,
    pub bounds: Bounds,
    /// Rows come in consecutive constrained triplets.
    pub grouped: bool,
}

pub fn mnist_root(configured: Option<&Path>) -> PathBuf {
    configured
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

impl TrainData {
    pub fn prepare(cfg: &TrainConfig) -> Result<Self> {
        match &cfg.data {
            DataConfig::Toy {
                shape,
                n_train,
                n_test,
                noise_std,
                inner_scale,
                bounds_margin,
            } => {
                // Test data uses a seed stream disjoint from training data.
                let test_seed = cfg.seed ^ 0x7e57_7e57_7e57_7e57;
                let (train, test) = match shape {
                    ToyKind::Moons => (
                        data::gen_moons(*n_train, *noise_std, cfg.seed)?,
                        data::gen_moons(*n_test, *noise_std, test_seed)?,
                    ),
                    ToyKind::Circles => (
                        data::gen_circles(*n_train, *noise_std, *inner_scale, cfg.seed)?,
                        data::gen_circles(*n_test, *noise_std, *inner_scale, test_seed)?,
                    ),
                };
                let bounds = Bounds::of_data(&train.points, *bounds_margin);
                Ok(Self {
                    train,
                    test,
                    layout: Layout::Flat,
                    bounds,
                    grouped: false,
                })
            }
            DataConfig::Addition { triplets, root } => {
                let root = mnist_root(root.as_deref());
                let full = data::load_mnist(&root, MnistSplit::Train)?;
                let test = data::load_mnist(&root, MnistSplit::Test)?;
                let set = data::make_addition_triplets(&full, *triplets, cfg.seed)?;
                Ok(Self::from_triplets(&set, test))
            }
        }
    }

    pub fn from_triplets(set: &TripletSet, test: Dataset) -> Self {
        let train = set.as_dataset();
        let dim = train.dim();
        Self {
            train,
            test,
            layout: Layout::mnist(),
            bounds: Bounds::uniform(dim, -1.0, 1.0),
            grouped: true,
        }
    }
}

// ── batching ────────────────────────────────────────────────────────

/// Epoch-wise shuffled batches of whole units (single rows, or row
/// triplets for grouped data). Incomplete trailing batches are dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batcher {
    pub unit: usize,
    pub units_per_batch: usize,
    pub order: Vec<usize>,
    pub pos: usize,
}

impl Batcher {
    pub fn new(rows: usize, batch: usize, grouped: bool) -> Result<Self> {
        let unit = if grouped { 3 } else { 1 };
        ensure!(
            batch.is_multiple_of(unit),
            "batch {batch} is not a multiple of {unit}"
        );
        ensure!(
            rows.is_multiple_of(unit),
            "{rows} rows do not split into units of {unit}"
        );
        let units = rows / unit;
        let units_per_batch = (batch / unit).min(units);
        ensure!(units_per_batch >= 1, "batch holds no complete unit");
        Ok(Self {
            unit,
            units_per_batch,
            order: (0..units).collect(),
            // Forces a shuffle before the first batch.
            pos: units,
        })
    }

    pub fn next(&mut self, rng: &mut SeededRng) -> Vec<usize> {
        if self.pos + self.units_per_batch > self.order.len() {
            rng::shuffle(rng, &mut self.order);
            self.pos = 0;
        }
        let units = &self.order[self.pos..self.pos + self.units_per_batch];
        self.pos += self.units_per_batch;
        units
            .iter()
            .flat_map(|&u| u * self.unit..(u + 1) * self.unit)
            .collect()
    }
}

// ── metrics ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gen: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub di_aug: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub di_dam: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nesy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub sgld_reinit: usize,
    pub sgld_nan_chains: usize,
    pub dam_skipped: usize,
    pub sinkhorn_error: f64,
    pub sinkhorn_warn: bool,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum MetricRecord {
    Step {
        stage: u8,
        iteration: usize,
        loss: LossRecord,
        diagnostics: Diagnostics,
    },
    Eval {
        stage: u8,
        iteration: usize,
        report: EvalReport,
    },
}

/// Append-only metrics; wall-clock timings are kept apart so the main log
/// is byte-reproducible.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<MetricRecord>,
    pub timings: Vec<(u8, usize, f64)>,
}

impl RunMetrics {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("metrics serialize"));
            out.push('\n');
        }
        out
    }

    pub fn timings_jsonl(&self) -> String {
        self.timings
            .iter()
            .map(|(stage, it, secs)| {
                format!("{{\"stage\":{stage},\"iteration\":{it},\"seconds\":{secs}}}\n")
            })
            .collect()
    }

    pub fn last_eval(&self) -> Option<&EvalReport> {
        self.records.iter().rev().find_map(|r| match r {
            MetricRecord::Eval { report, .. } => Some(report),
            _ => None,
        })
    }

    /// Step records of one stage, in order.
    pub fn losses(&self, stage: u8) -> Vec<&LossRecord> {
        self.records
            .iter()
            .filter_map(|r| match r {
                MetricRecord::Step { stage: s, loss, .. } if *s == stage => Some(loss),
                _ => None,
            })
            .collect()
    }
}

// ── evaluation ──────────────────────────────────────────────────────

/// Clustering metrics of the model's hard assignments on `ds`; for digit
/// data the direct (unmatched) accuracy is reported as well.
pub fn evaluate(model: &GediModel, ds: &Dataset, digits: bool) -> Result<EvalReport> {
    let pred = model.predict(&ds.points)?;
    let mut report = EvalReport::clustering(&pred, &ds.labels)?;
    if digits {
        report.direct_accuracy = Some(eval::direct_accuracy(&pred, &ds.labels)?);
    }
    Ok(report)
}

// ── trainer ─────────────────────────────────────────────────────────

/// Everything that evolves during a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: GediModel,
    pub adam: AdamState,
    pub buffer: ReplayBuffer,
    pub batcher: Batcher,
    pub rng: SeededRng,
    /// Completed iterations of stage 1 and stage 2.
    pub done: [usize; 2],
}

impl Trainer {
    /// Fresh state for `config` (ablations are expanded here).
    pub fn new(config: &TrainConfig, data: &TrainData) -> Result<Self> {
        let config = config.expanded();
        config.validate()?;
        ensure!(
            data.train.dim() == config.model.input_dim,
            "data has {} features, model expects {}",
            data.train.dim(),
            config.model.input_dim
        );
        let mut init_rng = rng::derived(config.seed, 1);
        let model = GediModel::new(config.model.clone(), &mut init_rng)?;
        let adam = AdamState::new(config.adam, model.params());
        let buffer = ReplayBuffer::new(config.sgld.buffer_size, config.model.input_dim);
        let batcher = Batcher::new(data.train.len(), config.batch, data.grouped)?;
        Ok(Self {
            model,
            adam,
            buffer,
            batcher,
            rng: rng::derived(config.seed, 2),
            done: [0, 0],
            config,
        })
    }

    pub fn finished(&self) -> bool {
        self.done[0] >= self.config.stage1_iters && self.done[1] >= self.config.stage2_iters
    }

    /// Runs every remaining iteration of both stages.
    pub fn run(&mut self, data: &TrainData, metrics: &mut RunMetrics) -> Result<()> {
        while !self.finished() {
            self.step(data, metrics)?;
        }
        Ok(())
    }

    /// Runs at most `n` more iterations.
    pub fn run_for(&mut self, n: usize, data: &TrainData, metrics: &mut RunMetrics) -> Result<()> {
        for _ in 0..n {
            if self.finished() {
                break;
            }
            self.step(data, metrics)?;
        }
        Ok(())
    }

    /// One iteration of whichever stage is current.
    pub fn step(&mut self, data: &TrainData, metrics: &mut RunMetrics) -> Result<()> {
        let started = std::time::Instant::now();
        let (stage, (loss, diag)) = if self.done[0] < self.config.stage1_iters {
            (1u8, self.stage1_step(data)?)
        } else {
            ensure!(
                self.done[1] < self.config.stage2_iters,
                "training already finished"
            );
            (2u8, self.stage2_step(data)?)
        };
        let slot = usize::from(stage - 1);
        self.done[slot] += 1;
        let it = self.done[slot];
        let total = if stage == 1 {
            self.config.stage1_iters
        } else {
            self.config.stage2_iters
        };
        if it.is_multiple_of(self.config.log_every) || it == total {
            metrics.records.push(MetricRecord::Step {
                stage,
                iteration: it,
                loss,
                diagnostics: diag,
            });
            metrics
                .timings
                .push((stage, it, started.elapsed().as_secs_f64()));
        }
        if stage == 2 && (it.is_multiple_of(self.config.eval_every) || it == total) {
            let report = evaluate(&self.model, &data.test, data.grouped)?;
            metrics.records.push(MetricRecord::Eval {
                stage,
                iteration: it,
                report,
            });
        }
        Ok(())
    }

    fn batch(&mut self, data: &TrainData) -> Tensor {
        let idx = self.batcher.next(&mut self.rng);
        data.train.points.select_rows(&idx)
    }

    fn sgld(&mut self, data: &TrainData, n: usize) -> Result<sampling::SgldOutput> {
        sampling::sgld_sample(
            &self.model,
            &mut self.buffer,
            &self.config.sgld,
            &data.bounds,
            n,
            &mut self.rng,
        )
    }

    fn check(&self, stage: u8, loss: f64) -> Result<()> {
        if !loss.is_finite() || loss.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                stage,
                iteration: self.done[usize::from(stage - 1)] + 1,
                loss,
            });
        }
        Ok(())
    }

    fn apply(
        &mut self,
        g: &Graph,
        loss: Var,
        params: &[Var],
        only: Option<&[usize]>,
    ) -> Result<()> {
        let mut grads = g.backward(loss)?;
        let mut flat: Vec<Tensor> = params.iter().map(|&p| grads.take(p)).collect();
        if let Some(keep) = only {
            for (i, t) in flat.iter_mut().enumerate() {
                if !keep.contains(&i) {
                    *t = t.zeros_like();
                }
            }
        }
        let mut refs = self.model.params_mut();
        self.adam.step(&mut refs, &flat)?;
        Ok(())
    }

    fn stage1_step(&mut self, data: &TrainData) -> Result<(LossRecord, Diagnostics)> {
        let x = self.batch(data);
        let sampled = self.sgld(data, x.rows())?;
        let mut g = Graph::new();
        let b = self.model.bind(&mut g, true);
        let f_real = self.energy_of(&mut g, &b, &x)?;
        let f_fake = self.energy_of(&mut g, &b, &sampled.samples)?;
        let loss = objectives::loss_gen(&mut g, f_real, f_fake)?;
        let value = g.value(loss).item();
        self.check(1, value)?;
        let keep = self.model.energy_param_indices();
        self.apply(&g, loss, &b.params, Some(&keep))?;
        Ok((
            LossRecord {
                total: value,
                gen: Some(value),
                ..Default::default()
            },
            Diagnostics {
                sgld_reinit: sampled.reinit,
                sgld_nan_chains: sampled.nan_chains,
                ..Default::default()
            },
        ))
    }

    fn energy_of(&self, g: &mut Graph, b: &crate::model::Bound, x: &Tensor) -> Result<Var> {
        let xv = g.constant(x.clone());
        let z = self.model.encode_var(g, b, xv, Head::Energy)?;
        self.model.energy_var(g, b, z)
    }

    fn stage2_step(&mut self, data: &TrainData) -> Result<(LossRecord, Diagnostics)> {
        let w = self.config.weights;
        let x = self.batch(data);
        let n = x.rows();
        let mut diag = Diagnostics::default();

        let views = if w.di_aug > 0.0 || w.nf > 0.0 {
            let a = data::augment(&x, &self.config.augment, data.layout, &mut self.rng)?;
            let b = data::augment(&x, &self.config.augment, data.layout, &mut self.rng)?;
            Some((a, b))
        } else {
            None
        };
        let walked = if w.di_dam > 0.0 {
            let out = sampling::dam(&x, &self.model, &self.config.dam, &mut self.rng)?;
            diag.dam_skipped = out.skipped;
            Some(out.augmented)
        } else {
            None
        };
        let sampled = if w.gen > 0.0 {
            let out = self.sgld(data, n)?;
            diag.sgld_reinit = out.reinit;
            diag.sgld_nan_chains = out.nan_chains;
            Some(out.samples)
        } else {
            None
        };
        let inputs = Stage2Inputs {
            x,
            views,
            walked,
            sampled,
        };

        let mut g = Graph::new();
        let built = stage2_loss(&mut g, &self.model, &self.config, &inputs)?;
        let value = g.value(built.total).item();
        let read = |v: Option<Var>| v.map(|v| g.value(v).item());
        let p = &built.parts;
        let record = LossRecord {
            total: value,
            gen: read(p.gen),
            nf: read(p.nf),
            di_aug: read(p.di_aug),
            di_dam: read(p.di_dam),
            nesy: read(p.nesy),
        };
        diag.sinkhorn_error = built.sinkhorn_error;
        diag.sinkhorn_warn = built.sinkhorn_error > SINKHORN_WARN;
        self.check(2, value)?;
        self.apply(&g, built.total, &built.params, None)?;
        if let Some(stats) = built.bn_stats {
            self.model.update_running_stats(&stats);
        }
        self.model.renormalize_prototypes();
        Ok((record, diag))
    }
}

/// The stochastic inputs of one stage-2 iteration: the clean batch, two
/// augmented views, the manifold walk of the batch and model samples.
/// Absent entries belong to losses with zero weight.
#[derive(Clone, Debug)]
pub struct Stage2Inputs {
    pub x: Tensor,
    pub views: Option<(Tensor, Tensor)>,
    pub walked: Option<Tensor>,
    pub sampled: Option<Tensor>,
}

pub struct Stage2Loss {
    pub total: Var,
    pub parts: LossParts,
    /// Model parameters in [`GediModel::params`] order.
    pub params: Vec<Var>,
    pub bn_stats: Option<crate::model::BnBatchStats>,
    pub sinkhorn_error: f64,
}

/// Builds the weighted stage-2 objective on `g`. Deterministic in its
/// arguments; transport plans enter as constants.
pub fn stage2_loss(
    g: &mut Graph,
    model: &GediModel,
    config: &TrainConfig,
    inputs: &Stage2Inputs,
) -> Result<Stage2Loss> {
    let w = config.weights;
    let tau = model.config.temperature;
    let b = model.bind(g, true);
    let mut parts = LossParts::default();
    let mut bn_stats = None;
    let mut sinkhorn_error: f64 = 0.0;

    let xv = g.constant(inputs.x.clone());
    let clean_logits = if w.di_dam > 0.0 || w.nesy > 0.0 {
        let z = model.encode_var(g, &b, xv, Head::Discriminative)?;
        let (wx, stats) = model.project_var(g, &b, z, Mode::Train)?;
        bn_stats = stats;
        Some(model.logits_var(g, &b, wx)?)
    } else {
        None
    };

    if let Some((va, vb)) = inputs
        .views
        .as_ref()
        .filter(|_| w.di_aug > 0.0 || w.nf > 0.0)
    {
        let a = g.constant(va.clone());
        let bb = g.constant(vb.clone());
        let za = model.encode_var(g, &b, a, Head::Discriminative)?;
        let zb = model.encode_var(g, &b, bb, Head::Discriminative)?;
        let (wa, sa) = model.project_var(g, &b, za, Mode::Train)?;
        let (wb, _) = model.project_var(g, &b, zb, Mode::Train)?;
        if bn_stats.is_none() {
            bn_stats = sa;
        }
        if w.di_aug > 0.0 {
            let la = model.logits_var(g, &b, wa)?;
            let lb = model.logits_var(g, &b, wb)?;
            let (l, err) = objectives::loss_di_swapped(g, la, lb, tau, &config.sinkhorn)?;
            sinkhorn_error = sinkhorn_error.max(err);
            parts.di_aug = Some(l);
        }
        if w.nf > 0.0 {
            parts.nf = Some(objectives::loss_nf(g, za, zb, wa, config.cov_beta)?);
        }
    }

    if let (Some(xd), Some(lx), true) = (&inputs.walked, clean_logits, w.di_dam > 0.0) {
        let dv = g.constant(xd.clone());
        let zd = model.encode_var(g, &b, dv, Head::Discriminative)?;
        let (wd, _) = model.project_var(g, &b, zd, Mode::Train)?;
        let ld = model.logits_var(g, &b, wd)?;
        let (l, err) = objectives::loss_di_swapped(g, lx, ld, tau, &config.sinkhorn)?;
        sinkhorn_error = sinkhorn_error.max(err);
        parts.di_dam = Some(l);
    }

    if let Some(s) = inputs.sampled.as_ref().filter(|_| w.gen > 0.0) {
        let zr = model.encode_var(g, &b, xv, Head::Energy)?;
        let f_real = model.energy_var(g, &b, zr)?;
        let sv = g.constant(s.clone());
        let zs = model.encode_var(g, &b, sv, Head::Energy)?;
        let f_fake = model.energy_var(g, &b, zs)?;
        parts.gen = Some(objectives::loss_gen(g, f_real, f_fake)?);
    }

    if w.nesy > 0.0 {
        let lx = clean_logits.expect("clean logits are built when the constraint is on");
        let p = g.softmax_rows(lx)?;
        parts.nesy = Some(objectives::loss_nesy(g, p)?);
    }

    let total = objectives::total_loss(g, &parts, &w)?;
    Ok(Stage2Loss {
        total,
        parts,
        params: b.params,
        bn_stats,
        sinkhorn_error,
    })
}

/// Trains from scratch and returns the trainer plus its metrics.
pub fn train(config: &TrainConfig, data: &TrainData) -> Result<(Trainer, RunMetrics)> {
    let mut trainer = Trainer::new(config, data)?;
    let mut metrics = RunMetrics::default();
    trainer.run(data, &mut metrics)?;
    Ok((trainer, metrics))
}
