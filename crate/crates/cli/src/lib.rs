//! Command implementations behind the `gedi` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use gedi_core::checkpoint;
use gedi_core::data::{self, Dataset};
use gedi_core::eval::{self, EvalReport, ProbeConfig};
use gedi_core::rng;
use gedi_core::train::{self, DataConfig, RunMetrics, TrainConfig, TrainData, Trainer, Variant};

pub mod figures;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] gedi_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// 0 success, 2 usage or configuration, 3 numerical failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        use gedi_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                E::Contract(_) | E::Config(_) | E::Exhausted { .. } => 2,
                E::Numerical { .. } | E::Diverged { .. } => 3,
                E::Format { .. } | E::Io(_) => 4,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn read_config(path: &Path) -> CliResult<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            CliError::Usage(format!("config {} does not exist", path.display()))
        }
        _ => io_err(path)(e),
    })?;
    TrainConfig::from_toml(&text).map_err(|e| match e {
        gedi_core::Error::Config(m) => CliError::Usage(format!("{}: {m}", path.display())),
        other => other.into(),
    })
}

// ── argument parsing ────────────────────────────────────────────────

#[derive(Debug, Parser)]
#[command(
    name = "gedi",
    version,
    about = "Joint energy-based and self-supervised clustering"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate (or load) a run's datasets and write them as binary caches.
    GenData(GenDataArgs),
    /// Train one configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its test split or on a dataset cache.
    Eval(EvalArgs),
    /// Run a matrix of variants, DAM step counts and seeds.
    Ablate(AblateArgs),
    /// Digit-addition experiment with or without the constraint loss.
    Nesy(NesyArgs),
    /// Scatter plots of a checkpoint, or the T sweep of an ablation table.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// DAM moves per walk.
    #[arg(long)]
    pub t_steps: Option<usize>,
    /// Comma-separated switches: no-nf, no-stage1, two-encoders, nesy.
    #[arg(long, value_delimiter = ',')]
    pub ablation: Vec<AblationFlag>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationFlag {
    NoNf,
    NoStage1,
    TwoEncoders,
    Nesy,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset cache to evaluate on instead of the run's own test split.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Matrix file naming a base config, variants, T values and seeds.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Replaces the matrix's T values.
    #[arg(long, value_delimiter = ',')]
    pub t_steps: Vec<usize>,
    /// Replaces the matrix's variants (names as in the presets).
    #[arg(long, value_delimiter = ',')]
    pub ablation: Vec<String>,
    /// Base seed; the matrix seeds are offset by it.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct NesyArgs {
    /// Addition preset to start from (defaults to GEDI plus constraint).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of training triplets.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub constraint: Option<Switch>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long, required_unless_present = "table", conflicts_with = "table")]
    pub checkpoint: Option<PathBuf>,
    /// `table.json` written by `ablate`.
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => {
            let mut cfg = read_config(&a.config)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            cmd_gen_data(&cfg, &a.out)
        }
        Command::Train(a) => {
            let mut cfg = read_config(&a.config)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(t) = a.t_steps {
                cfg.dam.steps = t;
            }
            apply_flags(&mut cfg, &a.ablation);
            cmd_train(&cfg, &a.out).map(|_| ())
        }
        Command::Eval(a) => cmd_eval(&a.checkpoint, a.data.as_deref(), &a.out).map(|_| ()),
        Command::Ablate(a) => {
            let mut m = AblationMatrix::load(&a.config)?;
            if !a.t_steps.is_empty() {
                m.t_values = a.t_steps;
            }
            if !a.ablation.is_empty() {
                m.variants = a.ablation;
            }
            if let Some(s) = a.seed {
                m.seeds.iter_mut().for_each(|v| *v += s);
            }
            cmd_ablate(&m, &a.out).map(|_| ())
        }
        Command::Nesy(a) => {
            let base = match &a.config {
                Some(p) => read_config(p)?,
                None => TrainConfig::addition(a.n.unwrap_or(100), true, true),
            };
            cmd_nesy(
                base,
                a.n,
                a.constraint.map(|s| s == Switch::On),
                a.seed,
                &a.out,
            )
            .map(|_| ())
        }
        Command::Plot(a) => match (a.checkpoint, a.table) {
            (Some(c), _) => cmd_plot(&c, &a.out),
            (None, Some(t)) => cmd_plot_table(&t, &a.out),
            (None, None) => Err(CliError::Usage("plot needs --checkpoint or --table".into())),
        },
    }
}

pub fn apply_flags(cfg: &mut TrainConfig, flags: &[AblationFlag]) {
    for f in flags {
        match f {
            AblationFlag::NoNf => cfg.ablation.no_nf = true,
            AblationFlag::NoStage1 => cfg.ablation.no_stage1 = true,
            AblationFlag::TwoEncoders => cfg.ablation.two_encoders = true,
            AblationFlag::Nesy => cfg.ablation.nesy_on = true,
        }
    }
}

// ── gen-data ────────────────────────────────────────────────────────

pub fn cmd_gen_data(cfg: &TrainConfig, out: &Path) -> CliResult<()> {
    cfg.validate()?;
    let data = TrainData::prepare(cfg)?;
    create_dir(out)?;
    write(&out.join(CONFIG_FILE), cfg.to_toml())?;
    for (name, ds) in [("train", &data.train), ("test", &data.test)] {
        data::save_cache(ds, &out.join(format!("{name}.gds")))?;
        if ds.dim() == 2 {
            write(
                &out.join(format!("{name}.svg")),
                eval::scatter_svg(&ds.points, &ds.labels)?,
            )?;
        }
    }
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct RunOutcome {
    pub trainer: Trainer,
    pub metrics: RunMetrics,
    pub report: EvalReport,
}

/// Trains `cfg` and writes config, metrics, timings, checkpoint, final
/// report and (for 2-D data) the predicted clusters under `out`.
pub fn cmd_train(cfg: &TrainConfig, out: &Path) -> CliResult<RunOutcome> {
    let resolved = cfg.expanded();
    resolved.validate()?;
    let data = TrainData::prepare(&resolved)?;
    create_dir(out)?;
    write(&out.join(CONFIG_FILE), resolved.to_toml())?;
    let mut trainer = Trainer::new(&resolved, &data)?;
    let mut metrics = RunMetrics::default();
    let result = trainer.run(&data, &mut metrics);
    // Whatever was logged before a failure is still worth keeping.
    write(&out.join(METRICS_FILE), metrics.to_jsonl())?;
    write(&out.join(TIMINGS_FILE), metrics.timings_jsonl())?;
    result?;
    checkpoint::save(&trainer, &out.join(CHECKPOINT_FILE))?;
    let report = match metrics.last_eval() {
        Some(r) => r.clone(),
        None => train::evaluate(&trainer.model, &data.test, data.grouped)?,
    };
    write_report(&report, out)?;
    if data.test.dim() == 2 {
        let pred = trainer.model.predict(&data.test.points)?;
        write(
            &out.join("clusters.svg"),
            eval::scatter_svg(&data.test.points, &pred)?,
        )?;
    }
    Ok(RunOutcome {
        trainer,
        metrics,
        report,
    })
}

fn write_report(report: &EvalReport, out: &Path) -> CliResult<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    write(&out.join(REPORT_FILE), text + "\n")
}

// ── eval ────────────────────────────────────────────────────────────

/// Clustering metrics of a checkpoint. Without `dataset` the run's own
/// test split is rebuilt from the stored config and a linear probe on
/// frozen latents is added.
pub fn cmd_eval(ckpt: &Path, dataset: Option<&Path>, out: &Path) -> CliResult<EvalReport> {
    if !ckpt.is_file() {
        return Err(CliError::Usage(format!(
            "checkpoint {} does not exist",
            ckpt.display()
        )));
    }
    let trainer = checkpoint::load(ckpt)?;
    let model = &trainer.model;
    let (test, train, digits) = match dataset {
        Some(p) => (
            load_dataset(p)?,
            None,
            trainer.config.model.num_prototypes == 10,
        ),
        None => {
            let d = TrainData::prepare(&trainer.config)?;
            (d.test, Some(d.train), d.grouped)
        }
    };
    if test.dim() != model.config.input_dim {
        return Err(CliError::Usage(format!(
            "dataset has {} features but the checkpoint expects {}",
            test.dim(),
            model.config.input_dim
        )));
    }
    let mut report = train::evaluate(model, &test, digits)?;
    if let Some(train) = train {
        let mut prng = rng::derived(trainer.config.seed, 7);
        let zt = model.encode(&train.points)?;
        let ze = model.encode(&test.points)?;
        let acc = eval::linear_probe(
            (&zt, &train.labels),
            (&ze, &test.labels),
            &ProbeConfig::default(),
            &mut prng,
        );
        // A probe needs two classes among the training labels; skip otherwise.
        if let Ok(acc) = acc {
            report.linear_probe_accuracy = Some(acc);
        }
    }
    create_dir(out)?;
    write_report(&report, out)?;
    if test.dim() == 2 {
        let pred = model.predict(&test.points)?;
        write(
            &out.join("clusters.svg"),
            eval::scatter_svg(&test.points, &pred)?,
        )?;
    }
    Ok(report)
}

// ── ablate ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMatrix {
    /// Base configuration; relative paths resolve against the matrix file.
    pub base: PathBuf,
    pub variants: Vec<String>,
    pub t_values: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl AblationMatrix {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                CliError::Usage(format!("matrix {} does not exist", path.display()))
            }
            _ => io_err(path)(e),
        })?;
        let mut m: Self = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if m.base.is_relative() {
            m.base = path.parent().unwrap_or(Path::new(".")).join(&m.base);
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub t: usize,
    pub nmi_mean: f64,
    pub nmi_std: f64,
    pub nmi: Vec<f64>,
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains every (variant, T, seed) cell under `out/runs/` and writes the
/// aggregated `table.json`, `table.md` and the NMI-versus-T figure.
pub fn cmd_ablate(m: &AblationMatrix, out: &Path) -> CliResult<Vec<AblationRow>> {
    if m.variants.is_empty() || m.t_values.is_empty() || m.seeds.is_empty() {
        return Err(CliError::Usage("ablation matrix has an empty axis".into()));
    }
    let variants = m
        .variants
        .iter()
        .map(|v| Variant::parse(v).map_err(|e| CliError::Usage(e.to_string())))
        .collect::<CliResult<Vec<_>>>()?;
    let base = read_config(&m.base)?;
    let mut rows = Vec::new();
    for variant in &variants {
        for &t in &m.t_values {
            let mut nmis = Vec::new();
            for &seed in &m.seeds {
                let mut cfg = base.clone();
                variant.apply(&mut cfg);
                cfg.dam.steps = t;
                cfg.seed = seed;
                cfg.name = format!("{}-{}-t{t}-s{seed}", base.name, variant.name());
                let dir = out
                    .join("runs")
                    .join(format!("{}-t{t}-s{seed}", variant.name()));
                nmis.push(cmd_train(&cfg, &dir)?.report.nmi);
            }
            let (nmi_mean, nmi_std) = mean_std(&nmis);
            rows.push(AblationRow {
                variant: variant.name().to_string(),
                t,
                nmi_mean,
                nmi_std,
                nmi: nmis,
            });
        }
    }
    create_dir(out)?;
    write(
        &out.join("table.json"),
        serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n",
    )?;
    write(&out.join("table.md"), figures::table_markdown(&rows))?;
    write(&out.join("nmi_vs_t.svg"), figures::sweep_svg(&rows))?;
    Ok(rows)
}

// ── nesy ────────────────────────────────────────────────────────────

/// Largest multiple of 3 not above `batch` (at least 3).
pub fn triplet_batch(batch: usize) -> usize {
    (batch / 3).max(1) * 3
}

/// Digit-addition run: `n` overrides the triplet count (and rescales the
/// epoch budget as the presets do), `constraint` toggles the constraint
/// loss, and the batch is snapped to whole triplets.
pub fn cmd_nesy(
    mut cfg: TrainConfig,
    n: Option<usize>,
    constraint: Option<bool>,
    seed: Option<u64>,
    out: &Path,
) -> CliResult<RunOutcome> {
    let DataConfig::Addition { triplets, root } = cfg.data.clone() else {
        return Err(CliError::Usage("nesy needs an addition config".into()));
    };
    if let Some(n) = n.filter(|&n| n != triplets) {
        let gedi = cfg.weights.gen > 0.0 || cfg.stage1_iters > 0;
        let preset = TrainConfig::addition(n, cfg.ablation.nesy_on, gedi);
        cfg.stage1_iters = preset.stage1_iters;
        cfg.stage2_iters = preset.stage2_iters;
        cfg.data = DataConfig::Addition { triplets: n, root };
        cfg.name = cfg
            .name
            .replace(&format!("-{triplets}-"), &format!("-{n}-"));
    }
    if let Some(on) = constraint {
        cfg.ablation.nesy_on = on;
        if on && cfg.weights.nesy == 0.0 {
            cfg.weights.nesy = 3000.0;
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.batch = triplet_batch(cfg.batch);
    cmd_train(&cfg, out)
}

// ── plot ────────────────────────────────────────────────────────────

/// Predicted clusters and ground truth of a 2-D run's test split.
pub fn cmd_plot(ckpt: &Path, out: &Path) -> CliResult<()> {
    if !ckpt.is_file() {
        return Err(CliError::Usage(format!(
            "checkpoint {} does not exist",
            ckpt.display()
        )));
    }
    let trainer = checkpoint::load(ckpt)?;
    if trainer.config.model.input_dim != 2 {
        return Err(CliError::Usage("scatter plots need 2-D data".into()));
    }
    let data = TrainData::prepare(&trainer.config)?;
    let pred = trainer.model.predict(&data.test.points)?;
    create_dir(out)?;
    write(
        &out.join("clusters.svg"),
        eval::scatter_svg(&data.test.points, &pred)?,
    )?;
    write(
        &out.join("truth.svg"),
        eval::scatter_svg(&data.test.points, &data.test.labels)?,
    )?;
    Ok(())
}

pub fn cmd_plot_table(table: &Path, out: &Path) -> CliResult<()> {
    let text = fs::read_to_string(table).map_err(io_err(table))?;
    let rows: Vec<AblationRow> = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", table.display())))?;
    create_dir(out)?;
    write(&out.join("nmi_vs_t.svg"), figures::sweep_svg(&rows))
}

/// Loads a dataset cache, mapping a missing file to a usage error.
pub fn load_dataset(path: &Path) -> CliResult<Dataset> {
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "dataset {} does not exist",
            path.display()
        )));
    }
    Ok(data::load_cache(path)?)
}
