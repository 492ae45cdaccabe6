use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gedi_cli::{AblationMatrix, AblationRow};
use gedi_core::data::{self, ToyKind};
use gedi_core::eval::EvalReport;
use gedi_core::train::{DataConfig, TrainConfig};

fn gedi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gedi"))
        .args(args)
        .env("GEDI_DATA_ROOT", mnist_root())
        .output()
        .expect("binary runs")
}

fn mnist_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_toy(shape: ToyKind) -> TrainConfig {
    let mut cfg = TrainConfig::toy(shape);
    cfg.data = DataConfig::Toy {
        shape,
        n_train: 120,
        n_test: 60,
        noise_std: 0.05,
        inner_scale: 0.5,
        bounds_margin: 0.1,
    };
    cfg.batch = 40;
    cfg.stage1_iters = 4;
    cfg.stage2_iters = 6;
    cfg.sgld.buffer_size = 100;
    cfg.dam.steps = 2;
    cfg.log_every = 2;
    cfg.eval_every = 3;
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &TrainConfig) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, cfg.to_toml()).unwrap();
    p
}

fn report(dir: &Path) -> EvalReport {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn train_writes_outputs_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "moons.toml", &tiny_toy(ToyKind::Moons));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = gedi(&["train", "--config", s(&cfg), "--out", s(out), "--seed", "3"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "checkpoint.bin",
        "metrics.jsonl",
        "timings.jsonl",
        "config.toml",
        "report.json",
        "clusters.svg",
    ] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    let metrics = |d: &Path| fs::read(d.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics(&a), metrics(&b));
    assert_eq!(
        fs::read(a.join("checkpoint.bin")).unwrap(),
        fs::read(b.join("checkpoint.bin")).unwrap()
    );

    // The resolved config alone reproduces the run.
    let c = tmp.path().join("c");
    let o = gedi(&[
        "train",
        "--config",
        s(&a.join("config.toml")),
        "--out",
        s(&c),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(metrics(&a), metrics(&c));
    let resolved =
        TrainConfig::from_toml(&fs::read_to_string(a.join("config.toml")).unwrap()).unwrap();
    assert_eq!(resolved.seed, 3);
}

#[test]
fn flags_override_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "moons.toml", &tiny_toy(ToyKind::Moons));
    let out = tmp.path().join("run");
    let o = gedi(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--t-steps",
        "5",
        "--ablation",
        "no-nf,no-stage1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let resolved =
        TrainConfig::from_toml(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(resolved.dam.steps, 5);
    assert_eq!(resolved.weights.nf, 0.0);
    assert_eq!(resolved.stage1_iters, 0);
}

#[test]
fn eval_reproduces_the_logged_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "circles.toml", &tiny_toy(ToyKind::Circles));
    let run = tmp.path().join("run");
    assert_eq!(
        code(&gedi(&["train", "--config", s(&cfg), "--out", s(&run)])),
        0
    );
    let ev = tmp.path().join("eval");
    let o = gedi(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--out",
        s(&ev),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (logged, fresh) = (report(&run), report(&ev));
    assert!((logged.nmi - fresh.nmi).abs() <= 1e-9);
    assert!((logged.cluster_accuracy - fresh.cluster_accuracy).abs() <= 1e-9);
    assert_eq!(logged.confusion, fresh.confusion);
    assert!(fresh.linear_probe_accuracy.is_some());
    assert!(ev.join("clusters.svg").is_file());
}

#[test]
fn eval_rejects_missing_checkpoint_and_wrong_width() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gedi(&[
        "eval",
        "--checkpoint",
        s(&tmp.path().join("nope.bin")),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code(&o), 2);

    let cfg = write_config(tmp.path(), "moons.toml", &tiny_toy(ToyKind::Moons));
    let run = tmp.path().join("run");
    assert_eq!(
        code(&gedi(&["train", "--config", s(&cfg), "--out", s(&run)])),
        0
    );
    let wide = data::gen_moons(20, 0.0, 1).unwrap();
    let wide = data::Dataset::new(
        gedi_core::Tensor::matrix(10, 4, wide.points.data().to_vec()),
        wide.labels[..10].to_vec(),
        2,
        wide.meta.clone(),
    )
    .unwrap();
    let cache = tmp.path().join("wide.gds");
    data::save_cache(&wide, &cache).unwrap();
    let o = gedi(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--data",
        s(&cache),
        "--out",
        s(&tmp.path().join("e")),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn digit_checkpoints_evaluate_without_a_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig::addition(20, true, true);
    cfg.stage1_iters = 1;
    cfg.stage2_iters = 1;
    cfg.sgld.steps = 1;
    cfg.sgld.buffer_size = 60;
    cfg.dam.steps = 1;
    let cfg = write_config(tmp.path(), "addition.toml", &cfg);
    let run = tmp.path().join("run");
    let o = gedi(&["nesy", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ev = tmp.path().join("eval");
    let o = gedi(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--out",
        s(&ev),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(report(&ev).direct_accuracy.is_some());
    assert!(!ev.join("clusters.svg").exists());
}

#[test]
fn nesy_snaps_the_batch_to_triplets() {
    assert_eq!(gedi_cli::triplet_batch(64), 63);
    assert_eq!(gedi_cli::triplet_batch(60), 60);
    assert_eq!(gedi_cli::triplet_batch(2), 3);
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig::addition(30, false, false);
    cfg.batch = 64;
    cfg.stage2_iters = 1;
    let cfg = write_config(tmp.path(), "addition.toml", &cfg);
    let run = tmp.path().join("run");
    let o = gedi(&[
        "nesy",
        "--config",
        s(&cfg),
        "--constraint",
        "on",
        "--out",
        s(&run),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let resolved =
        TrainConfig::from_toml(&fs::read_to_string(run.join("config.toml")).unwrap()).unwrap();
    assert_eq!(resolved.batch, 63);
    assert!(resolved.ablation.nesy_on);
    assert_eq!(resolved.weights.nesy, 3000.0);
}

#[test]
fn ablation_matrix_of_one_matches_train() {
    let tmp = tempfile::tempdir().unwrap();
    let base = write_config(tmp.path(), "base.toml", &tiny_toy(ToyKind::Moons));
    let m = AblationMatrix {
        base: base.clone(),
        variants: vec!["no-nf".into()],
        t_values: vec![3],
        seeds: vec![7],
    };
    let matrix = tmp.path().join("matrix.toml");
    fs::write(&matrix, toml::to_string(&m).unwrap()).unwrap();
    let out = tmp.path().join("ablate");
    let o = gedi(&["ablate", "--config", s(&matrix), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<AblationRow> =
        serde_json::from_str(&fs::read_to_string(out.join("table.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);

    let run = tmp.path().join("run");
    let o = gedi(&[
        "train",
        "--config",
        s(&base),
        "--out",
        s(&run),
        "--seed",
        "7",
        "--t-steps",
        "3",
        "--ablation",
        "no-nf",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(rows[0].nmi, vec![report(&run).nmi]);
    assert!(out.join("table.md").is_file() && out.join("nmi_vs_t.svg").is_file());
}

#[test]
fn ablation_table_has_a_row_per_variant_and_t() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_toy(ToyKind::Circles);
    cfg.stage1_iters = 1;
    cfg.stage2_iters = 1;
    let base = write_config(tmp.path(), "base.toml", &cfg);
    let m = AblationMatrix {
        base,
        variants: vec!["gedi".into()],
        t_values: vec![1],
        seeds: vec![0],
    };
    let matrix = tmp.path().join("matrix.toml");
    fs::write(&matrix, toml::to_string(&m).unwrap()).unwrap();
    let out = tmp.path().join("ablate");
    let o = gedi(&[
        "ablate",
        "--config",
        s(&matrix),
        "--out",
        s(&out),
        "--ablation",
        "gedi,swav-only,jem-only",
        "--t-steps",
        "1,2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<AblationRow> =
        serde_json::from_str(&fs::read_to_string(out.join("table.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3 * 2);
    let table = fs::read_to_string(out.join("table.md")).unwrap();
    assert_eq!(table.lines().count(), 2 + 6);

    let plot = tmp.path().join("plot");
    let o = gedi(&[
        "plot",
        "--table",
        s(&out.join("table.json")),
        "--out",
        s(&plot),
    ]);
    assert_eq!(code(&o), 0);
    assert!(plot.join("nmi_vs_t.svg").is_file());
}

#[test]
fn gen_data_and_plot_emit_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "moons.toml", &tiny_toy(ToyKind::Moons));
    let out = tmp.path().join("data");
    assert_eq!(
        code(&gedi(&["gen-data", "--config", s(&cfg), "--out", s(&out)])),
        0
    );
    let train = data::load_cache(&out.join("train.gds")).unwrap();
    assert_eq!((train.len(), train.dim()), (120, 2));
    assert!(out.join("test.svg").is_file());

    let run = tmp.path().join("run");
    assert_eq!(
        code(&gedi(&["train", "--config", s(&cfg), "--out", s(&run)])),
        0
    );
    let plot = tmp.path().join("plot");
    let o = gedi(&[
        "plot",
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--out",
        s(&plot),
    ]);
    assert_eq!(code(&o), 0);
    assert!(plot.join("clusters.svg").is_file() && plot.join("truth.svg").is_file());
}

#[test]
fn exit_codes_follow_the_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&gedi(&["train", "--bogus"])), 2);
    assert_eq!(code(&gedi(&["--help"])), 0);

    let bad = tmp.path().join("bad.toml");
    fs::write(
        &bad,
        tiny_toy(ToyKind::Moons)
            .to_toml()
            .replace("batch = 40", "batch = 40\nbatsh = 1"),
    )
    .unwrap();
    let o = gedi(&[
        "train",
        "--config",
        s(&bad),
        "--out",
        s(&tmp.path().join("x")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("batsh"));

    let mut cfg = tiny_toy(ToyKind::Moons);
    cfg.adam.lr = 1e6;
    cfg.stage1_iters = 300;
    let diverging = write_config(tmp.path(), "diverging.toml", &cfg);
    let out = tmp.path().join("div");
    let o = gedi(&["train", "--config", s(&diverging), "--out", s(&out)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("metrics.jsonl").is_file());

    let ok = write_config(tmp.path(), "ok.toml", &tiny_toy(ToyKind::Moons));
    let run = tmp.path().join("run");
    assert_eq!(
        code(&gedi(&["train", "--config", s(&ok), "--out", s(&run)])),
        0
    );
    let ckpt = run.join("checkpoint.bin");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() - 9);
    fs::write(&ckpt, bytes).unwrap();
    let o = gedi(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&tmp.path().join("e")),
    ]);
    assert_eq!(code(&o), 4);

    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = gedi(&[
        "gen-data",
        "--config",
        s(&ok),
        "--out",
        s(&blocker.join("sub")),
    ]);
    assert_eq!(code(&o), 4);
}

#[test]
fn shipped_presets_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    let mut configs = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_stem().unwrap().to_str().unwrap().to_string();
        if name.starts_with("ablation-") {
            let m = AblationMatrix::load(&path).unwrap();
            assert!(m.base.is_file(), "{name}: base missing");
            assert_eq!(m.t_values, vec![1, 2, 5, 8, 10]);
            assert_eq!(m.seeds.len(), 5);
        } else {
            let cfg = TrainConfig::from_toml(&fs::read_to_string(&path).unwrap()).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.name, name);
            configs += 1;
        }
    }
    assert_eq!(configs, 2 * 6 + 3 * 4);
}
