use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use ulcag_core::experiment::{ExperimentKind, ExperimentSpec};
use ulcag_core::trainer::TrainConfig;

fn ulcag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ulcag")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ulcag(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    ulcag(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_dataset(dir: &Path) -> (PathBuf, PathBuf) {
    let (train, test) = (dir.join("train.txt"), dir.join("test.txt"));
    ok(&[
        "gen", "--out", p(&train), "--n", "200", "--classes", "4", "--aus", "8", "--dim", "8",
        "--corruption", "0.2", "--seed", "3", "--n-test", "100", "--test-out", p(&test),
    ]);
    (train, test)
}

const FAST: [&str; 10] = [
    "--epochs", "6", "--batch-size", "32", "--lr-target", "0.1", "--lr-aux", "0.1", "--warmup", "2",
];

#[test]
fn gen_reports_corruption_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    let out = ok(&["gen", "--out", p(&a), "--n", "500", "--corruption", "0.2", "--seed", "11"]);
    assert!(out.contains("corrupted: 100 of 500"), "{out}");
    ok(&["gen", "--out", p(&b), "--n", "500", "--corruption", "0.2", "--seed", "11"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.txt");
    assert_eq!(code(&["gen", "--out", p(&out), "--classes", "9", "--n", "5"]), 2);
    assert_eq!(code(&["gen", "--out", p(&out), "--corruption", "1.5"]), 2);
    assert_eq!(code(&["inspect", "weights", p(&out)]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
}

#[test]
fn file_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.txt");
    assert_eq!(code(&["train", "--data", p(&missing), "--out", p(dir.path())]), 3);
    let garbage = dir.path().join("garbage.json");
    fs::write(&garbage, "{ not json").unwrap();
    assert_eq!(code(&["inspect", "checkpoint", p(&garbage)]), 3);
}

#[test]
fn diverging_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = tiny_dataset(dir.path());
    let run = dir.path().join("run");
    let args = [
        "train", "--data", p(&train), "--out", p(&run), "--epochs", "10", "--batch-size", "16", "--lr-target", "1e6",
        "--lr-aux", "1e6",
    ];
    assert_eq!(code(&args), 4);
}

#[test]
fn default_config_on_tiny_dataset_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = tiny_dataset(dir.path());
    let run = dir.path().join("run");
    let start = Instant::now();
    ok(&["train", "--data", p(&train), "--test", p(&test), "--out", p(&run), "--epochs", "5"]);
    assert!(start.elapsed() < Duration::from_secs(60));
    for f in ["checkpoint.json", "metrics.csv", "audit.csv", "templates.csv", "config.toml", "graph.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
}

#[test]
fn branch_flags_reach_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = tiny_dataset(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--data", p(&train), "--out", p(&run), "--epochs", "1", "--no-target", "--no-aux"]);
    let cfg = TrainConfig::from_toml(&fs::read_to_string(run.join("config.toml")).unwrap()).unwrap();
    assert!(!cfg.use_target && !cfg.use_aux);
    assert!(!run.join("graph.csv").exists());

    let cfg_file = dir.path().join("cfg.toml");
    fs::write(&cfg_file, "epochs = 2\ntheta = 0.3\n").unwrap();
    ok(&["train", "--data", p(&train), "--out", p(&run), "--config", p(&cfg_file), "--epochs", "1"]);
    let cfg = TrainConfig::from_toml(&fs::read_to_string(run.join("config.toml")).unwrap()).unwrap();
    assert_eq!((cfg.epochs, cfg.theta), (1, 0.3));
}

#[test]
fn reruns_and_resumes_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = tiny_dataset(dir.path());
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--data", p(&train), "--test", p(&test), "--out", p(&out)];
        args.extend_from_slice(&FAST);
        args.extend_from_slice(extra);
        ok(&args);
        out
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    for f in ["metrics.csv", "audit.csv", "checkpoint.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let audit = fs::read_to_string(a.join("audit.csv")).unwrap();
    assert!(audit.lines().count() > 1, "no corrections were made");

    let partial = run("partial", &["--stop-after", "3"]);
    let ckpt = partial.join("checkpoint.json");
    let resumed = dir.path().join("resumed");
    ok(&["train", "--data", p(&train), "--test", p(&test), "--out", p(&resumed), "--resume", p(&ckpt)]);
    for f in ["metrics.csv", "audit.csv", "checkpoint.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(resumed.join(f)).unwrap(), "{f} differs after resume");
    }
    assert_eq!(
        code(&["train", "--data", p(&train), "--out", p(&resumed), "--resume", p(&ckpt), "--epochs", "9"]),
        2
    );
}

#[test]
fn eval_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = tiny_dataset(dir.path());
    let run = dir.path().join("run");
    let mut args = vec!["train", "--data", p(&train), "--test", p(&test), "--out", p(&run)];
    args.extend_from_slice(&FAST);
    ok(&args);
    let ckpt = run.join("checkpoint.json");

    let eval = ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&test), "--out", p(&dir.path().join("conf.csv"))]);
    assert!(eval.starts_with("accuracy "), "{eval}");
    let conf = fs::read_to_string(dir.path().join("conf.csv")).unwrap();
    let total: usize = conf.split([',', '\n']).filter(|s| !s.is_empty()).map(|s| s.parse::<usize>().unwrap()).sum();
    assert_eq!(total, 100);

    let graph = ok(&["inspect", "graph", p(&run.join("graph_normalized.csv"))]);
    assert!(graph.starts_with("8x8 adjacency"), "{graph}");
    assert_eq!(graph.matches("sum 1.0000").count(), 8);

    let audit = ok(&["inspect", "audit", p(&run.join("audit.csv"))]);
    assert!(audit.contains("total"), "{audit}");

    let info = ok(&["inspect", "checkpoint", p(&ckpt)]);
    assert!(info.contains("epoch        6/6"), "{info}");
    assert!(info.contains("config hash"));
    let shape = ["backbone.w1", "8", "x", "64"];
    assert!(info.lines().any(|l| l.split_whitespace().eq(shape)), "{info}");

    let templates = ok(&["inspect", "templates", p(&ckpt)]);
    assert_eq!(templates.lines().count(), 4);
    let confusion = ok(&["inspect", "confusion", p(&ckpt)]);
    assert!(confusion.starts_with("epoch 6 accuracy"), "{confusion}");
}

fn small_spec(dir: &Path, kind: ExperimentKind) -> PathBuf {
    let mut spec = ExperimentSpec::desk_scale(kind);
    spec.data.n = 150;
    spec.n_test = 60;
    spec.seeds = vec![0, 1];
    spec.train.epochs = 2;
    spec.train.hidden = 8;
    spec.train.feature_dim = 8;
    spec.train.node_dim = 4;
    spec.train.gcn_channels = 8;
    spec.output_dir = dir.join("results");
    let path = dir.join("spec.toml");
    fs::write(&path, spec.to_toml()).unwrap();
    path
}

fn table_rows(dir: &Path) -> Vec<String> {
    let csv = fs::read_to_string(dir.join("results/table.csv")).unwrap();
    csv.lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect()
}

#[test]
fn ablation_edges_and_sweep_tables() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path(), ExperimentKind::Ablation);
    ok(&["ablate", "--spec", p(&spec)]);
    assert_eq!(table_rows(dir.path()), ["neither", "target_only", "aux_only", "full"]);
    let first = fs::read(dir.path().join("results/table.csv")).unwrap();
    ok(&["ablate", "--spec", p(&spec)]);
    assert_eq!(fs::read(dir.path().join("results/table.csv")).unwrap(), first);

    let spec = small_spec(dir.path(), ExperimentKind::Edges);
    ok(&["ablate", "--spec", p(&spec), "--seeds", "4"]);
    assert_eq!(table_rows(dir.path()), ["random", "data_driven"]);
    let saved = ExperimentSpec::from_toml(&fs::read_to_string(dir.path().join("results/spec.toml")).unwrap()).unwrap();
    assert_eq!(saved.seeds, vec![4]);

    let spec = small_spec(dir.path(), ExperimentKind::NoiseSweep);
    assert_eq!(code(&["ablate", "--spec", p(&spec)]), 2);
    ok(&["sweep", "--spec", p(&spec)]);
    assert_eq!(
        table_rows(dir.path()),
        ["baseline@0.1", "ulc_ag@0.1", "baseline@0.2", "ulc_ag@0.2", "baseline@0.3", "ulc_ag@0.3"]
    );
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (name, kind) in [
        ("ablation", ExperimentKind::Ablation),
        ("edges", ExperimentKind::Edges),
        ("sweep", ExperimentKind::NoiseSweep),
    ] {
        let spec = ExperimentSpec::from_toml(&fs::read_to_string(root.join(format!("{name}.toml"))).unwrap()).unwrap();
        let mut want = ExperimentSpec::desk_scale(kind);
        want.output_dir = format!("results/{name}").into();
        assert_eq!(spec, want, "{name}.toml");
    }
    let train = TrainConfig::from_toml(&fs::read_to_string(root.join("train.toml")).unwrap()).unwrap();
    assert_eq!(train, ExperimentSpec::desk_scale(ExperimentKind::SingleRun).train);
}
