use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[data.synthetic]
length = 600
channels = 2
clean_prefix = 300
seed = 1

[data.synthetic.mix]
global = 1
contextual = 1
shapelet = 1
seasonal = 0
trend = 1

[window]
n = 16
train_stride = 8

[scorenet]
layers = 1
d_model = 8
n_heads = 2

[solver]
t_rec = 0.05

[optim]
batch_size = 8

[train]
epochs = 1
max_steps = 6

[eval]
ratio_source = "fixed"
ratio = 2.0
"#;

fn u2ad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_u2ad")).args(args).output().expect("binary runs")
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn generate_is_deterministic() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = u2ad(&["generate", "--config", s(&cfg), "--seed", "7", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["train.csv", "test.csv", "test.labels", "series.csv", "series.labels", "anomalies.json"] {
        let (x, y) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        assert!(!x.is_empty(), "{f} empty");
        assert_eq!(x, y, "{f} differs");
    }
    let o = u2ad(&["generate", "--config", s(&cfg), "--seed", "8", "--out", s(&b)]);
    assert!(o.status.success());
    assert_ne!(fs::read(a.join("series.csv")).unwrap(), fs::read(b.join("series.csv")).unwrap());
}

#[test]
fn unknown_verb_exits_one_with_usage() {
    let o = u2ad(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).to_lowercase().contains("usage"));
    assert_eq!(u2ad(&["--help"]).status.code(), Some(0));
}

#[test]
fn error_classes_map_to_exit_codes() {
    let (dir, cfg) = setup();
    let o = u2ad(&["train", "--config", s(&cfg), "--set", "scorenet.no_such_key=1", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let line = stderr(&o);
    assert!(line.starts_with("error: class=config code=1 msg="), "{line}");
    assert_eq!(line.trim_end().lines().count(), 1);

    let missing = dir.path().join("missing.csv");
    let o = u2ad(&[
        "train",
        "--set",
        &format!("data.train=\"{}\"", s(&missing)),
        "--set",
        &format!("data.test=\"{}\"", s(&missing)),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error: class=data code=2"));
}

#[test]
fn train_evaluate_detect_report() {
    let (dir, cfg) = setup();
    let run = dir.path().join("run");
    let o = u2ad(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["manifest.json", "model_best.bin", "model_last.bin", "loss_log.jsonl"] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let o = u2ad(&["evaluate", "--config", s(&cfg), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    for k in ["precision", "recall", "f1", "add", "nrd", "auc_roc", "auc_pr", "vus_roc", "vus_pr"] {
        assert!(report[k].is_number(), "{k} missing: {report}");
    }
    let first = fs::read(run.join("scores_test.csv")).unwrap();
    let o = u2ad(&["evaluate", "--config", s(&cfg), "--out", s(&run)]);
    assert!(o.status.success());
    assert_eq!(first, fs::read(run.join("scores_test.csv")).unwrap(), "evaluate is not idempotent");

    // Labels next to the input are unreadable garbage: detect must not open them.
    let data = dir.path().join("data");
    let o = u2ad(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    assert!(o.status.success());
    fs::write(data.join("test.labels"), "not,a,label\n\u{1}\n").unwrap();
    let input = data.join("test.csv");
    let o = u2ad(&["detect", "--config", s(&cfg), "--out", s(&run), "--input", s(&input)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let scores = fs::read_to_string(run.join("detect_scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 301);
    let th: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("detect_threshold.json")).unwrap()).unwrap();
    let det: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("detection.json")).unwrap()).unwrap();
    assert_eq!(th["threshold"], det["threshold"]);

    let o = u2ad(&["report", "--config", s(&cfg), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(run.join("plots/scores.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(run.join("plots/threshold.csv").exists());
    assert!(run.join("plots/episode_00.svg").exists());
    assert!(fs::read_to_string(run.join("report.md")).unwrap().contains("F1"));
}

#[test]
fn seeds_loop_writes_summary() {
    let (dir, cfg) = setup();
    let run = dir.path().join("multi");
    let args = ["--config", s(&cfg), "--set", "runs.n_seeds=2", "--out", s(&run)];
    let o = u2ad(&[&["train"][..], &args].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = u2ad(&[&["evaluate"][..], &args].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("seed_0/report.json").exists() && run.join("seed_1/report.json").exists());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["f1"]["n"], 2);
}
