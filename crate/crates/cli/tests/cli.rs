use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use osev_core::evidential::threshold_from_train_scores;
use osev_core::metrics::{open_set_metrics, parse_score_dump};
use osev_core::pipeline::MetricsReport;

fn osev(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_osev"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("run osev")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SPEC: &str = "\
known_classes = 3
unknown_classes = 2
train_per_class = 10
test_per_class = 6
timesteps = 16
seed = 3
";

const CONFIG: &str = "\
data = data/manifest.json
hidden_channels = 4
kernel_width = 3
conv_layers = 1
epochs = 4
batch_size = 8
lr = 0.01
selections = 2
seed = 1
";

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("data.spec"), SPEC).unwrap();
    fs::write(dir.path().join("run.cfg"), CONFIG).unwrap();
    ok(&osev(&["generate-data", "--spec", "data.spec", "--out", "data"], dir.path()));
    dir
}

fn read(path: PathBuf) -> Vec<u8> {
    fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn generate_data_is_reproducible_and_creates_nested_dirs() {
    let dir = workspace();
    ok(&osev(&["generate-data", "--spec", "data.spec", "--out", "a/b/c"], dir.path()));
    for f in ["manifest.json", "train.csv", "test_biased.csv", "test_unbiased.csv", "test_unknown.csv"] {
        assert_eq!(read(dir.path().join("data").join(f)), read(dir.path().join("a/b/c").join(f)));
    }
}

#[test]
fn invalid_spec_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.spec"), "known_classes = 1\n").unwrap();
    let out = osev(&["generate-data", "--spec", "bad.spec", "--out", "d"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("known_classes"));

    fs::write(dir.path().join("typo.spec"), "known_clases = 3\n").unwrap();
    let out = osev(&["generate-data", "--spec", "typo.spec", "--out", "d"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":1:"));
}

#[test]
fn train_outputs_are_byte_identical_across_runs() {
    let dir = workspace();
    ok(&osev(&["train", "--config", "run.cfg", "--out", "r1"], dir.path()));
    ok(&osev(&["train", "--config", "run.cfg", "--out", "r2"], dir.path()));
    for f in ["loss.csv", "checkpoint.json", "checkpoint.bin", "model.json", "model.bin"] {
        assert_eq!(read(dir.path().join("r1").join(f)), read(dir.path().join("r2").join(f)), "{f}");
    }
    let csv = String::from_utf8(read(dir.path().join("r1/loss.csv"))).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    assert!((rows[0][1] - 0.01).abs() < 1e-12);
    assert!((rows[3][1] - 1.0).abs() < 1e-12);
}

#[test]
fn non_finite_loss_exits_3() {
    let dir = workspace();
    let cfg = CONFIG.replace("lr = 0.01", "lr = 1e200");
    fs::write(dir.path().join("boom.cfg"), cfg).unwrap();
    let out = osev(&["train", "--config", "boom.cfg", "--out", "boom"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
}

#[test]
fn eval_report_reproduces_from_score_dumps() {
    let dir = workspace();
    ok(&osev(&["train", "--config", "run.cfg", "--out", "r"], dir.path()));
    ok(&osev(&["eval", "--checkpoint", "r/model.json", "--data", "data", "--out", "r/report.json"], dir.path()));
    ok(&osev(&["eval", "--checkpoint", "r/checkpoint.json", "--data", "data", "--out", "r/again.json"], dir.path()));
    let report_bytes = read(dir.path().join("r/report.json"));
    let again = String::from_utf8(read(dir.path().join("r/again.json"))).unwrap();
    let report: MetricsReport = serde_json::from_slice(&report_bytes).unwrap();
    let again: MetricsReport = serde_json::from_str(&again).unwrap();
    assert_eq!(report.open_set, again.open_set);

    let dump = |split: &str| {
        let text = String::from_utf8(read(dir.path().join(format!("r/report_scores_{split}.jsonl")))).unwrap();
        parse_score_dump(&text, split).unwrap()
    };
    let train = dump("train");
    let scores: Vec<f64> = train.iter().map(|r| r.score).collect();
    let tau = threshold_from_train_scores(&scores, report.coverage).unwrap();
    assert_eq!(tau, report.open_set.threshold);
    assert!(report.train_known_fraction >= report.coverage);
    let rebuilt = open_set_metrics(&dump("test_biased"), &dump("test_unknown"), tau, &report.settings).unwrap();
    assert_eq!(rebuilt, report.open_set);

    let curve = String::from_utf8(read(dir.path().join("r/report_curve.csv"))).unwrap();
    assert!(curve.starts_with("i,omega,f1_mean,f1_std\n"));
    assert!(report.config.contains("hidden_channels = 4"));
}

#[test]
fn eval_on_mismatched_data_exits_4() {
    let dir = workspace();
    ok(&osev(&["train", "--config", "run.cfg", "--out", "r"], dir.path()));
    fs::write(dir.path().join("other.spec"), SPEC.replace("known_classes = 3", "known_classes = 4")).unwrap();
    ok(&osev(&["generate-data", "--spec", "other.spec", "--out", "other"], dir.path()));
    let out = osev(&["eval", "--checkpoint", "r/model.json", "--data", "other", "--out", "x.json"], dir.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn gradcheck_passes_and_negative_control_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("g.cfg"), "seed = 2\n").unwrap();
    let out = osev(&["gradcheck", "--config", "g.cfg", "--instances", "3"], dir.path());
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["edl_loss", "euc_loss", "hsic_value_and_grad", "debias_objective", "bias_objective", "composed_model"] {
        assert!(text.contains(name), "{name} missing from {text}");
    }
    let out = osev(&["gradcheck", "--config", "g.cfg", "--instances", "3", "--inject-bug"], dir.path());
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("composed_model"));
}

#[test]
fn sweep_records_failures_and_keeps_going() {
    let dir = workspace();
    let grid = dir.path().join("grid");
    fs::create_dir(&grid).unwrap();
    fs::write(grid.join("a.cfg"), CONFIG.replace("data/", "../data/")).unwrap();
    fs::write(grid.join("b.cfg"), CONFIG.replace("data/", "../nowhere/")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_osev"))
        .args(["sweep", "--configs", "grid", "--seeds", "2", "--out", "sw"])
        .current_dir(dir.path())
        .env("OSEV_THREADS", "2")
        .output()
        .unwrap();
    ok(&out);
    let summary: serde_json::Value = serde_json::from_slice(&read(dir.path().join("sw/summary.json"))).unwrap();
    let configs = summary["configs"].as_array().unwrap();
    assert_eq!(configs.len(), 2);
    assert!(configs[0]["runs"].as_array().unwrap().iter().all(|r| r["error"].is_null()));
    assert!(configs[1]["runs"].as_array().unwrap().iter().all(|r| r["error"].is_string()));
    assert!(dir.path().join("sw/runs/a/seed-1/report.json").exists());
    let csv = String::from_utf8(read(dir.path().join("sw/summary.csv"))).unwrap();
    assert!(csv.starts_with("config,metric,mean,std,n\n"));
    assert!(String::from_utf8(read(dir.path().join("sw/sweep.log"))).unwrap().contains("failed"));
}
