use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cbd::eval::{EvalReport, CSV_HEADER};
use cbd::Model;

const QUICK: &str = r#"
method = "cbd"
seed = 1
epochs_stage1 = 2
epochs_stage2 = 2
batch_size = 16
widths = [12, 6]

[profile]
num_classes = 4
head_count = 30
tail_count = 4
feature_dim = 5
class_separation = 3.0
noise_sigma = 0.7
seed = 1
test_per_class = 10
"#;

fn cbd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_writes_two_reproducible_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let args = |out: &Path| {
        vec![
            "synth",
            "--classes",
            "20",
            "--head",
            "200",
            "--tail",
            "5",
            "--seed",
            "1",
            "--out",
            s(out),
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>()
    };
    for out in [&a, &b] {
        let o = Command::new(env!("CARGO_BIN_EXE_cbd"))
            .args(args(out))
            .output()
            .unwrap();
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    for f in ["train.csv", "test.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let train = cbd::Dataset::load(a.join("train.csv")).unwrap();
    assert_eq!(train.class_counts()[0], 200);
    assert_eq!(*train.class_counts().last().unwrap(), 5);
}

#[test]
fn synth_rejects_a_single_class() {
    let dir = tempfile::tempdir().unwrap();
    let o = cbd(&[
        "synth",
        "--classes",
        "1",
        "--head",
        "10",
        "--tail",
        "5",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_reports_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUICK);
    let out = dir.path().join("out");
    let o = cbd(&[
        "train",
        "--config",
        &cfg,
        "--set",
        "alpha=0.4",
        "--out",
        s(&out),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let report = EvalReport::load(out.join("report.json")).unwrap();
    assert_eq!(report.method, "cbd");
    assert_eq!(report.config["alpha"], 0.4);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    let (student, hash) = Model::load(out.join("report.model.ckpt.json")).unwrap();
    assert_eq!(student.spec.widths, vec![12, 6]);
    assert_eq!(hash.len(), 16);
    assert!(out.join("report.teacher_0.ckpt.json").exists());

    // Same config, same numbers.
    let again = dir.path().join("again");
    let o = cbd(&[
        "train",
        "--config",
        &cfg,
        "--set",
        "alpha=0.4",
        "--out",
        s(&again),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let second = EvalReport::load(again.join("report.json")).unwrap();
    assert_eq!(
        (
            report.overall_acc,
            report.many_acc,
            report.mid_acc,
            report.few_acc,
            report.ncm_overall_acc
        ),
        (
            second.overall_acc,
            second.many_acc,
            second.mid_acc,
            second.few_acc,
            second.ncm_overall_acc
        )
    );
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("alpah = 0.3\n{QUICK}"));
    let o = cbd(&["train", "--config", &cfg, "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpah"));

    let cfg = write_config(dir.path(), QUICK);
    let o = cbd(&[
        "train",
        "--config",
        &cfg,
        "--set",
        "alpha=1.5",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = cbd(&["train", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numerical_abort_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUICK);
    let o = cbd(&[
        "train",
        "--config",
        &cfg,
        "--set",
        "lr0=1e308",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(
        o.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("step"));
}

#[test]
fn dataset_path_is_resolved_next_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = cbd(&[
        "synth",
        "--classes",
        "3",
        "--head",
        "20",
        "--tail",
        "4",
        "--dim",
        "4",
        "--out",
        s(&data),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let cfg = write_config(
        dir.path(),
        "method = \"crt\"\nepochs_stage1 = 1\nepochs_stage2 = 1\nbatch_size = 8\ndataset_path = \"data\"\n",
    );
    let out = dir.path().join("out");
    let o = cbd(&["train", "--config", &cfg, "--out", s(&out)]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(
        EvalReport::load(out.join("report.json")).unwrap().method,
        "crt"
    );
}

#[test]
fn ablate_rejects_two_axes_and_sweeps_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUICK);
    let o = cbd(&[
        "ablate",
        "--config",
        &cfg,
        "--axis",
        "alpha",
        "--axis",
        "beta",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = cbd(&[
        "ablate",
        "--config",
        &cfg,
        "--axis",
        "alpha,beta",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = cbd(&[
        "ablate",
        "--config",
        &cfg,
        "--axis",
        "alpha",
        "--values",
        "0,0.4",
        "--modes",
        "feature,hybrid",
        "--jobs",
        "2",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let sweep = fs::read_to_string(dir.path().join("ablate_alpha/sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], format!("{CSV_HEADER},axis,value,mode"));
    assert_eq!(lines.len(), 1 + 2 * 2);
    assert!(!dir.path().join("ablate_alpha/sweep.csv.partial").exists());
}

#[test]
fn suite_aggregates_every_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUICK);
    let out = dir.path().join("suite");
    let o = cbd(&[
        "suite",
        "--config",
        &cfg,
        "--seeds",
        "0,1",
        "--methods",
        "instance,crt,cbd",
        "--jobs",
        "2",
        "--out",
        s(&out),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let reports: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
        .collect();
    assert_eq!(reports.len(), 6);
    let aggregate = fs::read_to_string(out.join("aggregate.csv")).unwrap();
    assert_eq!(aggregate.lines().count(), 4);
    let crt_runs: Vec<f64> = [0, 1]
        .iter()
        .map(|s| {
            EvalReport::load(out.join(format!("crt_seed{s}.json")))
                .unwrap()
                .overall_acc
        })
        .collect();
    let row = aggregate.lines().find(|l| l.starts_with("crt,")).unwrap();
    let mean: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
    assert!((mean - (crt_runs[0] + crt_runs[1]) / 2.0).abs() < 1e-15);

    let single = dir.path().join("single");
    let o = cbd(&[
        "suite",
        "--config",
        &cfg,
        "--seeds",
        "3",
        "--methods",
        "instance",
        "--out",
        s(&single),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let agg = fs::read_to_string(single.join("aggregate.csv")).unwrap();
    let std: f64 = agg
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(3)
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(std, 0.0);

    let o = cbd(&["report", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("crt"));
}
