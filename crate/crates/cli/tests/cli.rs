use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_checklearn"));
    c.env_remove("CHECKLEARN_OUT_DIR");
    c
}

fn run(args: &[&str], out_dir: &Path) -> Output {
    bin().arg("--out-dir").arg(out_dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn generate(dir: &Path, task: &str, n: usize, seed: u64) -> std::path::PathBuf {
    let path = dir.join(format!("{task}-{seed}.csv"));
    let o = run(
        &["generate", "--task", task, "--n", &n.to_string(), "--seed", &seed.to_string(), "--output", path.to_str().unwrap()],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    path
}

#[test]
fn generate_summary_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["generate", "--task", "mnist-analog", "--n", "10000", "--seed", "7"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let all = text.lines().find(|l| l.starts_with("all")).unwrap();
    let rate: f64 = all.rsplit('=').next().unwrap().trim().parse().unwrap();
    assert!((rate - 0.205).abs() <= 0.02, "{rate}");
    let first = std::fs::read(dir.path().join("mnist-analog-7.csv")).unwrap();
    let again = tempfile::tempdir().unwrap();
    let o = run(&["generate", "--task", "mnist-analog", "--n", "10000", "--seed", "7"], again.path());
    assert!(o.status.success());
    assert_eq!(std::fs::read(again.path().join("mnist-analog-7.csv")).unwrap(), first);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["generate", "--n", "10"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["generate", "--task", "nope"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_config_reports_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 3}, "model": {"tau": 0.5, "thresh": 2}}"#).unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--task", "tree"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/model/thresh"), "{}", stderr(&o));
    std::fs::write(&cfg, r#"{"model": {"tau": 2.0}}"#).unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--task", "tree"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/model/tau"), "{}", stderr(&o));
    let o = run(&["train", "--task", "tree", "--concepts", "x"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_is_reproducible_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "mnist-analog", 600, 3);
    let mut histories = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let o = run(
            &["train", "--data", data.to_str().unwrap(), "--concepts", "2", "--epochs", "8", "--seed", "5"],
            &out,
        );
        assert!(o.status.success(), "{}", stderr(&o));
        for f in ["model.json", "history.csv", "checklist.json", "checklist.md", "metrics.json", "run_config.json"] {
            assert!(out.join(f).exists(), "{f}");
        }
        let md = std::fs::read_to_string(out.join("checklist.md")).unwrap();
        assert!(md.contains("Predict positive when"), "{md}");
        let items = md.lines().filter(|l| l.starts_with("- [ ]")).count();
        assert!((1..=8).contains(&items));
        let metrics: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
        assert_eq!(metrics["threshold_candidates"].as_array().unwrap().len(), 8);
        histories.push(std::fs::read(out.join("history.csv")).unwrap());
    }
    assert_eq!(histories[0], histories[1]);
    assert_eq!(
        String::from_utf8_lossy(&histories[0]).lines().count(),
        10,
        "header plus epochs 0..=8"
    );
}

#[test]
fn eval_fairness_block_follows_groups() {
    let dir = tempfile::tempdir().unwrap();
    for (task, grouped) in [("biased-groups", true), ("tree", false)] {
        let data = generate(dir.path(), task, 500, 1);
        let out = dir.path().join(task);
        let kind = if grouped { "checklist" } else { "tree" };
        let o = run(
            &["train", "--data", data.to_str().unwrap(), "--kind", kind, "--threshold", "1", "--epochs", "4"],
            &out,
        );
        assert!(o.status.success(), "{}", stderr(&o));
        let metrics = out.join("eval.json");
        let o = run(
            &[
                "eval",
                "--model",
                out.join("model.json").to_str().unwrap(),
                "--data",
                data.to_str().unwrap(),
                "--output",
                metrics.to_str().unwrap(),
            ],
            &out,
        );
        assert!(o.status.success(), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
        assert_eq!(v["soft"].get("fairness").is_some(), grouped, "{task}");
        assert_eq!(v["split"], "test");
    }
}

#[test]
fn eval_perfect_fit_and_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("sep.csv");
    let mut csv = String::from("sample_id,split,group,label,a__0,b__0\n");
    for i in 0..60 {
        let split = ["train", "train", "train", "validation", "test"][i % 5];
        let y = i % 2 == 0;
        let x = if y { 1.0 } else { -1.0 } * (1.0 + (i % 7) as f64 / 10.0);
        csv.push_str(&format!("{i},{split},,{},{x},0.5\n", u8::from(y)));
    }
    std::fs::write(&data, csv).unwrap();
    let out = dir.path().join("lr");
    let o = run(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--kind",
            "unit_weighting",
            "--epochs",
            "100",
            "--learning-rate",
            "0.1",
        ],
        &out,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let model = out.join("model.json");
    let o = run(&["eval", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["soft"]["accuracy"], 1.0);
    assert_eq!(v["checklist"]["accuracy"], 1.0);
    assert!(v["soft"].get("fairness").is_none());

    // the standalone checklist works without a model
    let spec = out.join("checklist.json");
    let o = run(&["eval", "--spec", spec.to_str().unwrap(), "--data", data.to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", stderr(&o));

    // a dataset lacking the checklist's modality is a schema error
    let other = generate(dir.path(), "tree", 200, 0);
    let o = run(&["eval", "--spec", spec.to_str().unwrap(), "--data", other.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("schema"), "{}", stderr(&o));
    let o = run(&["eval", "--model", model.to_str().unwrap(), "--data", other.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_resumes_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.json");
    std::fs::write(
        &cfg,
        r#"{
  "dataset": {"generate": {"task": "biased-groups", "n": 300}},
  "model": {"threshold": 1},
  "train": {"epochs": 3},
  "sweep": {"concepts": [1, 2], "seeds": [0, 1]}
}"#,
    )
    .unwrap();
    let o = run(&["sweep", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("4 cells (0 cached), 2 rows"), "{}", stdout(&o));
    let first = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(first.lines().count(), 3);
    let o = run(&["sweep", "--config", cfg.to_str().unwrap(), "--workers", "2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("4 cells (4 cached)"), "{}", stdout(&o));
    assert_eq!(std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap(), first);
}

#[test]
fn bench_reports_machine() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["bench", "--max-d", "13", "--min-time-ms", "1"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("bench.json")).unwrap()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 6);
    assert!(v["machine"]["logical_cpus"].as_u64().unwrap() >= 1);
    assert!(v["rows"][0]["enum_secs_per_call"].as_f64().unwrap() < 1.0);
}

#[test]
fn export_uses_env_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "mnist-analog", 300, 2);
    let train_dir = dir.path().join("train");
    let o = run(
        &["train", "--data", data.to_str().unwrap(), "--threshold", "2", "--epochs", "5"],
        &train_dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let export_dir = dir.path().join("exported");
    let o = bin()
        .env("CHECKLEARN_OUT_DIR", &export_dir)
        .args(["export", "--model"])
        .arg(train_dir.join("model.json"))
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let atts = std::fs::read_to_string(export_dir.join("attributions.csv")).unwrap();
    assert!(atts.starts_with("sample_id,concept_id,feature_id,value\n"));
    // 60 test samples x 4 concepts x 40 features
    assert_eq!(atts.lines().count(), 1 + 60 * 4 * 40);

    let tree_data = generate(dir.path(), "tree", 300, 2);
    let tree_dir = dir.path().join("tree");
    let o = run(
        &["train", "--data", tree_data.to_str().unwrap(), "--kind", "tree", "--epochs", "3"],
        &tree_dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let md = std::fs::read_to_string(tree_dir.join("tree.md")).unwrap();
    assert!(md.starts_with("# Decision tree"));
}
