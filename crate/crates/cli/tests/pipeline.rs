use std::path::Path;
use std::process::{Command, Output};

fn dml(out_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dml"))
        .arg("--out-dir")
        .arg(out_dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL_MODEL: &[&str] = &[
    "--set", "epochs=3",
    "--set", "batch_size=20",
    "--set", "feature_dim=16",
    "--set", "hidden=32",
    "--set", "d_alpha=8",
    "--set", "d_beta=8",
];

#[test]
fn gen_data_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let o = dml(
        &data_dir,
        &["gen-data", "--seed", "5", "--set", "synthetic.num_classes=10", "--set", "synthetic.per_class=12"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = data_dir.join("data.csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 120);
    assert_eq!(std::fs::read_to_string(data_dir.join("shared.txt")).unwrap().lines().count(), 120);

    let run_dir = dir.path().join("run");
    let data_arg = format!("data.csv={}", csv.display());
    let mut args = vec!["train", "--set", data_arg.as_str()];
    args.extend_from_slice(SMALL_MODEL);
    let o = dml(&run_dir, &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.txt", "run.jsonl", "model.json", "test_embeddings.csv"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let trained = stdout(&o);
    let alpha_line = trained.lines().find(|l| l.starts_with("test alpha")).unwrap().to_string();

    // The checkpoint evaluated on the same data reproduces the training report.
    let ck = run_dir.join("model.json");
    let eval_dir = dir.path().join("eval");
    let o = dml(
        &eval_dir,
        &["eval", "--checkpoint", ck.to_str().unwrap(), "--set", data_arg.as_str(), "--dump"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).lines().any(|l| l == alpha_line));
    assert!(eval_dir.join("eval_test.json").exists());
    assert_eq!(
        std::fs::read(eval_dir.join("test_embeddings.csv")).unwrap(),
        std::fs::read(run_dir.join("test_embeddings.csv")).unwrap()
    );

    // The saved config replays the run bit for bit.
    let replay_dir = dir.path().join("replay");
    let cfg = run_dir.join("config.txt");
    let o = dml(&replay_dir, &["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(replay_dir.join("model.json")).unwrap(),
        std::fs::read(ck).unwrap()
    );
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = dml(dir.path(), &["train", "--config", "/nonexistent/exp.cfg"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/exp.cfg"));
}

#[test]
fn bad_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = dml(dir.path(), &["train", "--set", "no_such_key=1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
    let o = dml(dir.path(), &["train", "--set", "update_period=0"]);
    assert!(!o.status.success());
}

#[test]
fn gradcheck_passes_and_fails_on_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let o = dml(dir.path(), &["gradcheck", "--seeds", "3"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("PASS"));
    let o = dml(dir.path(), &["gradcheck", "--seeds", "3", "--tol", "1e-300"]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_dml"))
        .env("DML_OUT_DIR", &target)
        .args(["gen-data", "--set", "synthetic.num_classes=4", "--set", "synthetic.per_class=3"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(target.join("data.csv").exists());
}

#[test]
fn ablate_writes_one_row_per_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "ablate",
        "--seeds",
        "1",
        "--set",
        "synthetic.num_classes=8",
        "--set",
        "synthetic.per_class=8",
        "--set",
        "synthetic.input_dim=16",
        "--set",
        "synthetic.class_rank=4",
        "--set",
        "clusters=2",
    ];
    args.extend_from_slice(SMALL_MODEL);
    args.extend_from_slice(&["--set", "batch_size=16", "--set", "d_alpha=12", "--set", "d_beta=12"]);
    let o = dml(dir.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 14);
}

#[test]
fn divergence_saves_diagnostic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = dml(
        dir.path(),
        &[
            "train",
            "--set", "learning_rate=1e308",
            "--set", "epochs=2",
            "--set", "synthetic.num_classes=10",
            "--set", "synthetic.per_class=12",
            "--set", "batch_size=20",
        ],
    );
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
    assert!(dir.path().join("diverged.json").exists());
    assert!(!dir.path().join("model.json").exists());
}
