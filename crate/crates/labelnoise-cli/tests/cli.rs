//! End-to-end checks of the CLI surface: subcommands, exit codes, and the
//! files each command leaves behind.

use std::path::Path;

use labelnoise_cli::{cli_main, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE};

fn write_config(dir: &Path, name: &str, body: serde_json::Value) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    path
}

fn quick_flip_config() -> serde_json::Value {
    serde_json::json!({
        "dataset": {"classes": 3, "dim": 4, "train_size": 240, "separation": 5.0, "test_size": 120},
        "noise": {"mode": "flip-random", "level": 0.4, "fan_out": 2},
        "model": {"hidden": [16], "epochs": 6, "batch_size": 32},
        "q": {"freeze_epochs": 2},
        "seed": 5
    })
}

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["labelnoise"];
    argv.extend(args);
    cli_main(argv)
}

#[test]
fn unknown_flag_exits_with_usage_error() {
    assert_eq!(run(&["train", "--bogus", "x"]), EXIT_USAGE);
    assert_eq!(run(&["no-such-command"]), EXIT_USAGE);
}

#[test]
fn help_exits_zero() {
    assert_eq!(run(&["--help"]), EXIT_OK);
}

#[test]
fn missing_config_exits_with_usage_error() {
    assert_eq!(run(&["train", "--config", "/nonexistent/c.json"]), EXIT_USAGE);
}

#[test]
fn malformed_config_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = quick_flip_config();
    body["noise"]["levell"] = serde_json::json!(0.5);
    let cfg = write_config(dir.path(), "c.json", body);
    assert_eq!(run(&["train", "--config", cfg.to_str().unwrap()]), EXIT_USAGE);
}

#[test]
fn train_is_deterministic_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", quick_flip_config());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let code = run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK);
    }
    for file in ["report.json", "model.json", "q.csv", "qstar.csv"] {
        let a = std::fs::read(out_a.join(file)).unwrap();
        let b = std::fs::read(out_b.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn diverged_training_exits_2_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = quick_flip_config();
    body["model"]["learning_rate"] = serde_json::json!(1e300);
    let cfg = write_config(dir.path(), "c.json", body);
    let out = dir.path().join("out");
    let code = run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_DIVERGED);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["status"], "diverged");
}

#[test]
fn sweep_writes_cell_files_and_summary_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = quick_flip_config();
    body["model"]["epochs"] = serde_json::json!(4);
    body["q"]["freeze_epochs"] = serde_json::json!(1);
    body["sweep"] = serde_json::json!({
        "noise_levels": [0.2, 0.4],
        "train_sizes": [150, 240]
    });
    let cfg = write_config(dir.path(), "c.json", body);
    let out = dir.path().join("sweep");
    assert_eq!(
        run(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]),
        EXIT_OK
    );

    // 2x2 grid: one report file per cell plus the summary.
    for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        assert!(out.join(format!("cell_{i}_{j}.json")).exists());
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(
        lines[0],
        "noise_level,train_size,variant,test_error,q_recovery,ap,seed"
    );
    // 4 cells x 3 variants x 1 seed.
    assert_eq!(lines.len() - 1, 12, "summary:\n{summary}");
    assert!(out.join("summary_agg.csv").exists());

    // Summary values echo the per-cell reports exactly.
    let cell: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("cell_0_0.json")).unwrap(),
    )
    .unwrap();
    let report_err = cell["reports"][0]["test_error"].as_f64().unwrap();
    let first_row: Vec<&str> = lines[1].split(',').collect();
    let summary_err: f64 = first_row[3].parse().unwrap();
    assert_eq!(report_err.to_bits(), summary_err.to_bits());
}

#[test]
fn generate_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", quick_flip_config());
    let data_dir = dir.path().join("data");
    assert_eq!(
        run(&["generate", "--config", cfg.to_str().unwrap(), "--out", data_dir.to_str().unwrap()]),
        EXIT_OK
    );
    for file in ["train.csv", "test.csv", "qstar.csv"] {
        assert!(data_dir.join(file).exists(), "{file} missing");
    }

    let run_dir = dir.path().join("run");
    assert_eq!(
        run(&["train", "--config", cfg.to_str().unwrap(), "--out", run_dir.to_str().unwrap()]),
        EXIT_OK
    );
    let eval_dir = dir.path().join("eval");
    assert_eq!(
        run(&[
            "eval",
            "--config",
            cfg.to_str().unwrap(),
            "--model",
            run_dir.join("model.json").to_str().unwrap(),
            "--out",
            eval_dir.to_str().unwrap(),
        ]),
        EXIT_OK
    );
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("eval.json")).unwrap())
            .unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("report.json")).unwrap())
            .unwrap();
    // Re-scoring the checkpoint on the regenerated test set reproduces the
    // reported test error exactly.
    assert_eq!(
        eval["test_error"].as_f64().unwrap().to_bits(),
        report["test_error"].as_f64().unwrap().to_bits()
    );

    // Scoring an explicit dataset file works too.
    assert_eq!(
        run(&[
            "eval",
            "--config",
            cfg.to_str().unwrap(),
            "--model",
            run_dir.join("model.json").to_str().unwrap(),
            "--data",
            data_dir.join("test.csv").to_str().unwrap(),
        ]),
        EXIT_OK
    );
}

#[test]
fn inspect_q_reports_zero_recovery_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", quick_flip_config());
    let data_dir = dir.path().join("data");
    assert_eq!(
        run(&["generate", "--config", cfg.to_str().unwrap(), "--out", data_dir.to_str().unwrap()]),
        EXIT_OK
    );
    let qstar = data_dir.join("qstar.csv");
    assert_eq!(
        run(&[
            "inspect-q",
            "--q",
            qstar.to_str().unwrap(),
            "--q-star",
            qstar.to_str().unwrap(),
        ]),
        EXIT_OK
    );
}

#[test]
fn binary_smoke_test() {
    // Exercise the real executable once to pin down exit-code wiring.
    let exe = env!("CARGO_BIN_EXE_labelnoise");
    let status = std::process::Command::new(exe)
        .arg("--help")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let status = std::process::Command::new(exe)
        .arg("--definitely-not-a-flag")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}
