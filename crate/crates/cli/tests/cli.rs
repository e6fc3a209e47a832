//! End-to-end checks of the `alfa` binary: exit codes, run-directory
//! contents, determinism, resume, and the trace export.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn alfa() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_alfa"));
    cmd.env("ALFA_THREADS", "1");
    cmd
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("alfa-cli-tests").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// Small sinusoid config that trains in a couple of seconds.
fn small_config(total_iterations: u64, steps: usize) -> String {
    format!(
        r#"{{
  "learner": {{ "kind": "regression-mlp", "hidden": [8], "input_dim": 1, "output_dim": 1 }},
  "update_rule": {{ "rule": "alfa", "alpha_mode": "generated-full", "beta_mode": "generated-full", "steps": {steps} }},
  "train": {{ "init_mode": "maml-jointly-trained", "meta_batch_size": 2,
             "total_iterations": {total_iterations}, "eval_every": 0, "eval_tasks": 8,
             "seed_train": 5, "seed_eval": 5 }},
  "tasks": {{ "family": "sinusoid", "k_shot": 5, "query_size": 20 }}
}}"#
    )
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.json");
    fs::write(&path, text).unwrap();
    path
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

fn strip_wall(log: &str) -> String {
    log.lines()
        .map(|l| l.rsplit_once(',').map(|(head, _)| head).unwrap_or(l))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let dir = tmp_dir("missing_config");
    let out = alfa()
        .args(["train", "--config", "/nonexistent/cfg.json", "--out"])
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/nonexistent/cfg.json"), "{stderr}");
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tmp_dir("unknown_key");
    let cfg = small_config(2, 2).replace(r#""seed_train": 5"#, r#""seed_train": 5, "typo_field": 1"#);
    let path = write_config(&dir, &cfg);
    let out = alfa().args(["train", "--config"]).arg(&path).arg("--out").arg(dir.join("out")).output().unwrap();
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("typo_field"));
}

#[test]
fn train_writes_the_run_directory_contract() {
    let dir = tmp_dir("train_contract");
    let path = write_config(&dir, &small_config(6, 2));
    let out_dir = dir.join("out");
    let out = alfa().args(["train", "--config"]).arg(&path).arg("--out").arg(&out_dir).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    for file in ["config.json", "train_log.csv", "checkpoint.alfa", "report.json", "evals.csv"] {
        assert!(out_dir.join(file).exists(), "missing {file}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert!(report["mean_query_loss"].is_number());
    assert!(report["ci95_half_width"].is_number());
    assert_eq!(report["task_count"], 8);

    let log = fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 6);
    assert!(log.starts_with("iteration,support_loss,query_loss,wall_ms"));

    // Re-running from the echoed config reproduces the run bitwise.
    let echo_dir = dir.join("echo");
    let out = alfa()
        .args(["train", "--config"])
        .arg(out_dir.join("config.json"))
        .arg("--out")
        .arg(&echo_dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert_eq!(
        strip_wall(&fs::read_to_string(out_dir.join("train_log.csv")).unwrap()),
        strip_wall(&fs::read_to_string(echo_dir.join("train_log.csv")).unwrap())
    );
    assert_eq!(
        fs::read(out_dir.join("report.json")).unwrap(),
        fs::read(echo_dir.join("report.json")).unwrap()
    );
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tmp_dir("resume");
    let full_cfg = write_config(&dir, &small_config(10, 2));

    let full_dir = dir.join("full");
    let out = alfa().args(["train", "--config"]).arg(&full_cfg).arg("--out").arg(&full_dir).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    // First half.
    let half_path = dir.join("half.json");
    fs::write(&half_path, small_config(5, 2)).unwrap();
    let resumed_dir = dir.join("resumed");
    let out = alfa().args(["train", "--config"]).arg(&half_path).arg("--out").arg(&resumed_dir).output().unwrap();
    assert_eq!(code(&out), 0);

    // Second half, resumed from the checkpoint into the same directory.
    let out = alfa()
        .args(["train", "--config"])
        .arg(&full_cfg)
        .arg("--out")
        .arg(&resumed_dir)
        .arg("--resume")
        .arg(resumed_dir.join("checkpoint.alfa"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(
        strip_wall(&fs::read_to_string(full_dir.join("train_log.csv")).unwrap()),
        strip_wall(&fs::read_to_string(resumed_dir.join("train_log.csv")).unwrap())
    );
    assert_eq!(
        fs::read(full_dir.join("report.json")).unwrap(),
        fs::read(resumed_dir.join("report.json")).unwrap()
    );
    assert_eq!(
        fs::read(full_dir.join("checkpoint.alfa")).unwrap(),
        fs::read(resumed_dir.join("checkpoint.alfa")).unwrap()
    );
}

#[test]
fn eval_reports_task_count_and_is_deterministic() {
    let dir = tmp_dir("eval");
    let cfg = write_config(&dir, &small_config(4, 2));
    let out_dir = dir.join("out");
    let out = alfa().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out_dir).output().unwrap();
    assert_eq!(code(&out), 0);

    let run_eval = || {
        alfa()
            .args(["eval", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(out_dir.join("checkpoint.alfa"))
            .args(["--tasks", "12"])
            .output()
            .unwrap()
    };
    let a = run_eval();
    let b = run_eval();
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let report: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(report["task_count"], 12);
}

#[test]
fn trace_export_has_one_row_per_task_step_unit() {
    let dir = tmp_dir("trace");
    let cfg = write_config(&dir, &small_config(3, 5));
    let out_dir = dir.join("out");
    let out = alfa().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out_dir).output().unwrap();
    assert_eq!(code(&out), 0);

    let trace_path = dir.join("trace.csv");
    let out = alfa()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(out_dir.join("checkpoint.alfa"))
        .args(["--tasks", "10", "--export-trace"])
        .arg(&trace_path)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&trace_path).unwrap();
    // 10 tasks x 5 steps x 4 units (1-8-1 net) plus the header.
    assert_eq!(text.lines().count(), 1 + 10 * 5 * 4);
    assert!(text.starts_with("task_id,step,unit_name,alpha,beta,support_loss"));
}

#[test]
fn structurally_conflicting_checkpoint_exits_4() {
    let dir = tmp_dir("conflict");
    let cfg_a = write_config(&dir, &small_config(2, 2));
    let out_dir = dir.join("out");
    let out = alfa().args(["train", "--config"]).arg(&cfg_a).arg("--out").arg(&out_dir).output().unwrap();
    assert_eq!(code(&out), 0);

    let other = small_config(2, 2).replace(r#""hidden": [8]"#, r#""hidden": [8, 8]"#);
    let cfg_b = dir.join("other.json");
    fs::write(&cfg_b, other).unwrap();
    let out = alfa()
        .args(["eval", "--config"])
        .arg(&cfg_b)
        .arg("--checkpoint")
        .arg(out_dir.join("checkpoint.alfa"))
        .args(["--tasks", "4"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_tiny_passes_and_corruption_exits_5() {
    let ok = alfa().args(["gradcheck", "--size", "tiny"]).output().unwrap();
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(stdout.contains("op::matmul"), "{stdout}");
    assert!(stdout.contains("meta::"), "{stdout}");

    let again = alfa().args(["gradcheck", "--size", "tiny"]).output().unwrap();
    assert_eq!(ok.stdout, again.stdout);

    let bad = alfa().args(["gradcheck", "--size", "tiny", "--corrupt", "relu"]).output().unwrap();
    assert_eq!(code(&bad), 5);
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert!(stderr.contains("op::relu"), "{stderr}");
}

#[test]
fn ablate_steps_grid_produces_six_rows() {
    let dir = tmp_dir("ablate");
    // Very short cells; the table layout is what matters here.
    let cfg = write_config(&dir, &small_config(3, 3));
    let out_dir = dir.join("grid");
    let out = alfa()
        .args(["ablate", "--config"])
        .arg(&cfg)
        .args(["--grid", "steps", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    assert!(csv.contains("sgd step 5"));
    assert!(csv.contains("adaptive step 1"));
    assert!(out_dir.join("ablation.txt").exists());

    let table5 = alfa()
        .args(["ablate", "--config"])
        .arg(&cfg)
        .args(["--grid", "table5", "--out"])
        .arg(dir.join("t5"))
        .output()
        .unwrap();
    assert_eq!(code(&table5), 0);
    let csv = fs::read_to_string(dir.join("t5").join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);

    let table6 = alfa()
        .args(["ablate", "--config"])
        .arg(&cfg)
        .args(["--grid", "table6", "--out"])
        .arg(dir.join("t6"))
        .output()
        .unwrap();
    assert_eq!(code(&table6), 0, "{}", String::from_utf8_lossy(&table6.stderr));
    let csv = fs::read_to_string(dir.join("t6").join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
}

#[test]
fn unknown_grid_is_rejected_by_the_parser() {
    let dir = tmp_dir("bad_grid");
    let cfg = write_config(&dir, &small_config(2, 2));
    let out = alfa()
        .args(["ablate", "--config"])
        .arg(&cfg)
        .args(["--grid", "table9", "--out"])
        .arg(dir.join("x"))
        .output()
        .unwrap();
    assert_ne!(code(&out), 0);
}
