use std::path::Path;
use std::process::{Command, Output};

fn lab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reuse-bias-lab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("REUSE_BIAS_LAB_JOBS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(&["--config", "does-not-exist.json", "measure-bias"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("does-not-exist.json"), "{}", stderr(&out));
}

#[test]
fn print_config_fills_defaults() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"env": {"name": "chain"}}"#).unwrap();
    let out = lab(&["--config", "c.json", "--print-config"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["optim"]["biris_alpha"], 0.05);
    assert_eq!(v["optim"]["learning_rate"], 0.01);
    assert_eq!(v["optim"]["steps"], 500);
    assert_eq!(v["env"]["num_states"], 3);
    assert_eq!(v["behavior"], "uniform");
}

#[test]
fn zero_seeds_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"n_seeds": 0}"#).unwrap();
    let out = lab(&["--config", "c.json", "measure-bias"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("n_seeds"), "{}", stderr(&out));
}

#[test]
fn unknown_algorithm_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(&["--set", "algorithm=pg_magic", "measure-bias"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("pg_magic") && err.contains("pg_wis_biris") && err.contains("argmax"), "{err}");
}

#[test]
fn all_violations_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(&["--set", "n_seeds=0", "--set", "delta=3", "--set", "optim.steps=-1", "measure-bias"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("optim"), "{err}");
    // Field-level type errors are reported before semantic checks run.
    let out = lab(&["--set", "n_seeds=0", "--set", "delta=3", "measure-bias"], dir.path());
    let err = stderr(&out);
    assert!(err.contains("n_seeds") && err.contains("delta"), "{err}");
}

#[test]
fn missing_logits_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(&["--set", r#"behavior={"logits_file":"nope.json"}"#, "measure-bias"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nope.json"), "{}", stderr(&out));
}

#[test]
fn logits_file_sets_behavior() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("l.json"), "[[0.0, 1.0], [0.5, 0.0], [0.0, 0.0]]").unwrap();
    let args = [
        "--set",
        r#"env={"name":"chain"}"#,
        "--set",
        r#"behavior={"logits_file":"l.json"}"#,
        "--set",
        "n_seeds=5",
        "--set",
        "buffer_sizes=[4]",
        "--set",
        "optim.steps=3",
        "--output-dir",
        "out",
        "measure-bias",
    ];
    let out = lab(&args, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    std::fs::write(dir.path().join("l.json"), "[[0.0, 1.0]]").unwrap();
    let out = lab(&args, dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("1x2"), "{}", stderr(&out));
}

#[test]
fn measure_bias_writes_reports_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(
        &[
            "--set",
            r#"env={"name":"chain"}"#,
            "--set",
            "n_seeds=6",
            "--set",
            "buffer_sizes=[3,5]",
            "--set",
            "optim.steps=5",
            "--output-dir",
            "out",
            "measure-bias",
            "--algorithms",
            "pg_is,identity",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let out_dir = dir.path().join("out");
    let bias = std::fs::read_to_string(out_dir.join("bias_report.csv")).unwrap();
    assert_eq!(bias.lines().next().unwrap(), "seed,env,algorithm,buffer_size,j_true,j_hat,reuse_error");
    assert_eq!(bias.lines().count(), 1 + 2 * 2 * 6);
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["command"]["command"], "measure-bias");
    assert_eq!(meta["command"]["algorithms"], serde_json::json!(["pg_is", "identity"]));
    assert_eq!(meta["config"]["n_seeds"], 6);
    assert!(meta["config"].get("output_dir").is_none());
    assert!(meta["versions"]["reuse-bias"].is_string());
}

#[test]
fn run_meta_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(&["--set", "n_seeds=4", "--set", "optim.steps=5", "--output-dir", "a", "measure-bias"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/run_meta.json")).unwrap()).unwrap();
    std::fs::write(dir.path().join("replay.json"), meta["config"].to_string()).unwrap();
    let out = lab(&["--config", "replay.json", "--output-dir", "b", "measure-bias"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for f in ["bias_report.csv", "summary.csv", "run_meta.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn failed_verification_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    // An unreachable ratio makes the comparison fail without changing the computation.
    let out = lab(
        &[
            "--set",
            r#"env={"name":"chain"}"#,
            "--set",
            "optim.steps=5",
            "--output-dir",
            "out",
            "verify",
            "biris",
            "--seeds",
            "5",
            "--m",
            "4",
            "--max-ratio=-1",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    let checks: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/theorem_checks.json")).unwrap()).unwrap();
    assert_eq!(checks["biris"]["pass"], false);
}

#[test]
fn appendix_c_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(&["--output-dir", "out", "verify", "appendix-c", "--m", "1,10,100", "--seeds", "20"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let bias = std::fs::read_to_string(dir.path().join("out/bias_report.csv")).unwrap();
    assert!(bias.lines().skip(1).all(|l| l.ends_with(",-1.0000000000000000e0")));
}

#[test]
fn bounds_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out =
        lab(&["--output-dir", "out", "bounds", "--eps1", "0", "--eps2", "0", "--m", "2", "--delta", "0.5"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    // sqrt(ln(4 / 0.5) / 1)
    let expected = 8f64.ln().sqrt();
    assert!((v["reuse_error_bound"]["value"].as_f64().unwrap() - expected).abs() < 1e-12);
    assert!(dir.path().join("out/bounds.json").exists());

    let out = lab(&["bounds", "--eps1", "0.1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--eps2"), "{}", stderr(&out));
    let out = lab(&["bounds", "--eps", "0.1", "--horizon", "3", "--output-dir", "p"], dir.path());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["product_ratio_bound"]["value"].as_f64().unwrap() - (1.1f64.powi(3) - 1.0)).abs() < 1e-12);
    let out = lab(&["bounds", "--eps1", "0.1", "--eps2", "0.1", "--m", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn no_subcommand_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lab(&[], dir.path()).status.code(), Some(2));
}
