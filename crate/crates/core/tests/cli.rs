use std::path::Path;
use std::process::{Command, Output};

use scalpel::pipeline::RunConfig;

fn scalpel(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_scalpel"));
    cmd.args(args).env_remove("SCALPEL_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn scalpel")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn smoke_run(dir: &Path) {
    let cfg = dir.join("cfg.json");
    scalpel::json::write_artifact(&RunConfig::smoke(), &cfg).unwrap();
    let o = scalpel(
        &["pipeline", "--config", cfg.to_str().unwrap(), "--out-dir", dir.to_str().unwrap()],
        &[("SCALPEL_THREADS", "1")],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&scalpel(&["frobnicate"], &[])), 1);
    assert_eq!(code(&scalpel(&["project", "--layer", "0"], &[])), 1);
    assert_eq!(code(&scalpel(&["--help"], &[])), 0);
}

#[test]
fn bad_thread_count_exits_one() {
    let o = scalpel(&["pipeline", "--config", "missing.json"], &[("SCALPEL_THREADS", "zero")]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("SCALPEL_THREADS"));
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"alpha_base": -1.0}"#).unwrap();
    let o = scalpel(&["pipeline", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));

    let o = scalpel(&["pipeline", "--config", dir.path().join("nope.json").to_str().unwrap()], &[]);
    assert_eq!(code(&o), 1);
}

#[test]
fn corrupt_input_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.sclp"), b"not a tensor").unwrap();
    let o = scalpel(
        &[
            "project", "--tensor", "t.sclp", "--layer", "0", "--head", "0", "--out", "p.csv", "--out-dir",
            dir.path().to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unwritable_output_exits_two() {
    use scalpel::store::{write_tensor, ActivationTensor, Dims, ManifoldLabel};
    let dir = tempfile::tempdir().unwrap();
    let data = (0..6 * 3).map(|i| (i % 5) as f32).collect();
    let t = ActivationTensor::new(Dims::new(6, 1, 1, 3), data, Some(ManifoldLabel::Trusted)).unwrap();
    write_tensor(&t, &dir.path().join("t.sclp")).unwrap();
    std::fs::write(dir.path().join("blocker"), b"").unwrap();
    let o = scalpel(
        &[
            "project", "--tensor", "t.sclp", "--layer", "0", "--head", "0", "--k", "2", "--out", "blocker/p.csv",
            "--out-dir", dir.path().to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pipeline_then_project_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    smoke_run(dir.path());
    for f in ["model.bin", "plan.json", "report.json", "decisions.jsonl", "activations/manifest.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }

    let o = scalpel(
        &[
            "project",
            "--tensor",
            "activations/trusted.sclp",
            "--tensor",
            "activations/halluc_image.sclp",
            "--layer",
            "1",
            "--head",
            "0",
            "--out",
            "proj/l1h0.csv",
            "--out-dir",
            d,
        ],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("proj/l1h0.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("pc1,pc2,manifold_label,component_id"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| r.split(',').count() == 4 && !r.ends_with(',')));

    let o = scalpel(
        &[
            "evaluate",
            "--episodes",
            "episodes/test_image.jsonl",
            "--episodes",
            "episodes/test_trusted.jsonl",
            "--out",
            "eval.json",
            "--out-dir",
            d,
        ],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: scalpel::evaluate::ComparisonReport =
        scalpel::json::read_artifact(&dir.path().join("eval.json")).unwrap();
    assert_eq!(report.splits.len(), 2);
    assert_eq!(report.splits[0].name, "test_image");

    // the stored report's scalpel numbers are reproduced from the saved artifacts
    let stored: scalpel::evaluate::EvaluationReport =
        scalpel::json::read_artifact(&dir.path().join("report.json")).unwrap();
    let s = stored.variant("scalpel").unwrap();
    assert_eq!(report.splits[0].scalpel.accuracy, s.image.accuracy);
    assert_eq!(report.splits[1].scalpel.accuracy, s.trusted.accuracy);

    let o = scalpel(&["evaluate", "--episodes", "missing.jsonl", "--out-dir", d], &[]);
    assert_eq!(code(&o), 1);
}
