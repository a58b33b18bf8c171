use std::path::{Path, PathBuf};
use std::process::Command;

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/tiny.toml")
}

fn run(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_hyperflow")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "hyperflow {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn stage_by_stage_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = tiny();
    let (bb, traj, drift, eps) = (dir.join("bb.ckpt"), dir.join("traj"), dir.join("cubic.ckpt"), dir.join("eps.jsonl"));

    run(&["model", "meta-train", "-c", p(&cfg), "-o", p(&bb)]);
    assert!(run(&["model", "info", p(&bb)]).contains("checksum"));
    run(&["traj", "collect", "-c", p(&cfg), "--backbone", p(&bb), "-o", p(&traj)]);
    let check: serde_json::Value = serde_json::from_str(&run(&["flows", "check", p(&traj.join("train.gftr"))])).unwrap();
    assert!(check["max_knot_error"].as_f64().unwrap() < 1e-10);
    run(&["drift", "train", "-c", p(&cfg), "--backbone", p(&bb), "--traj", p(&traj), "-o", p(&drift)]);
    run(&["episodes", "gen", "-c", p(&cfg), "--per-domain", "3", "-o", p(&eps)]);

    let euler = run(&["adapt", "euler", "--backbone", p(&bb), "--episodes", p(&eps), "--drift", p(&drift), "--steps", "5"]);
    let records: Vec<serde_json::Value> = euler.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 3);
    for r in &records {
        assert_eq!(r["result"]["backward_passes"], 0);
        assert_eq!(r["result"]["trace"].as_array().unwrap().len(), 6);
    }
    let ft = run(&["adapt", "finetune", "--backbone", p(&bb), "--episodes", p(&eps), "--steps", "4", "--lr-grid", "0.01,0.1", "--limit", "1"]);
    let r: serde_json::Value = serde_json::from_str(ft.lines().next().unwrap()).unwrap();
    assert_eq!(r["result"]["backward_passes"], 8);
}

#[test]
fn pipeline_then_eval_reads_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let cfg = tiny();
    run(&["pipeline", "-c", p(&cfg), "-o", p(&run_dir)]);
    assert!(run_dir.join("reports/eval.csv").exists());
    let again = run(&["pipeline", "-c", p(&cfg), "-o", p(&run_dir)]);
    assert!(!again.contains("built"), "{again}");
    let out = run(&["eval", "--run", p(&run_dir), "-c", p(&cfg), "--variants", "direct", "--variants", "hyperflow-C", "--json"]);
    let rep: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(!rep["rows"].as_array().unwrap().is_empty());
}

#[test]
fn default_config_prints_and_bad_input_fails() {
    let text = run(&["pipeline", "--print-default-config"]);
    assert!(text.contains("[seeds]"));
    let status = Command::new(env!("CARGO_BIN_EXE_hyperflow"))
        .args(["episodes", "inspect", "/definitely/not/here.jsonl"])
        .status()
        .unwrap();
    assert!(!status.success());
}
