use std::collections::BTreeMap;
use std::path::Path;

use hyperflow::pipeline::{run_pipeline, Config, PipelineOutcome};
use serde_json::Value;

fn tiny() -> Config {
    Config::from_toml_str(include_str!("fixtures/tiny.toml")).unwrap()
}

const TIMED: [&str; 4] = ["adapt_ms", "inference_ms", "wall_ms", "seconds"];

fn strip_timing(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.retain(|k, _| !TIMED.contains(&k.as_str()));
            m.values_mut().for_each(strip_timing);
        }
        Value::Array(xs) => xs.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

/// JSON reports with wall-clock fields removed, keyed by file name.
fn json_reports(root: &Path) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(root.join("reports")).unwrap() {
        let path = e.unwrap().path();
        if path.extension().is_some_and(|x| x == "json") && !path.ends_with("stages.json") {
            let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
            strip_timing(&mut v);
            out.insert(path.file_name().unwrap().to_string_lossy().into(), v);
        }
    }
    out
}

fn hits(o: &PipelineOutcome) -> Vec<(String, bool)> {
    o.stages.iter().map(|s| (s.stage.clone(), s.cache_hit)).collect()
}

#[test]
fn rerun_hits_cache_and_seed_change_invalidates_downstream_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let first = run_pipeline(&cfg, tmp.path()).unwrap();
    assert!(first.stages.iter().all(|s| !s.cache_hit));
    let before = json_reports(tmp.path());
    for name in ["eval.json", "tune.json", "curves.json", "cost.json", "ablation.json", "frontier.json"] {
        assert!(before.contains_key(name), "{name} missing");
        assert_eq!(before[name]["fingerprint"], Value::String(cfg.fingerprint()));
    }
    let csv = std::fs::read_to_string(tmp.path().join("reports/eval.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), format!("# fingerprint={}", cfg.fingerprint()));
    assert_eq!(csv.lines().nth(1).unwrap(), "variant,benchmark,scope,mean_acc,ci95,episodes,diverged");

    let again = run_pipeline(&cfg, tmp.path()).unwrap();
    assert!(again.all_hits(), "{:?}", hits(&again));
    assert_eq!(json_reports(tmp.path()), before);

    let mut reseeded = cfg.clone();
    reseeded.seeds.drift += 1;
    let third = run_pipeline(&reseeded, tmp.path()).unwrap();
    for (stage, hit) in hits(&third) {
        let upstream = stage == "backbone" || stage == "trajectories";
        assert_eq!(hit, upstream, "{stage}");
    }

    let mut eval_seed = cfg.clone();
    eval_seed.seeds.eval += 1;
    let fourth = run_pipeline(&eval_seed, tmp.path()).unwrap();
    for (stage, hit) in hits(&fourth) {
        let upstream = matches!(stage.as_str(), "backbone" | "trajectories") || stage.starts_with("drift-");
        assert_eq!(hit, upstream, "{stage}");
    }
}

#[test]
fn fresh_roots_produce_identical_reports() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny();
    run_pipeline(&cfg, a.path()).unwrap();
    run_pipeline(&cfg, b.path()).unwrap();
    assert_eq!(json_reports(a.path()), json_reports(b.path()));
    for name in ["eval.csv", "curves.csv", "ablation.csv", "eval.txt", "config.toml"] {
        let read = |r: &Path| std::fs::read(r.join("reports").join(name)).unwrap();
        assert_eq!(read(a.path()), read(b.path()), "{name}");
    }
}

#[test]
fn stage_failure_names_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    // Only two base domains exist.
    cfg.ablation.domains = vec![1, 5];
    let err = run_pipeline(&cfg, tmp.path()).unwrap_err().to_string();
    assert!(err.contains("ablation"), "{err}");
}
