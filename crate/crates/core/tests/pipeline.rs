mod common;

use budgeted_attention::config::RunConfig;
use budgeted_attention::pipeline::{write_json, Manifest, Reproduction, Stage, ADAPTED, PRUNED, SCRATCH, STATIC, WARM};
use common::TINY_CONFIG;

fn tiny() -> RunConfig {
    RunConfig::parse(TINY_CONFIG, "tiny.cfg").unwrap()
}

#[test]
fn full_run_resumes_without_recomputing() {
    let dir = tempfile::tempdir().unwrap();
    let run = Reproduction::open(tiny(), dir.path(), 2).unwrap().quiet(true);
    let summary = run.run_all().unwrap();
    assert_eq!(run.manifest().unwrap().completed, Stage::ALL.to_vec());

    assert_eq!(summary.dense.len(), 4);
    let methods: std::collections::BTreeSet<&str> = summary.methods.iter().map(|p| p.method.as_str()).collect();
    for m in [SCRATCH, WARM, STATIC, PRUNED, ADAPTED] {
        assert!(methods.contains(m), "{m} missing from {methods:?}");
    }
    assert_eq!(summary.adaptation.len(), 2);
    assert!(summary.sweep.checks.iter().all(|c| c.passed && c.points == 38), "{:?}", summary.sweep.checks);
    assert!(!summary.sweep.ranks.is_empty());
    assert!(summary.latency.iter().any(|r| r.method == "dense"));
    for f in ["report/summary.json", "report/report.md", "report/table_core.csv", "config.cfg"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    // A second pass finds every stage done and reports the same numbers.
    let stamp = std::fs::metadata(run.budgeted_path(1)).unwrap().modified().unwrap();
    let again = Reproduction::open(tiny(), dir.path(), 1).unwrap().quiet(true);
    assert_eq!(again.run_all().unwrap(), summary);
    assert_eq!(std::fs::metadata(again.budgeted_path(1)).unwrap().modified().unwrap(), stamp);
}

#[test]
fn interrupted_stage_reuses_finished_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let run = Reproduction::open(tiny(), dir.path(), 1).unwrap().quiet(true);
    run.run_stage(Stage::Dense).unwrap();
    let first = std::fs::read(dir.path().join("dense/results.json")).unwrap();
    // Forget the stage but keep its checkpoints, as after a crash mid-stage.
    let manifest = Manifest {
        completed: Vec::new(),
        ..run.manifest().unwrap()
    };
    write_json(&dir.path().join("manifest.json"), &manifest).unwrap();
    let run = Reproduction::open(tiny(), dir.path(), 1).unwrap().quiet(true);
    assert!(run.manifest().unwrap().completed.is_empty());
    run.run_stage(Stage::Dense).unwrap();
    let second = std::fs::read(dir.path().join("dense/results.json")).unwrap();
    let strip = |b: &[u8]| {
        let v: serde_json::Value = serde_json::from_slice(b).unwrap();
        v["results"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| (c["seed"].clone(), c["data_seed"].clone(), c["val_accuracy"].clone()))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&first), strip(&second));
}

#[test]
fn a_directory_belongs_to_one_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let run = Reproduction::open(tiny(), dir.path(), 1).unwrap().quiet(true);
    run.run_stage(Stage::Dense).unwrap();
    let mut other = tiny();
    other.train.optimizer.learning_rate = 0.02;
    assert!(Reproduction::open(other, dir.path(), 1).is_err());
}
