mod common;

use std::path::Path;
use std::process::{Command, Output};

use budgeted_attention::evaluation::read_points;
use common::TINY_CONFIG;

fn budattn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_budattn"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn budattn")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_fails_with_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = budattn(&["train", "dense", "--config", "nowhere.cfg"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nowhere.cfg"), "{}", stderr(&o));
}

#[test]
fn config_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "task = marked\n# comment\n\nmodel.hidden = wide\n").unwrap();
    let o = budattn(&["train", "dense", "--config", "bad.cfg"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains('4'), "{}", stderr(&o));
}

#[test]
fn train_sweep_and_prune_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    std::fs::write(cwd.join("tiny.cfg"), TINY_CONFIG).unwrap();

    let o = budattn(&["train", "dense", "--config", "tiny.cfg", "--out", "d.ckpt"], cwd);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(cwd.join("d.ckpt").exists());
    let log = std::fs::read_to_string(cwd.join("d.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let o = budattn(
        &["train", "budgeted", "--config", "tiny.cfg", "--warm-start", "d.ckpt", "--out", "b.ckpt"],
        cwd,
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let o = budattn(&["sweep", "--ckpt", "b.ckpt", "--config", "tiny.cfg", "--out", "sw"], cwd);
    assert!(o.status.success(), "{}", stderr(&o));
    let points = read_points(&cwd.join("sw.csv")).unwrap();
    assert_eq!(points.iter().filter(|p| p.kind == "soft").count(), 19);
    assert_eq!(points.iter().filter(|p| p.kind == "hard").count(), 19);
    assert!(cwd.join("sw.json").exists());

    let o = budattn(
        &["prune", "--dense", "d.ckpt", "--config", "tiny.cfg", "--budget", "0.5", "--floor", "--out", "m.csv"],
        cwd,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("8 of 16 heads active"));
    assert!(cwd.join("m.importance.json").exists());

    // A checkpoint is only used with the architecture it was trained for.
    std::fs::write(cwd.join("wide.cfg"), TINY_CONFIG.replace("model.hidden = 8", "model.hidden = 16")).unwrap();
    let o = budattn(&["sweep", "--ckpt", "b.ckpt", "--config", "wide.cfg"], cwd);
    assert!(!o.status.success());

    let o = budattn(&["train", "hard-adapt", "--config", "tiny.cfg", "--out", "a.ckpt"], cwd);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("warm-start"), "{}", stderr(&o));
}
