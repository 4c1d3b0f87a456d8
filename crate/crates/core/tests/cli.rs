use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use deepwkb::pipeline::{RunConfig, RunManifest, Stage};

fn deepwkb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepwkb")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A quick ou1d configuration: short trajectories, few epochs, no expansion.
fn quick_config(dir: &Path) -> std::path::PathBuf {
    write_config(dir, |_| {})
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut RunConfig)) -> std::path::PathBuf {
    let mut cfg = RunConfig::for_benchmark("ou1d").unwrap();
    cfg.simulation.total_time = 5000.0;
    cfg.train_v.epochs = 40;
    cfg.train_v.warmup_epochs = 20;
    cfg.expand.enabled = false;
    cfg.train_z.schedule.epochs = 10;
    edit(&mut cfg);
    let path = dir.join("quick.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn init_config_writes_a_loadable_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vdp.toml");
    let out = deepwkb(&["init-config", "--config", path.to_str().unwrap(), "--benchmark", "vdp"]);
    assert!(out.status.success());
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg, RunConfig::for_benchmark("vdp").unwrap());
}

#[test]
fn unknown_target_and_missing_dependency_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let bad = deepwkb(&["bogus", "--config", cfg.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
    let out = dir.path().join("run");
    fs::create_dir_all(&out).unwrap();
    let early = deepwkb(&["train-v", "--config", cfg.to_str().unwrap()]);
    assert_eq!(early.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&early.stderr).contains("validate"));
}

#[test]
fn full_run_then_rerun_is_up_to_date() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let cfg_s = cfg.to_str().unwrap();
    let first = deepwkb(&["all", "--config", cfg_s]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(stdout(&first).contains("WKB form holds"));

    let run = dir.path().join("run");
    let m = RunManifest::load(&run).unwrap();
    let stages: Vec<Stage> = m.stages.iter().map(|r| r.stage).collect();
    assert_eq!(stages, Stage::ALL.to_vec());
    assert!(m.alpha.is_some_and(|a| a > 0.0));
    for r in &m.stages {
        for a in &r.outputs {
            assert!(run.join(&a.path).exists(), "{}", a.path);
        }
    }
    let before = fs::read(run.join("manifest.json")).unwrap();

    let again = deepwkb(&["train-z", "--config", cfg_s]);
    assert!(again.status.success());
    assert!(stdout(&again).contains("train-z: up to date"));
    assert_eq!(fs::read(run.join("manifest.json")).unwrap(), before);

    // a damaged artifact forces the stage to run again
    fs::write(run.join("z_net.ckpt"), b"broken").unwrap();
    let rerun = deepwkb(&["train-z", "--config", cfg_s]);
    assert!(stdout(&rerun).contains("train-z: done"));
    let after = RunManifest::load(&run).unwrap();
    assert_eq!(after.stages.last().map(|r| r.stage), Some(Stage::TrainZ));
    assert_eq!(after.stages, m.stages[..after.stages.len()]);
    // downstream stages were dropped; finishing the run restores the same manifest
    assert!(deepwkb(&["all", "--config", cfg_s]).status.success());
    assert_eq!(fs::read(run.join("manifest.json")).unwrap(), before);
}

#[test]
fn rejected_wkb_form_stops_after_validation() {
    let dir = tempfile::tempdir().unwrap();
    // any p-value below 0.999 rejects
    let cfg = write_config(dir.path(), |c| c.validation.significance = 0.999);
    let out = deepwkb(&["all", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("WKB form does not hold"));
    let m = RunManifest::load(&dir.path().join("run")).unwrap();
    assert_eq!(m.wkb_holds(), Some(false));
    assert_eq!(m.stages.last().map(|r| r.stage), Some(Stage::Validate));
}
