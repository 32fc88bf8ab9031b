use std::fs;

use ld3::commands::{self, CONFIG_SNAPSHOT};
use ld3::config::RunConfig;
use ld3::persist::{self, GridCheckpoint, METRICS_HEADER};

fn small() -> RunConfig {
    RunConfig::from_text("train.count = 12\ntrain.epochs_phase1 = 1\ntrain.epochs_phase2 = 2\nteacher.nfe = 40\nseed = 3\n")
        .unwrap()
}

#[test]
fn dataset_file_size_matches_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/data.bin");
    let ds = commands::gen_data(&small(), &path).unwrap();
    let len = fs::metadata(&path).unwrap().len() as usize;
    assert_eq!(len, 32 + 12 * 3 * 2 * 8);
    assert_eq!(persist::load_dataset(&path).unwrap(), ds);
}

#[test]
fn train_writes_checkpoint_metrics_and_snapshot() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.bin");
    commands::gen_data(&cfg, &data).unwrap();
    let out = dir.path().join("run");
    let res = commands::train(&cfg, &data, &out).unwrap();

    let metrics = fs::read_to_string(&res.metrics).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.count(), res.report.iters.len() + res.report.epochs.len());
    assert_eq!(res.report.epochs.len(), 1 + 1 + 2);

    let ck = GridCheckpoint::from_json(&fs::read_to_string(&res.checkpoint).unwrap()).unwrap();
    let den = cfg.denoiser().unwrap();
    let disc = ck.discretization(ld3::denoiser::Denoiser::schedule(&den)).unwrap();
    assert_eq!(disc, res.report.best);

    // The snapshot alone reproduces the run.
    let snap = RunConfig::from_text(&fs::read_to_string(out.join(CONFIG_SNAPSHOT)).unwrap()).unwrap();
    assert_eq!(snap, cfg);
    let again = commands::train(&snap, &data, &dir.path().join("again")).unwrap();
    assert_eq!(fs::read(&again.checkpoint).unwrap(), fs::read(&res.checkpoint).unwrap());
    assert_eq!(fs::read(&again.metrics).unwrap(), fs::read(&res.metrics).unwrap());
}

#[test]
fn sample_uses_checkpoint_and_rejects_mismatched_solver() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.bin");
    commands::gen_data(&cfg, &data).unwrap();
    let res = commands::train(&cfg, &data, dir.path()).unwrap();
    let xs = commands::sample(&cfg, &res.checkpoint, 7).unwrap();
    assert_eq!(xs.len(), 7);
    assert!(xs.iter().all(|x| x.len() == 2 && x.iter().all(|v| v.is_finite())));

    let mut other = cfg.clone();
    other.set("solver.family", "euler").unwrap();
    assert!(commands::sample(&other, &res.checkpoint, 1).is_err());
}

#[test]
fn dataset_from_other_schedule_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.bin");
    commands::gen_data(&small(), &data).unwrap();
    let mut vp = small();
    vp.set("schedule.family", "vp_linear").unwrap();
    assert!(commands::train(&vp, &data, dir.path()).is_err());
    let mut wide = small();
    wide.set("data.d", "3").unwrap();
    assert!(commands::sweep_r(&wide, &data).is_err());
}

#[test]
fn sweep_and_cross_eval_tables() {
    let mut cfg = small();
    cfg.set("eval.r_values", "0,1").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.bin");
    commands::gen_data(&cfg, &data).unwrap();

    let sweep = commands::sweep_r(&cfg, &data).unwrap();
    let rows: Vec<&str> = sweep.lines().collect();
    assert_eq!(rows[0], "r,best_val_loss");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0,"));

    let table = commands::cross_eval(&cfg, &data).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "trained,dpmpp,euler");
    assert_eq!(rows.len(), 3);
}

#[test]
fn bound_without_checkpoint() {
    let mut cfg = small();
    cfg.set("eval.bound_samples", "5").unwrap();
    let rep = commands::bound(&cfg, None).unwrap();
    assert_eq!(rep.samples, 5);
    assert_eq!(rep.term1, cfg.eval_bound_r.powi(2) / 2.0);
    assert!(rep.term3_estimate.is_finite());
}
