//! Command implementations behind the `ld3` binary. Each command is a pure
//! function of the configuration, input files and seed.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::denoiser::{AnyDenoiser, Denoiser};
use crate::discretize::Heuristic;
use crate::error::{Error, Result};
use crate::eval::{self, BoundReport, DiffMap, GridMap};
use crate::ld3::{self, Dataset, TrainReport};
use crate::persist::{self, GridCheckpoint};
use crate::rng;
use crate::solvers::SolverSpec;

pub const CONFIG_SNAPSHOT: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";

fn snapshot(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_SNAPSHOT), cfg.to_text())?;
    Ok(())
}

fn check_dataset(ds: &Dataset, den: &AnyDenoiser) -> Result<()> {
    if ds.d != den.dim() {
        return Err(Error::config("data.d", format!("dataset has d={} but config has d={}", ds.d, den.dim())));
    }
    if ds.schedule_hash != den.schedule().fingerprint() {
        return Err(Error::config("schedule", "dataset was generated under a different schedule"));
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let den = cfg.denoiser()?;
    let ds = ld3::generate_dataset(&den, &cfg.teacher, cfg.count, cfg.seed)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    persist::save_dataset(out, &ds)?;
    Ok(ds)
}

pub struct TrainOutput {
    pub report: TrainReport,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Trains on `data` and writes the checkpoint, metrics and config snapshot.
pub fn train(cfg: &RunConfig, data: &Path, out_dir: &Path) -> Result<TrainOutput> {
    let den = cfg.denoiser()?;
    let mut ds = persist::load_dataset(data)?;
    check_dataset(&ds, &den)?;
    let report = ld3::train(&cfg.train_config(), &mut ds, &den, cfg.solver)?;
    snapshot(cfg, out_dir)?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    fs::write(&checkpoint, GridCheckpoint::new(&report.best, cfg.solver).to_json()?)?;
    let metrics = out_dir.join(METRICS_FILE);
    fs::write(&metrics, persist::metrics_csv(&report))?;
    Ok(TrainOutput {
        report,
        checkpoint,
        metrics,
    })
}

/// Solves `n` fresh prior draws on a checkpointed grid.
pub fn sample(cfg: &RunConfig, checkpoint: &Path, n: usize) -> Result<Vec<Vec<f64>>> {
    let den = cfg.denoiser()?;
    let ck = GridCheckpoint::from_json(&fs::read_to_string(checkpoint)?)?;
    let spec = ck.solver_spec()?;
    if spec.family != cfg.solver.family || spec.order != cfg.solver.order {
        return Err(Error::config(
            "solver.family",
            format!(
                "checkpoint was trained for {}{} but the config selects {}{}",
                spec.family, spec.order, cfg.solver.family, cfg.solver.order
            ),
        ));
    }
    let disc = ck.discretization(den.schedule())?;
    let map = GridMap::learned(&den, spec, &disc)?;
    let xs = den
        .schedule()
        .sample_prior(rng::mix(cfg.seed, rng::domain::SAMPLE), n, den.dim());
    xs.iter().map(|x| map.apply(x)).collect()
}

pub fn bench(cfg: &RunConfig) -> Result<String> {
    let den = cfg.denoiser()?;
    let gm = cfg.mixture().ok();
    let rows = eval::bench(&cfg.bench_spec(), &den, gm.as_ref())?;
    Ok(eval::bench_csv(&rows))
}

pub fn sweep_r(cfg: &RunConfig, data: &Path) -> Result<String> {
    let den = cfg.denoiser()?;
    let ds = persist::load_dataset(data)?;
    check_dataset(&ds, &den)?;
    let rows = eval::sweep_r(&cfg.train_config(), &ds, &den, cfg.solver, &cfg.eval_r_values)?;
    let mut s = String::from("r,best_val_loss\n");
    for r in rows {
        s.push_str(&format!("{},{}\n", r.r, r.best_val_loss));
    }
    Ok(s)
}

/// Bound terms for a checkpointed student, or the student on the logSNR
/// heuristic when no checkpoint is given.
pub fn bound(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<BoundReport> {
    let den = cfg.denoiser()?;
    let teacher = GridMap::teacher(&den, &cfg.teacher)?;
    let student = match checkpoint {
        Some(p) => {
            let ck = GridCheckpoint::from_json(&fs::read_to_string(p)?)?;
            GridMap::learned(&den, ck.solver_spec()?, &ck.discretization(den.schedule())?)?
        }
        None => GridMap::heuristic(&den, cfg.solver, Heuristic::LogSnr)?,
    };
    eval::estimate_bound(
        &teacher,
        &student,
        den.schedule(),
        cfg.eval_bound_r,
        cfg.eval_bound_samples,
        cfg.seed,
    )
}

/// Trains one grid per family in `eval.cross_families` and evaluates every
/// grid under every family on the validation split.
pub fn cross_eval(cfg: &RunConfig, data: &Path) -> Result<String> {
    let den = cfg.denoiser()?;
    let ds = persist::load_dataset(data)?;
    check_dataset(&ds, &den)?;
    let mut grids = Vec::new();
    for &family in &cfg.eval_cross_families {
        let spec = SolverSpec::with_default_order(family, cfg.solver.nfe)?;
        let mut run = ds.clone();
        let rep = ld3::train(&cfg.train_config(), &mut run, &den, spec)?;
        grids.push((spec, rep.best));
    }
    let (_, val) = ds.split();
    let m = eval::cross_eval(&grids, &ds.teacher_pairs(&val), &den)?;
    let mut s = String::from("trained");
    for (spec, _) in &grids {
        s.push_str(&format!(",{}", spec.family));
    }
    s.push('\n');
    for ((spec, _), row) in grids.iter().zip(&m) {
        s.push_str(&spec.family.to_string());
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    Ok(s)
}
