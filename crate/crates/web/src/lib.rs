//! Browser bindings for the LD3 demo page. Every function takes plain
//! numbers and strings and returns a JSON string, so the page needs no
//! generated TypeScript types.
//!
//! The problem is fixed to the default 2-D three-component mixture under the
//! VE schedule (T = 80, t_min = 0.002) with its closed-form denoiser. Seeds
//! are `u32` so they arrive from JavaScript as plain numbers.

use ld3::denoiser::{GaussianMixture, GmDenoiser};
use ld3::discretize::{heuristic_times, Discretization, Heuristic};
use ld3::ld3::{generate_dataset, train, TrainConfig};
use ld3::schedule::NoiseSchedule;
use ld3::solvers::{solve_trajectory, teacher_solve, SolverFamily, SolverSpec, TeacherSpec};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn den() -> GmDenoiser {
    GmDenoiser {
        gm: GaussianMixture::default_2d(),
        sched: NoiseSchedule::ve_edm(),
    }
}

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn spec(family: &str, nfe: usize) -> Result<SolverSpec, JsError> {
    let family: SolverFamily = family.parse().map_err(js)?;
    SolverSpec::with_default_order(family, nfe).map_err(js)
}

/// Mixture components as `[{weight, mean, var}]`, for drawing the target.
#[wasm_bindgen]
pub fn mixture() -> String {
    let gm = GaussianMixture::default_2d();
    let comps: Vec<_> = gm
        .components()
        .iter()
        .map(|c| json!({ "weight": c.weight, "mean": c.mean, "var": c.var }))
        .collect();
    serde_json::Value::from(comps).to_string()
}

/// Time grid of a heuristic (`uniform`, `quadratic`, `edm`, `logsnr`) as a
/// JSON array, from T down to t_min.
#[wasm_bindgen]
pub fn heuristic_grid(kind: &str, nfe: usize) -> Result<String, JsError> {
    let kind: Heuristic = kind.parse().map_err(js)?;
    let times = heuristic_times(kind, nfe, &NoiseSchedule::ve_edm()).map_err(js)?;
    Ok(serde_json::to_string(&times)?)
}

/// Solves `n` prior draws on the given grid and with the teacher.
///
/// `times_c` may be an empty string, meaning the denoiser is queried at the
/// step times. Returns `{paths, teacher, rmsd}` where each path lists the
/// iterates from x_T to the output.
#[wasm_bindgen]
pub fn trajectories(family: &str, times: &str, times_c: &str, n: usize, seed: u32) -> Result<String, JsError> {
    let den = den();
    let times: Vec<f64> = serde_json::from_str(times)?;
    let times_c: Vec<f64> = if times_c.trim().is_empty() {
        times.clone()
    } else {
        serde_json::from_str(times_c)?
    };
    let spec = spec(family, times.len().saturating_sub(1))?;
    let teacher = TeacherSpec::default();
    let mut paths = Vec::with_capacity(n);
    let mut ends = Vec::with_capacity(n);
    let mut sq = 0.0;
    for x_t in den.sched.sample_prior(seed.into(), n, 2) {
        let path = solve_trajectory(&den, spec, &times, &times_c, &x_t).map_err(js)?;
        let y = teacher_solve(&den, &teacher, &x_t).map_err(js)?;
        let last = path.last().expect("path holds x_T");
        sq += last.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        paths.push(path);
        ends.push(y);
    }
    let rmsd = (sq / (2 * n.max(1)) as f64).sqrt();
    Ok(json!({ "paths": paths, "teacher": ends, "rmsd": rmsd }).to_string())
}

/// Runs LD3 on `count` teacher pairs and returns the learned grid with the
/// validation loss after each epoch.
#[wasm_bindgen]
pub fn train_grid(family: &str, nfe: usize, count: usize, epochs: usize, seed: u32) -> Result<String, JsError> {
    let den = den();
    let spec = spec(family, nfe)?;
    let mut ds = generate_dataset(&den, &TeacherSpec::default(), count, seed.into()).map_err(js)?;
    let cfg = TrainConfig {
        epochs_phase1: epochs.min(2),
        epochs_phase2: epochs.saturating_sub(2),
        seed: seed.into(),
        ..Default::default()
    };
    let rep = train(&cfg, &mut ds, &den, spec).map_err(js)?;
    let best: &Discretization = &rep.best;
    let losses: Vec<f64> = rep.epochs.iter().map(|e| e.val_loss).collect();
    Ok(json!({
        "init": rep.init.kind.name(),
        "times": best.tau(),
        "times_c": best.tau_c(),
        "val_loss": losses,
        "best_val_loss": rep.best_val_loss,
    })
    .to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_then_trace() {
        let out: serde_json::Value = serde_json::from_str(&train_grid("dpmpp", 4, 20, 3, 1).unwrap()).unwrap();
        let times = out["times"].to_string();
        let times_c = out["times_c"].to_string();
        assert_eq!(out["val_loss"].as_array().unwrap().len(), 4);
        let tr: serde_json::Value = serde_json::from_str(&trajectories("dpmpp", &times, &times_c, 3, 0).unwrap()).unwrap();
        assert_eq!(tr["paths"].as_array().unwrap().len(), 3);
        assert_eq!(tr["paths"][0].as_array().unwrap().len(), 5);
        assert!(tr["rmsd"].as_f64().unwrap().is_finite());
    }

    #[test]
    fn heuristic_grid_json() {
        let g: Vec<f64> = serde_json::from_str(&heuristic_grid("edm", 5).unwrap()).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], 80.0);
        assert_eq!(mixture().matches("weight").count(), 3);
    }
}
