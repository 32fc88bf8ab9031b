//! Time grids: baseline heuristics and the learnable monotone parameterization.
//!
//! A learnable grid is a vector `xi` of `N + 1` logits. Its softmax masses
//! are accumulated from the tail and rescaled onto `[t_min, T]`, which makes
//! the grid strictly decreasing for every finite `xi`. The mass at index `N`
//! cancels in the rescaling, so `xi[N]` never influences the grid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diff::Real;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::solvers::{solve, SolverSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Heuristic {
    Uniform,
    Quadratic,
    Edm,
    LogSnr,
}

impl Heuristic {
    pub const ALL: [Heuristic; 4] = [Heuristic::Uniform, Heuristic::Quadratic, Heuristic::Edm, Heuristic::LogSnr];

    pub fn name(self) -> &'static str {
        match self {
            Heuristic::Uniform => "uniform",
            Heuristic::Quadratic => "quadratic",
            Heuristic::Edm => "edm",
            Heuristic::LogSnr => "logsnr",
        }
    }
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Heuristic {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" | "time_uniform" => Ok(Heuristic::Uniform),
            "quadratic" | "time_quadratic" => Ok(Heuristic::Quadratic),
            "edm" | "time_edm" => Ok(Heuristic::Edm),
            "logsnr" | "time_logsnr" => Ok(Heuristic::LogSnr),
            other => Err(Error::config("grid", format!("unknown discretization `{other}`"))),
        }
    }
}

const EDM_RHO: f64 = 7.0;

/// Heuristic grid `T = t_0 > ... > t_N = t_min`.
pub fn heuristic_times(kind: Heuristic, n: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::config("nfe", "a grid needs at least one step"));
    }
    let (t_min, t_max) = (sched.t_min, sched.t_max);
    let frac = |i: usize| i as f64 / n as f64;
    let mut times: Vec<f64> = match kind {
        Heuristic::Uniform | Heuristic::Quadratic => {
            let rho = if kind == Heuristic::Uniform { 1.0 } else { 2.0 };
            (0..=n)
                .rev()
                .map(|i| frac(i).powf(rho) * (t_max - t_min) + t_min)
                .collect()
        }
        Heuristic::Edm => {
            let hi = sched.noise_level(t_max)?.powf(1.0 / EDM_RHO);
            let lo = sched.noise_level(t_min)?.powf(1.0 / EDM_RHO);
            (0..=n)
                .map(|i| sched.t_of_noise_level((hi + frac(i) * (lo - hi)).powf(EDM_RHO)))
                .collect::<Result<_>>()?
        }
        Heuristic::LogSnr => {
            let hi = sched.lambda(t_max)?;
            let lo = sched.lambda(t_min)?;
            (0..=n)
                .map(|i| sched.t_of_lambda(hi + frac(i) * (lo - hi)))
                .collect::<Result<_>>()?
        }
    };
    times[0] = t_max;
    times[n] = t_min;
    if times.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::config(
            "grid",
            format!("{kind} grid with N={n} is not strictly decreasing for this schedule"),
        ));
    }
    Ok(times)
}

/// Learnable grid of `N` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    pub xi: Vec<f64>,
    pub xi_c: Vec<f64>,
    pub t_min: f64,
    pub t_max: f64,
}

impl Discretization {
    pub fn new(xi: Vec<f64>, xi_c: Vec<f64>, sched: &NoiseSchedule) -> Result<Self> {
        if xi.len() < 2 || xi.len() != xi_c.len() {
            return Err(Error::Shape(format!(
                "xi and xi_c need equal length >= 2, got {} and {}",
                xi.len(),
                xi_c.len()
            )));
        }
        if xi.iter().chain(&xi_c).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite grid parameters".into()));
        }
        Ok(Discretization {
            xi,
            xi_c,
            t_min: sched.t_min,
            t_max: sched.t_max,
        })
    }

    /// Grid reproducing `times` exactly, with zero decoupling offsets.
    pub fn from_times(times: &[f64], sched: &NoiseSchedule) -> Result<Self> {
        let xi = init_from_times(times, sched)?;
        let n = xi.len();
        Self::new(xi, vec![0.0; n], sched)
    }

    pub fn steps(&self) -> usize {
        self.xi.len() - 1
    }

    pub fn tau(&self) -> Vec<f64> {
        tau_of(&self.xi, self.t_min, self.t_max)
    }

    pub fn tau_c(&self) -> Vec<f64> {
        tau_c_of(&self.tau(), &self.xi_c, self.t_min, self.t_max)
    }
}

/// Cumulative-softmax grid for logits `xi`; endpoints are pinned exactly.
///
/// In f64 the grid stays strictly decreasing while the logit spread is below
/// about 30; beyond that the smallest gaps round away.
pub fn tau_of<S: Real>(xi: &[S], t_min: f64, t_max: f64) -> Vec<S> {
    let n = xi.len() - 1;
    let m = xi.iter().map(|v| v.value()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<S> = xi.iter().map(|&v| (v - S::from(m)).exp()).collect();
    // tails[i] = sum_{k=i}^{N-1} e_k, i.e. tau'(i) - tau'(N) up to the softmax normalizer.
    let mut tails = vec![S::from(0.0); n + 1];
    for i in (0..n).rev() {
        tails[i] = e[i] + tails[i + 1];
    }
    let span = S::from(t_max - t_min);
    let mut times: Vec<S> = (0..=n)
        .map(|i| tails[i] / tails[0] * span + S::from(t_min))
        .collect();
    times[0] = S::from(t_max);
    times[n] = S::from(t_min);
    times
}

/// Decoupled denoiser times `clamp(t_i + xi_c[i], t_min, T)`.
pub fn tau_c_of<S: Real>(times: &[S], xi_c: &[S], t_min: f64, t_max: f64) -> Vec<S> {
    times
        .iter()
        .zip(xi_c)
        .map(|(&t, &c)| (t + c).clamp_to(t_min, t_max))
        .collect()
}

/// Logits whose grid reproduces `times`.
pub fn init_from_times(times: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    let n = times.len().saturating_sub(1);
    if n == 0 {
        return Err(Error::Grid("need at least two times".into()));
    }
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs();
    if !close(times[0], sched.t_max) || !close(times[n], sched.t_min) {
        return Err(Error::Grid("grid endpoints must be T and t_min".into()));
    }
    if times.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Grid("times must be strictly decreasing".into()));
    }
    let span = sched.t_max - sched.t_min;
    let u: Vec<f64> = times.iter().map(|t| (t - sched.t_min) / span).collect();
    let mut xi: Vec<f64> = (0..n).map(|i| (u[i] - u[i + 1]).ln()).collect();
    let mean_mass = (0..n).map(|i| u[i] - u[i + 1]).sum::<f64>() / n as f64;
    xi.push(mean_mass.ln());
    Ok(xi)
}

/// Heuristic chosen by [`select_init`].
#[derive(Debug, Clone, PartialEq)]
pub struct InitChoice {
    pub kind: Heuristic,
    pub xi: Vec<f64>,
    /// Validation loss of each candidate, in candidate order.
    pub losses: Vec<f64>,
}

/// Picks the candidate heuristic with the lowest mean teacher distance on
/// `val` (pairs of `x_T` and teacher output). Ties go to the earliest.
pub fn select_init<D: Denoiser>(
    candidates: &[Heuristic],
    val: &[(Vec<f64>, Vec<f64>)],
    den: &D,
    spec: SolverSpec,
) -> Result<InitChoice> {
    if candidates.is_empty() {
        return Err(Error::config("train.init", "no candidate discretizations"));
    }
    if val.is_empty() {
        return Err(Error::config("train", "empty validation set"));
    }
    let sched = den.schedule();
    let mut losses = Vec::with_capacity(candidates.len());
    let mut best = 0;
    for (k, &kind) in candidates.iter().enumerate() {
        let times = heuristic_times(kind, spec.nfe, sched)?;
        let mut total = 0.0;
        for (x, y) in val {
            let out = solve(den, spec, &times, &times, x)?;
            total += crate::ld3::distance(&out, y);
        }
        let loss = total / val.len() as f64;
        if loss < losses.get(best).copied().unwrap_or(f64::INFINITY) {
            best = k;
        }
        losses.push(loss);
    }
    let kind = candidates[best];
    Ok(InitChoice {
        kind,
        xi: init_from_times(&heuristic_times(kind, spec.nfe, sched)?, sched)?,
        losses,
    })
}
