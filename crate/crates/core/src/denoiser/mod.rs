//! Noise-prediction functions `eps(x, t)`.
//!
//! For Gaussian-mixture and point-mass data the optimal predictor is known
//! in closed form: `eps*(x, t) = -sigma_t * grad_x log q_t(x)` where `q_t`
//! is the data convolved with the forward kernel. These serve both as the
//! denoiser under test and as oracles for the trained [`MlpDenoiser`].

mod mlp;

pub use mlp::{train_mlp_dsm, DsmWeight, MlpCheckpoint, MlpConfig, MlpDenoiser, MlpTraining};

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diff::Real;
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;

/// A noise-prediction network, evaluable on plain or taped scalars.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    fn schedule(&self) -> &NoiseSchedule;

    /// Unchecked evaluation; callers keep `t` inside the schedule domain.
    fn epsilon<S: Real>(&self, x: &[S], t: S) -> Vec<S>;

    /// Checked evaluation on plain values.
    fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("expected dimension {}, got {}", self.dim(), x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite x".into()));
        }
        self.schedule().alpha_sigma(t)?;
        Ok(self.epsilon(x, t))
    }
}

/// One isotropic Gaussian component.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<Component>,
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::Input("mixture needs at least one component".into()));
        };
        let d = first.mean.len();
        if d == 0 {
            return Err(Error::Input("mixture dimension must be positive".into()));
        }
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            if !(c.weight > 0.0) || !(c.var > 0.0) || c.mean.len() != d {
                return Err(Error::Input(format!("invalid mixture component {k}")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Input(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(GaussianMixture { components })
    }

    /// Builds a mixture from unnormalized weights.
    pub fn from_parts(weights: &[f64], means: &[Vec<f64>], vars: &[f64]) -> Result<Self> {
        if weights.len() != means.len() || weights.len() != vars.len() {
            return Err(Error::Shape("weights, means and vars must have equal length".into()));
        }
        let total: f64 = weights.iter().sum();
        Self::new(
            weights
                .iter()
                .zip(means)
                .zip(vars)
                .map(|((&w, m), &v)| Component {
                    weight: w / total,
                    mean: m.clone(),
                    var: v,
                })
                .collect(),
        )
    }

    /// The default 2-D, three-component problem.
    pub fn default_2d() -> Self {
        Self::from_parts(
            &[0.3, 0.3, 0.4],
            &[vec![-1.5, -1.0], vec![1.5, -1.0], vec![0.0, 1.6]],
            &[0.1, 0.1, 0.1],
        )
        .expect("valid default mixture")
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// Returns a copy with every mean shifted by `c`.
    pub fn translated(&self, c: &[f64]) -> Self {
        let mut out = self.clone();
        for comp in &mut out.components {
            for (m, s) in comp.mean.iter_mut().zip(c) {
                *m += s;
            }
        }
        out
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let last = self.components.len() - 1;
        let comp = self
            .components
            .iter()
            .enumerate()
            .find(|(k, c)| {
                acc += c.weight;
                u < acc || *k == last
            })
            .map(|(_, c)| c)
            .unwrap_or(&self.components[last]);
        let z = rng::normal_vec(rng, self.dim(), comp.var.sqrt());
        comp.mean.iter().zip(z).map(|(m, e)| m + e).collect()
    }

    /// `count` data samples, one stream per sample.
    pub fn samples(&self, seed: u64, count: usize) -> Vec<Vec<f64>> {
        (0..count)
            .map(|i| self.sample(&mut rng::stream(seed, rng::domain::DATA, i as u64)))
            .collect()
    }

    /// Per-component log joint terms `log w_k + log N(x; alpha mu_k, v_k I)`
    /// together with `x - alpha mu_k` and `v_k`.
    fn log_terms<S: Real>(&self, sched: &NoiseSchedule, x: &[S], t: S) -> Vec<(S, Vec<S>, S)> {
        let (a, s) = sched.coeffs_of(t);
        let d = x.len() as f64;
        self.components
            .iter()
            .map(|c| {
                let v = a * a * S::from(c.var) + s * s;
                let diff: Vec<S> = x
                    .iter()
                    .zip(&c.mean)
                    .map(|(&xi, &m)| xi - a * S::from(m))
                    .collect();
                let sq = S::dot(&diff, &diff);
                let logit = S::from(c.weight.ln())
                    - (v * S::from(2.0 * PI)).ln() * S::from(0.5 * d)
                    - sq / (v * S::from(2.0));
                (logit, diff, v)
            })
            .collect()
    }

    pub fn log_density_of<S: Real>(&self, sched: &NoiseSchedule, x: &[S], t: S) -> S {
        let logits: Vec<S> = self.log_terms(sched, x, t).into_iter().map(|l| l.0).collect();
        S::log_sum_exp(&logits)
    }

    pub fn epsilon_of<S: Real>(&self, sched: &NoiseSchedule, x: &[S], t: S) -> Vec<S> {
        let (_, s) = sched.coeffs_of(t);
        let terms = self.log_terms(sched, x, t);
        let logits: Vec<S> = terms.iter().map(|l| l.0).collect();
        let lse = S::log_sum_exp(&logits);
        let mut eps = vec![S::from(0.0); x.len()];
        for (logit, diff, v) in &terms {
            let r = (*logit - lse).exp() / *v;
            for (e, &dj) in eps.iter_mut().zip(diff) {
                *e = *e + r * dj;
            }
        }
        eps.into_iter().map(|e| s * e).collect()
    }
}

fn check_input(sched: &NoiseSchedule, d: usize, x: &[f64], t: f64) -> Result<()> {
    if x.len() != d {
        return Err(Error::Shape(format!("expected dimension {d}, got {}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite x".into()));
    }
    sched.alpha_sigma(t).map(|_| ())
}

/// Optimal noise prediction for mixture data.
pub fn gm_epsilon(gm: &GaussianMixture, sched: &NoiseSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
    check_input(sched, gm.dim(), x, t)?;
    Ok(gm.epsilon_of(sched, x, t))
}

/// `log q_t(x)` for mixture data.
pub fn gm_log_density(gm: &GaussianMixture, sched: &NoiseSchedule, x: &[f64], t: f64) -> Result<f64> {
    check_input(sched, gm.dim(), x, t)?;
    Ok(gm.log_density_of(sched, x, t))
}

/// Optimal noise prediction for data concentrated at `x0`.
pub fn point_epsilon(x0: &[f64], sched: &NoiseSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
    check_input(sched, x0.len(), x, t)?;
    Ok(point_epsilon_of(x0, sched, x, t))
}

fn point_epsilon_of<S: Real>(x0: &[f64], sched: &NoiseSchedule, x: &[S], t: S) -> Vec<S> {
    let (a, s) = sched.coeffs_of(t);
    x.iter()
        .zip(x0)
        .map(|(&xi, &p)| (xi - a * S::from(p)) / s)
        .collect()
}

#[derive(Debug, Clone)]
pub struct GmDenoiser {
    pub gm: GaussianMixture,
    pub sched: NoiseSchedule,
}

impl Denoiser for GmDenoiser {
    fn dim(&self) -> usize {
        self.gm.dim()
    }
    fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }
    fn epsilon<S: Real>(&self, x: &[S], t: S) -> Vec<S> {
        self.gm.epsilon_of(&self.sched, x, t)
    }
}

#[derive(Debug, Clone)]
pub struct PointDenoiser {
    pub x0: Vec<f64>,
    pub sched: NoiseSchedule,
}

impl Denoiser for PointDenoiser {
    fn dim(&self) -> usize {
        self.x0.len()
    }
    fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }
    fn epsilon<S: Real>(&self, x: &[S], t: S) -> Vec<S> {
        point_epsilon_of(&self.x0, &self.sched, x, t)
    }
}

/// Runtime choice of denoiser.
#[derive(Debug, Clone)]
pub enum AnyDenoiser {
    Gm(GmDenoiser),
    Point(PointDenoiser),
    Mlp(MlpDenoiser),
}

impl Denoiser for AnyDenoiser {
    fn dim(&self) -> usize {
        match self {
            AnyDenoiser::Gm(d) => d.dim(),
            AnyDenoiser::Point(d) => d.dim(),
            AnyDenoiser::Mlp(d) => d.dim(),
        }
    }
    fn schedule(&self) -> &NoiseSchedule {
        match self {
            AnyDenoiser::Gm(d) => d.schedule(),
            AnyDenoiser::Point(d) => d.schedule(),
            AnyDenoiser::Mlp(d) => d.schedule(),
        }
    }
    fn epsilon<S: Real>(&self, x: &[S], t: S) -> Vec<S> {
        match self {
            AnyDenoiser::Gm(d) => d.epsilon(x, t),
            AnyDenoiser::Point(d) => d.epsilon(x, t),
            AnyDenoiser::Mlp(d) => d.epsilon(x, t),
        }
    }
}
