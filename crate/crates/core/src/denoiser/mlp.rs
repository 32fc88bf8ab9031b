use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Denoiser, GaussianMixture};
use crate::diff::{Real, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng;
use crate::schedule::NoiseSchedule;

/// Per-time weight of the denoising loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DsmWeight {
    #[default]
    Unit,
    /// `sigma_t^2`
    SigmaSquared,
}

#[derive(Debug, Clone)]
pub struct MlpConfig {
    pub hidden_layers: usize,
    pub width: usize,
    pub n_freq: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub weight: DsmWeight,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden_layers: 2,
            width: 64,
            n_freq: 4,
            steps: 2000,
            batch: 32,
            lr: 2e-3,
            seed: 0,
            weight: DsmWeight::Unit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// On-disk form of an [`MlpDenoiser`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub d: usize,
    pub n_freq: usize,
    pub layers: Vec<LayerWeights>,
}

/// Small SiLU network predicting noise from `(c_in(t) x, features(lambda_t))`.
///
/// Time enters through `lambda_t / 8` and `sin`/`cos` of `2^j lambda_t / 4`.
/// The input is scaled by `1 / sqrt(alpha_t^2 + sigma_t^2)`.
#[derive(Debug, Clone)]
pub struct MlpDenoiser {
    sched: NoiseSchedule,
    d: usize,
    n_freq: usize,
    /// `(rows, cols)` per layer.
    shapes: Vec<(usize, usize)>,
    params: Vec<f64>,
}

impl MlpDenoiser {
    pub fn new(sched: NoiseSchedule, d: usize, cfg: &MlpConfig) -> Self {
        let n_in = d + 1 + 2 * cfg.n_freq;
        let mut shapes = Vec::new();
        let mut cols = n_in;
        for _ in 0..cfg.hidden_layers {
            shapes.push((cfg.width, cols));
            cols = cfg.width;
        }
        shapes.push((d, cols));

        let mut r = rng::stream(cfg.seed, rng::domain::MLP_INIT, 0);
        let mut params = Vec::new();
        let last = shapes.len() - 1;
        for (l, &(rows, cols)) in shapes.iter().enumerate() {
            let scale = if l == last { 0.1 } else { 1.0 } / (cols as f64).sqrt();
            params.extend(rng::normal_vec(&mut r, rows * cols, scale));
            params.extend(std::iter::repeat_n(0.0, rows));
        }
        MlpDenoiser {
            sched,
            d,
            n_freq: cfg.n_freq,
            shapes,
            params,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Forward pass with explicit parameters, so training can tape them.
    pub fn forward<S: Real>(&self, params: &[S], x: &[S], t: S) -> Vec<S> {
        let (a, s) = self.sched.coeffs_of(t);
        let c_in = S::from(1.0) / (a * a + s * s).sqrt();
        let lam = self.sched.lambda_of(t);
        let mut h: Vec<S> = x.iter().map(|&v| v * c_in).collect();
        h.push(lam * S::from(0.125));
        for j in 0..self.n_freq {
            let w = lam * S::from(2f64.powi(j as i32) / 4.0);
            h.push(w.sin());
            h.push(w.cos());
        }
        let mut off = 0;
        let last = self.shapes.len() - 1;
        for (l, &(rows, cols)) in self.shapes.iter().enumerate() {
            let w = &params[off..off + rows * cols];
            let b = &params[off + rows * cols..off + rows * cols + rows];
            off += rows * cols + rows;
            h = (0..rows)
                .map(|r| {
                    let z = S::dot(&w[r * cols..(r + 1) * cols], &h) + b[r];
                    if l == last {
                        z
                    } else {
                        z.silu()
                    }
                })
                .collect();
        }
        h
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        let mut off = 0;
        let layers = self
            .shapes
            .iter()
            .map(|&(rows, cols)| {
                let weights = self.params[off..off + rows * cols].to_vec();
                let bias = self.params[off + rows * cols..off + rows * cols + rows].to_vec();
                off += rows * cols + rows;
                LayerWeights {
                    rows,
                    cols,
                    weights,
                    bias,
                }
            })
            .collect();
        MlpCheckpoint {
            d: self.d,
            n_freq: self.n_freq,
            layers,
        }
    }

    pub fn from_checkpoint(sched: NoiseSchedule, ck: &MlpCheckpoint) -> Result<Self> {
        let mut cols = ck.d + 1 + 2 * ck.n_freq;
        let mut params = Vec::new();
        let mut shapes = Vec::new();
        for (l, layer) in ck.layers.iter().enumerate() {
            if layer.cols != cols
                || layer.weights.len() != layer.rows * layer.cols
                || layer.bias.len() != layer.rows
            {
                return Err(Error::Format(format!("layer {l} has inconsistent shape")));
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("layer {l} has non-finite weights")));
            }
            shapes.push((layer.rows, layer.cols));
            params.extend(&layer.weights);
            params.extend(&layer.bias);
            cols = layer.rows;
        }
        if shapes.last().map(|s| s.0) != Some(ck.d) {
            return Err(Error::Format("output layer width must equal d".into()));
        }
        Ok(MlpDenoiser {
            sched,
            d: ck.d,
            n_freq: ck.n_freq,
            shapes,
            params,
        })
    }
}

impl Denoiser for MlpDenoiser {
    fn dim(&self) -> usize {
        self.d
    }
    fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }
    fn epsilon<S: Real>(&self, x: &[S], t: S) -> Vec<S> {
        let p: Vec<S> = self.params.iter().map(|&v| S::from(v)).collect();
        self.forward(&p, x, t)
    }
}

#[derive(Debug, Clone)]
pub struct MlpTraining {
    pub model: MlpDenoiser,
    /// Batch loss at every step.
    pub losses: Vec<f64>,
}

/// Trains an [`MlpDenoiser`] by denoising score matching on samples of `data`.
///
/// Each step draws `x0 ~ data`, `t ~ U[t_min, T]`, `eps ~ N(0, I)` and
/// minimizes `w(t) |eps_theta(alpha_t x0 + sigma_t eps, t) - eps|^2 / d`.
pub fn train_mlp_dsm(data: &GaussianMixture, sched: &NoiseSchedule, cfg: &MlpConfig) -> Result<MlpTraining> {
    if cfg.steps == 0 || cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("mlp", "steps, batch and lr must be positive"));
    }
    let d = data.dim();
    let mut model = MlpDenoiser::new(*sched, d, cfg);
    let mut opt = Adam::new(cfg.lr, model.num_params());
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut r = rng::stream(cfg.seed, rng::domain::MLP_BATCH, step as u64);
        let tape = Tape::new();
        let p = tape.vars(&model.params);
        let mut terms: Vec<Var<'_>> = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let x0 = data.sample(&mut r);
            let t = sched.t_min + (sched.t_max - sched.t_min) * r.random::<f64>();
            let eps = rng::normal_vec(&mut r, d, 1.0);
            let (a, s) = sched.coeffs_of(t);
            let xt: Vec<Var<'_>> = x0.iter().zip(&eps).map(|(m, e)| Var::from(a * m + s * e)).collect();
            let w = match cfg.weight {
                DsmWeight::Unit => 1.0,
                DsmWeight::SigmaSquared => s * s,
            };
            let out = model.forward(&p, &xt, Var::from(t));
            let diff: Vec<Var<'_>> = out.iter().zip(&eps).map(|(&o, &e)| o - Var::from(e)).collect();
            terms.push(Var::dot(&diff, &diff) * Var::from(w / d as f64));
        }
        let loss = Var::sum(&terms) * Var::from(1.0 / cfg.batch as f64);
        if !loss.value().is_finite() {
            return Err(Error::TrainingDiverged { step, last_good: None });
        }
        losses.push(loss.value());
        let g = tape.backward(&[(loss, 1.0)])?.wrt_all(&p);
        opt.step(&mut model.params, &g);
    }
    Ok(MlpTraining { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::point_epsilon;

    fn point_data(x0: &[f64]) -> GaussianMixture {
        GaussianMixture::from_parts(&[1.0], &[x0.to_vec()], &[1e-8]).unwrap()
    }

    fn small_cfg(seed: u64) -> MlpConfig {
        MlpConfig {
            width: 32,
            steps: 300,
            batch: 16,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let sched = NoiseSchedule::ve_edm();
        let data = GaussianMixture::default_2d();
        let a = train_mlp_dsm(&data, &sched, &small_cfg(1)).unwrap();
        let b = train_mlp_dsm(&data, &sched, &small_cfg(1)).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        let head: f64 = a.losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = a.losses[a.losses.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn gradient_wrt_input_and_time_exists() {
        let sched = NoiseSchedule::vp_linear();
        let m = MlpDenoiser::new(sched, 2, &small_cfg(3));
        let tape = Tape::new();
        let x = tape.vars(&[0.3, -0.2]);
        let t = tape.var(0.4);
        let out = m.epsilon(&x, t);
        let g = crate::diff::grad(out[0] + out[1], &[&x, &[t]]).unwrap();
        assert!(g.iter().flatten().all(|v| v.is_finite()));
        assert!(g[1][0] != 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let sched = NoiseSchedule::ve_edm();
        let m = MlpDenoiser::new(sched, 2, &small_cfg(5));
        let json = serde_json::to_string(&m.to_checkpoint()).unwrap();
        let back = MlpDenoiser::from_checkpoint(sched, &serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.params(), m.params());
        let mut bad = m.to_checkpoint();
        bad.layers[0].bias.pop();
        assert!(MlpDenoiser::from_checkpoint(sched, &bad).is_err());
    }

    #[test]
    fn learns_point_mass_denoiser() {
        let sched = NoiseSchedule::vp_linear();
        let x0 = [0.5, -0.5];
        let cfg = MlpConfig {
            steps: 1500,
            batch: 32,
            seed: 2,
            ..Default::default()
        };
        let trained = train_mlp_dsm(&point_data(&x0), &sched, &cfg).unwrap();
        let mut r = rng::stream(99, rng::domain::EVAL, 0);
        let mut errs: Vec<f64> = (0..200)
            .map(|_| {
                let t = sched.t_min + (sched.t_max - sched.t_min) * r.random::<f64>();
                let eps = rng::normal_vec(&mut r, 2, 1.0);
                let (a, s) = sched.coeffs_of(t);
                let x: Vec<f64> = x0.iter().zip(&eps).map(|(m, e)| a * m + s * e).collect();
                let want = point_epsilon(&x0, &sched, &x, t).unwrap();
                let got = trained.model.eval(&x, t).unwrap();
                let num: f64 = want.iter().zip(&got).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                num / want.iter().map(|p| p * p).sum::<f64>().sqrt()
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        let median = errs[errs.len() / 2];
        assert!(median <= 0.10, "median relative error {median}");
    }
}
