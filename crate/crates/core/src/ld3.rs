//! Learning a solver's time grid by soft teacher forcing.
//!
//! Each training pair holds a prior draw `x_T`, the teacher output
//! `y = teacher(x_T)` and a trainable student input `x'` kept inside the ball
//! of radius `r * sigma_T` around `x_T`. The student loss is
//! `d(student(x'), y)`; the grid logits, the decoupling offsets and every
//! `x'` descend on it jointly.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::denoiser::Denoiser;
use crate::diff::{checkpointed_grad, Real, Tape, Var};
use crate::discretize::{select_init, tau_c_of, tau_of, Discretization, Heuristic, InitChoice};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, Plateau, RmsProp, Sgd};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::solvers::{solve, solve_with, teacher_solve, SolverMap, SolverSpec, TeacherSpec};

/// Dimension-normalized squared L2 distance `|a - b|^2 / d`.
pub fn distance<S: Real>(a: &[S], b: &[f64]) -> S {
    let diff: Vec<S> = a.iter().zip(b).map(|(&x, &y)| x - S::from(y)).collect();
    S::dot(&diff, &diff) * S::from(1.0 / b.len() as f64)
}

/// Relative radius `r` and absolute ball radius `r * sigma_T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallRadius {
    pub r: f64,
    pub rho: f64,
}

/// `r = gamma * d / NFE^2`, ball radius `r * sigma_T`.
pub fn radius(gamma: f64, d: usize, nfe: usize, sched: &NoiseSchedule) -> BallRadius {
    let r = gamma * d as f64 / (nfe * nfe) as f64;
    BallRadius {
        r,
        rho: r * sched.sigma_max(),
    }
}

/// Projects `x_prime` onto the closed ball of radius `rho` around `center`.
pub fn project(x_prime: &[f64], center: &[f64], rho: f64) -> Vec<f64> {
    let offset: Vec<f64> = x_prime.iter().zip(center).map(|(a, b)| a - b).collect();
    let norm = f64::norm(&offset);
    if norm <= rho {
        return x_prime.to_vec();
    }
    center
        .iter()
        .zip(&offset)
        .map(|(c, o)| c + rho * o / norm)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub x_t: Vec<f64>,
    pub x_prime: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d: usize,
    pub seed: u64,
    pub schedule_hash: u64,
    pub pairs: Vec<TrainPair>,
}

impl Dataset {
    /// Train and validation indices: a seeded shuffle, split by position parity.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.pairs.len()).collect();
        idx.shuffle(&mut rng::stream(self.seed, rng::domain::SPLIT, 0));
        let train = idx.iter().step_by(2).copied().collect();
        let val = idx.iter().skip(1).step_by(2).copied().collect();
        (train, val)
    }

    /// `(x_T, y)` for the given indices.
    pub fn teacher_pairs(&self, idx: &[usize]) -> Vec<(Vec<f64>, Vec<f64>)> {
        idx.iter()
            .map(|&k| (self.pairs[k].x_t.clone(), self.pairs[k].y.clone()))
            .collect()
    }

    /// Resets every `x'` to its `x_T`.
    pub fn reset(&mut self) {
        for p in &mut self.pairs {
            p.x_prime.clone_from(&p.x_t);
        }
    }
}

#[cfg(feature = "parallel")]
pub(crate) fn par_map<T: Send>(items: &[usize], f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    items.par_iter().map(|&k| f(k)).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T: Send>(items: &[usize], f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    items.iter().map(|&k| f(k)).collect()
}

/// Samples `count` prior draws and their teacher outputs.
pub fn generate_dataset<D: Denoiser>(den: &D, teacher: &TeacherSpec, count: usize, seed: u64) -> Result<Dataset> {
    if count < 2 {
        return Err(Error::config("train.count", "need at least two pairs to split"));
    }
    let sched = den.schedule();
    let xs = sched.sample_prior(seed, count, den.dim());
    let idx: Vec<usize> = (0..count).collect();
    let ys = par_map(&idx, |k| teacher_solve(den, teacher, &xs[k]));
    let pairs = xs
        .into_iter()
        .zip(ys)
        .enumerate()
        .map(|(k, (x, y))| match y {
            Ok(y) => Ok(TrainPair {
                x_prime: x.clone(),
                x_t: x,
                y,
            }),
            Err(Error::Divergence { step }) => Err(Error::Input(format!(
                "teacher diverged on sample {k} at step {step}"
            ))),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        d: den.dim(),
        seed,
        schedule_hash: sched.fingerprint(),
        pairs,
    })
}

/// Records `d(student(x'), y)` on the tape of the given leaves.
pub fn record_soft_loss<'t, D: Denoiser>(
    xi: &[Var<'t>],
    xi_c: &[Var<'t>],
    x_prime: &[Var<'t>],
    y: &[f64],
    den: &D,
    spec: SolverSpec,
) -> Result<Var<'t>> {
    let sched = den.schedule();
    let times = tau_of(xi, sched.t_min, sched.t_max);
    let times_c = tau_c_of(&times, xi_c, sched.t_min, sched.t_max);
    let out = solve_with(den, spec, &times, &times_c, x_prime)?;
    Ok(distance(&out, y))
}

/// Soft loss value for a single pair.
pub fn soft_loss<D: Denoiser>(disc: &Discretization, pair: &TrainPair, den: &D, spec: SolverSpec) -> Result<f64> {
    let out = solve(den, spec, &disc.tau(), &disc.tau_c(), &pair.x_prime)?;
    Ok(distance(&out, &pair.y))
}

/// Mean teacher distance from the original `x_T` (no ball relaxation).
pub fn hard_loss<D: Denoiser>(disc: &Discretization, pairs: &[TrainPair], den: &D, spec: SolverSpec) -> Result<f64> {
    let (times, times_c) = (disc.tau(), disc.tau_c());
    let mut total = 0.0;
    for p in pairs {
        total += distance(&solve(den, spec, &times, &times_c, &p.x_t)?, &p.y);
    }
    Ok(total / pairs.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradMode {
    /// Recompute each solver step during backward; keep only step states.
    #[default]
    Checkpointed,
    /// Record the whole solve on one tape.
    WholeTape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairGrad {
    pub loss: f64,
    pub d_xi: Vec<f64>,
    pub d_xi_c: Vec<f64>,
    pub d_x: Vec<f64>,
}

/// Gradient of the soft loss with respect to `xi`, `xi_c` and `x'`.
pub fn pair_grad<D: Denoiser>(
    disc: &Discretization,
    x_prime: &[f64],
    y: &[f64],
    den: &D,
    spec: SolverSpec,
    mode: GradMode,
) -> Result<PairGrad> {
    let sched = den.schedule();
    let tape = Tape::new();
    let xi = tape.vars(&disc.xi);
    let xi_c = tape.vars(&disc.xi_c);
    match mode {
        GradMode::WholeTape => {
            let x = tape.vars(x_prime);
            let loss = record_soft_loss(&xi, &xi_c, &x, y, den, spec)?;
            let adj = tape.backward(&[(loss, 1.0)])?;
            Ok(PairGrad {
                loss: loss.value(),
                d_xi: adj.wrt_all(&xi),
                d_xi_c: adj.wrt_all(&xi_c),
                d_x: adj.wrt_all(&x),
            })
        }
        GradMode::Checkpointed => {
            let times = tau_of(&xi, sched.t_min, sched.t_max);
            let times_c = tau_c_of(&times, &xi_c, sched.t_min, sched.t_max);
            let params: Vec<f64> = times.iter().chain(&times_c).map(|v| v.value()).collect();
            let map = SolverMap::new(den, spec);
            let g = checkpointed_grad(&map, &params, x_prime, |out| distance(&out[..y.len()], y))?;
            let seeds: Vec<(Var<'_>, f64)> = times
                .iter()
                .chain(&times_c)
                .copied()
                .zip(g.d_params.iter().copied())
                .collect();
            let adj = tape.backward(&seeds)?;
            Ok(PairGrad {
                loss: g.loss,
                d_xi: adj.wrt_all(&xi),
                d_xi_c: adj.wrt_all(&xi_c),
                d_x: g.d_init[..x_prime.len()].to_vec(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    /// Relative radius overriding `gamma * d / NFE^2`.
    pub r_override: Option<f64>,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch: usize,
    pub lr_xi: f64,
    /// `None`: `0.1 / NFE`.
    pub lr_xi_c: Option<f64>,
    /// `None`: `12 / NFE`.
    pub lr_x_prime: Option<f64>,
    pub momentum: f64,
    pub clip: f64,
    pub decay: f64,
    pub patience: usize,
    pub floor_xi: f64,
    pub floor_xi_c: f64,
    /// Projected steps on each validation `x'` at the end of every epoch.
    pub val_steps: usize,
    pub init: Vec<Heuristic>,
    pub grad_mode: GradMode,
    pub seed: u64,
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.001,
            r_override: None,
            epochs_phase1: 2,
            epochs_phase2: 5,
            batch: 2,
            lr_xi: 0.005,
            lr_xi_c: None,
            lr_x_prime: None,
            momentum: 0.9,
            clip: 1.0,
            decay: 0.8,
            patience: 5,
            floor_xi: 5e-5,
            floor_xi_c: 1e-6,
            val_steps: 10,
            init: Heuristic::ALL.to_vec(),
            grad_mode: GradMode::Checkpointed,
            seed: 0,
            record_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn lr_xi_c(&self, nfe: usize) -> f64 {
        self.lr_xi_c.unwrap_or(0.1 / nfe as f64)
    }

    pub fn lr_x_prime(&self, nfe: usize) -> f64 {
        self.lr_x_prime.unwrap_or(12.0 / nfe as f64)
    }

    pub fn radius(&self, d: usize, nfe: usize, sched: &NoiseSchedule) -> BallRadius {
        match self.r_override {
            Some(r) => BallRadius {
                r,
                rho: r * sched.sigma_max(),
            },
            None => radius(self.gamma, d, nfe, sched),
        }
    }

    fn validate(&self, nfe: usize) -> Result<()> {
        let rates = [
            ("train.lr_xi_c", self.lr_xi_c(nfe)),
            ("train.lr_x_prime", self.lr_x_prime(nfe)),
        ];
        for (key, v) in rates {
            if !(v > 0.0) {
                return Err(Error::config(key, "learning rate must be positive"));
            }
        }
        if !(self.lr_xi >= 0.0) {
            return Err(Error::config("train.lr_xi", "learning rate must be non-negative"));
        }
        if self.batch == 0 {
            return Err(Error::config("train.batch", "batch must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience", "patience must be at least 1"));
        }
        if !(self.gamma >= 0.0) || self.r_override.is_some_and(|r| !(r >= 0.0)) {
            return Err(Error::config("train.gamma", "radius must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub epoch: usize,
    pub phase: u8,
    pub train_loss: f64,
    pub lr_xi: f64,
    pub lr_xi_c: f64,
    /// Largest `|x' - x_T|` over training pairs after the projection.
    pub max_offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub phase: u8,
    pub val_loss: f64,
    pub lr_xi: f64,
    pub lr_xi_c: f64,
    pub wall_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub init: InitChoice,
    pub radius: BallRadius,
    pub iters: Vec<IterRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best: Discretization,
    pub best_val_loss: f64,
    /// Best validation loss so far, one entry per epoch record.
    pub best_trace: Vec<f64>,
}

fn mean_soft_loss<D: Denoiser>(disc: &Discretization, ds: &Dataset, idx: &[usize], den: &D, spec: SolverSpec) -> Result<f64> {
    let losses = par_map(idx, |k| soft_loss(disc, &ds.pairs[k], den, spec));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / idx.len() as f64)
}

/// Runs the two-phase schedule starting from the best heuristic in
/// `cfg.init` (scored on the validation split).
pub fn train<D: Denoiser>(cfg: &TrainConfig, ds: &mut Dataset, den: &D, spec: SolverSpec) -> Result<TrainReport> {
    let (_, val_idx) = ds.split();
    if val_idx.is_empty() {
        return Err(Error::config("train", "empty dataset"));
    }
    let init = select_init(&cfg.init, &ds.teacher_pairs(&val_idx), den, spec)?;
    train_from(cfg, ds, den, spec, init)
}

/// [`train`] from a given initialization.
pub fn train_from<D: Denoiser>(
    cfg: &TrainConfig,
    ds: &mut Dataset,
    den: &D,
    spec: SolverSpec,
    init: InitChoice,
) -> Result<TrainReport> {
    cfg.validate(spec.nfe)?;
    let sched = *den.schedule();
    let (train_idx, val_idx) = ds.split();
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::config("train", "empty dataset"));
    }
    if ds.d != den.dim() {
        return Err(Error::Shape(format!("dataset d={} but denoiser d={}", ds.d, den.dim())));
    }
    let n = spec.nfe;
    let ball = cfg.radius(ds.d, n, &sched);
    let lr_x = cfg.lr_x_prime(n);
    let mut disc = Discretization::new(init.xi.clone(), vec![0.0; n + 1], &sched)?;
    let mut rms = RmsProp::new(cfg.lr_xi, cfg.momentum, n + 1);
    let mut lr_xi_c = cfg.lr_xi_c(n);
    let mut plateau_xi = Plateau::new(cfg.decay, cfg.patience, cfg.floor_xi);
    let mut plateau_xi_c = Plateau::new(cfg.decay, cfg.patience, cfg.floor_xi_c);

    let clock = cfg.record_wall_clock.then(Instant::now);
    let mut best_val = mean_soft_loss(&disc, ds, &val_idx, den, spec)?;
    let mut best = disc.clone();
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        phase: 1,
        val_loss: best_val,
        lr_xi: rms.lr,
        lr_xi_c,
        wall_s: clock.map(|c| c.elapsed().as_secs_f64()),
    }];
    let mut best_trace = vec![best_val];
    let mut iters = Vec::new();

    let total_epochs = cfg.epochs_phase1 + cfg.epochs_phase2;
    for epoch in 1..=total_epochs {
        let phase: u8 = if epoch <= cfg.epochs_phase1 { 1 } else { 2 };
        let epoch_start = clock.map(|_| Instant::now());
        let mut order = train_idx.clone();
        order.shuffle(&mut rng::stream(cfg.seed, rng::domain::SHUFFLE, epoch as u64));

        for batch in order.chunks(cfg.batch) {
            let step = iters.len();
            let snapshot = &disc;
            let grads = par_map(batch, |k| {
                let p = &ds.pairs[k];
                pair_grad(snapshot, &p.x_prime, &p.y, den, spec, cfg.grad_mode)
            });
            let grads: Vec<PairGrad> = match grads.into_iter().collect::<Result<_>>() {
                Ok(g) => g,
                Err(Error::Divergence { .. } | Error::Gradient { .. }) => {
                    return Err(Error::TrainingDiverged {
                        step,
                        last_good: Some(Box::new(best)),
                    })
                }
                Err(e) => return Err(e),
            };
            let b = batch.len() as f64;
            let loss = grads.iter().map(|g| g.loss).sum::<f64>() / b;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    step,
                    last_good: Some(Box::new(best)),
                });
            }
            let mut g_xi = vec![0.0; n + 1];
            let mut g_xi_c = vec![0.0; n + 1];
            for g in &grads {
                for j in 0..=n {
                    g_xi[j] += g.d_xi[j] / b;
                    g_xi_c[j] += g.d_xi_c[j] / b;
                }
            }
            clip_grad_norm(&mut g_xi, cfg.clip);
            clip_grad_norm(&mut g_xi_c, cfg.clip);
            if rms.lr > 0.0 {
                rms.step(&mut disc.xi, &g_xi);
            }
            if phase == 2 {
                Sgd { lr: lr_xi_c }.step(&mut disc.xi_c, &g_xi_c);
            }
            for (&k, g) in batch.iter().zip(&grads) {
                let p = &mut ds.pairs[k];
                let stepped: Vec<f64> = p.x_prime.iter().zip(&g.d_x).map(|(x, dx)| x - lr_x * dx / b).collect();
                p.x_prime = project(&stepped, &p.x_t, ball.rho);
            }
            let max_offset = train_idx
                .iter()
                .map(|&k| {
                    let p = &ds.pairs[k];
                    p.x_prime.iter().zip(&p.x_t).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt()
                })
                .fold(0.0, f64::max);
            iters.push(IterRecord {
                iter: step,
                epoch,
                phase,
                train_loss: loss,
                lr_xi: rms.lr,
                lr_xi_c,
                max_offset,
            });
        }

        // Refresh validation x' with the grid frozen.
        let frozen = &disc;
        let pairs = &ds.pairs;
        let refreshed = par_map(&val_idx, |k| -> Result<Vec<f64>> {
            let p = &pairs[k];
            let mut x = p.x_prime.clone();
            for _ in 0..cfg.val_steps {
                let g = pair_grad(frozen, &x, &p.y, den, spec, cfg.grad_mode)?;
                let stepped: Vec<f64> = x.iter().zip(&g.d_x).map(|(a, dx)| a - lr_x * dx).collect();
                x = project(&stepped, &p.x_t, ball.rho);
            }
            Ok(x)
        });
        for (&k, x) in val_idx.iter().zip(refreshed) {
            ds.pairs[k].x_prime = x?;
        }

        let val = mean_soft_loss(&disc, ds, &val_idx, den, spec)?;
        if !val.is_finite() {
            return Err(Error::TrainingDiverged {
                step: iters.len(),
                last_good: Some(Box::new(best)),
            });
        }
        plateau_xi.observe(val, &mut rms.lr);
        plateau_xi_c.observe(val, &mut lr_xi_c);
        if val < best_val {
            best_val = val;
            best = disc.clone();
        }
        best_trace.push(best_val);
        epochs.push(EpochRecord {
            epoch,
            phase,
            val_loss: val,
            lr_xi: rms.lr,
            lr_xi_c,
            wall_s: epoch_start.map(|s| s.elapsed().as_secs_f64()),
        });
    }

    Ok(TrainReport {
        init,
        radius: ball,
        iters,
        epochs,
        best,
        best_val_loss: best_val,
        best_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{GaussianMixture, GmDenoiser};
    use crate::solvers::SolverFamily;

    fn den() -> GmDenoiser {
        GmDenoiser {
            gm: GaussianMixture::default_2d(),
            sched: NoiseSchedule::ve_edm(),
        }
    }

    fn small_dataset(den: &GmDenoiser, seed: u64) -> Dataset {
        let teacher = TeacherSpec {
            solver: SolverSpec::new(SolverFamily::Dpmpp, 2, 40).unwrap(),
            ..Default::default()
        };
        generate_dataset(den, &teacher, 20, seed).unwrap()
    }

    #[test]
    fn radius_formula() {
        let s = NoiseSchedule::ve_edm();
        assert!((radius(0.001, 3072, 4, &s).r - 0.192).abs() < 1e-15);
        assert_eq!(radius(0.0, 2, 4, &s).r, 0.0);
        let r = radius(0.001, 2, 10, &s);
        assert!((r.r - 2e-5).abs() < 1e-18);
        assert!((r.rho - 2e-5 * 80.0).abs() < 1e-15);
    }

    #[test]
    fn projection() {
        let p = project(&[0.3, 0.4], &[0.0, 0.0], 0.25);
        assert!((p[0] - 0.15).abs() < 1e-15 && (p[1] - 0.2).abs() < 1e-15);
        assert_eq!(project(&[0.1, 0.1], &[0.0, 0.0], 0.25), vec![0.1, 0.1]);
        assert_eq!(project(&[2.0, 3.0], &[2.0, 3.0], 0.0), vec![2.0, 3.0]);
        assert_eq!(project(&[2.5, 3.0], &[2.0, 3.0], 0.0), vec![2.0, 3.0]);
    }

    proptest::proptest! {
        #[test]
        fn projection_idempotent_and_feasible(
            x in proptest::collection::vec(-10.0..10.0f64, 3),
            c in proptest::collection::vec(-10.0..10.0f64, 3),
            rho in 0.0..5.0f64,
        ) {
            let p = project(&x, &c, rho);
            let dist = p.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            proptest::prop_assert!(dist <= rho + 1e-9);
            let q = project(&p, &c, rho);
            for (a, b) in p.iter().zip(&q) {
                proptest::prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn distance_axioms() {
        assert_eq!(distance(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!(distance(&[1.0, 2.0], &[1.0, 2.5]) > 0.0);
        assert_eq!(distance(&[0.0, 0.0], &[3.0, 4.0]), 12.5);
    }

    #[test]
    fn dataset_generation() {
        let d = den();
        let ds = small_dataset(&d, 3);
        assert_eq!(ds.pairs.len(), 20);
        assert!(ds.pairs.iter().all(|p| p.x_prime == p.x_t));
        let (tr, va) = ds.split();
        assert_eq!((tr.len(), va.len()), (10, 10));
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(ds, small_dataset(&d, 3));
        assert!(generate_dataset(&d, &TeacherSpec::default(), 1, 0).is_err());
    }

    #[test]
    fn soft_loss_zero_for_teacher_grid() {
        let d = den();
        let teacher = TeacherSpec {
            solver: SolverSpec::new(SolverFamily::Dpmpp, 2, 30).unwrap(),
            ..Default::default()
        };
        let ds = generate_dataset(&d, &teacher, 4, 1).unwrap();
        let times = crate::discretize::heuristic_times(teacher.grid, 30, &d.sched).unwrap();
        let disc = Discretization::from_times(&times, &d.sched).unwrap();
        // Rebuilding the grid from logits is exact to rounding only.
        for p in &ds.pairs {
            let l = soft_loss(&disc, p, &d, teacher.solver).unwrap();
            assert!(l <= 1e-20, "{l}");
            let exact = solve(&d, teacher.solver, &times, &times, &p.x_prime).unwrap();
            assert_eq!(distance(&exact, &p.y), 0.0);
        }
        assert_eq!(hard_loss(&disc, &ds.pairs, &d, teacher.solver).unwrap(), {
            let s: f64 = ds.pairs.iter().map(|p| soft_loss(&disc, p, &d, teacher.solver).unwrap()).sum();
            s / 4.0
        });
    }

    #[test]
    fn checkpointed_equals_whole_tape() {
        let d = den();
        let ds = small_dataset(&d, 2);
        for family in [SolverFamily::Euler, SolverFamily::Dpmpp, SolverFamily::Ipndm] {
            let spec = SolverSpec::with_default_order(family, 5).unwrap();
            let times = crate::discretize::heuristic_times(Heuristic::Edm, 5, &d.sched).unwrap();
            let mut disc = Discretization::from_times(&times, &d.sched).unwrap();
            disc.xi_c = vec![-0.5, 0.1, -0.02, 0.003, 0.0, 0.0];
            let p = &ds.pairs[0];
            let a = pair_grad(&disc, &p.x_prime, &p.y, &d, spec, GradMode::Checkpointed).unwrap();
            let b = pair_grad(&disc, &p.x_prime, &p.y, &d, spec, GradMode::WholeTape).unwrap();
            assert_eq!(a.loss, b.loss);
            for (x, y) in a.d_xi.iter().chain(&a.d_xi_c).chain(&a.d_x).zip(b.d_xi.iter().chain(&b.d_xi_c).chain(&b.d_x)) {
                assert!((x - y).abs() <= 1e-12, "{family}: {x} vs {y}");
            }
            assert_eq!(a.d_xi_c[5], 0.0);
        }
    }

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs_phase1: 1,
            epochs_phase2: 1,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_feasible() {
        let d = den();
        let spec = SolverSpec::new(SolverFamily::Dpmpp, 2, 4).unwrap();
        let cfg = TrainConfig {
            r_override: Some(0.05),
            ..quick_cfg(4)
        };
        let mut a = small_dataset(&d, 5);
        let mut b = a.clone();
        let ra = train(&cfg, &mut a, &d, spec).unwrap();
        let rb = train(&cfg, &mut b, &d, spec).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        for it in &ra.iters {
            assert!(it.max_offset <= ra.radius.rho + 1e-9);
        }
        // Phase 1 leaves the offsets alone.
        assert_eq!(ra.iters.len(), 10);
        assert!(ra.best_trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(ra.best_val_loss, ra.best_trace.iter().copied().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn phase_one_freezes_offsets() {
        let d = den();
        let spec = SolverSpec::new(SolverFamily::Dpmpp, 2, 4).unwrap();
        let cfg = TrainConfig {
            epochs_phase1: 2,
            epochs_phase2: 0,
            ..quick_cfg(1)
        };
        let mut ds = small_dataset(&d, 6);
        let r = train(&cfg, &mut ds, &d, spec).unwrap();
        assert!(r.best.xi_c.iter().all(|&v| v.to_bits() == 0f64.to_bits()));
    }

    #[test]
    fn zero_radius_keeps_inputs_fixed() {
        let d = den();
        let spec = SolverSpec::new(SolverFamily::Ipndm, 3, 4).unwrap();
        let cfg = TrainConfig {
            gamma: 0.0,
            ..quick_cfg(2)
        };
        let mut ds = small_dataset(&d, 7);
        let r = train(&cfg, &mut ds, &d, spec).unwrap();
        assert!(ds.pairs.iter().all(|p| p.x_prime == p.x_t));
        assert!(r.iters.iter().all(|it| it.max_offset == 0.0));
    }

    #[test]
    fn config_errors() {
        let d = den();
        let spec = SolverSpec::new(SolverFamily::Dpmpp, 2, 4).unwrap();
        let mut ds = small_dataset(&d, 8);
        let bad = TrainConfig {
            batch: 0,
            ..Default::default()
        };
        assert!(matches!(train(&bad, &mut ds, &d, spec), Err(Error::Config { .. })));
        let bad = TrainConfig {
            patience: 0,
            ..Default::default()
        };
        assert!(matches!(train(&bad, &mut ds, &d, spec), Err(Error::Config { .. })));
        let mut empty = Dataset {
            pairs: Vec::new(),
            ..ds.clone()
        };
        assert!(matches!(train(&TrainConfig::default(), &mut empty, &d, spec), Err(Error::Config { .. })));
    }
}
