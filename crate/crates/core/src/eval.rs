//! Metrics and experiment drivers: teacher distance, RMSD, per-coordinate
//! W1, radius sweeps, the KL-bound terms, cross-solver transfer and the
//! benchmark table.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, GaussianMixture};
use crate::diff::{Real, Tape};
use crate::discretize::{heuristic_times, select_init, Discretization, Heuristic};
use crate::error::{Error, Result};
use crate::ld3::{distance, generate_dataset, par_map, train, train_from, Dataset, TrainConfig};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::solvers::{solve, solve_with, validate_grid, SolverFamily, SolverSpec, TeacherSpec};

fn check_shapes(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} samples vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty sample sets".into()));
    }
    if let Some(k) = (0..a.len()).find(|&k| a[k].len() != b[k].len() || a[k].len() != a[0].len()) {
        return Err(Error::Shape(format!("dimension mismatch at sample {k}")));
    }
    Ok(())
}

/// Root mean squared deviation over all samples and coordinates.
pub fn rmsd(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_shapes(a, b)?;
    let n = (a.len() * a[0].len()) as f64;
    let ss: f64 = a
        .iter()
        .zip(b)
        .flat_map(|(u, v)| u.iter().zip(v).map(|(x, y)| (x - y).powi(2)))
        .sum();
    Ok((ss / n).sqrt())
}

/// 1-Wasserstein distance between equal-size empirical measures on the line.
pub fn w1_scalar(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("{} samples vs {}", a.len(), b.len())));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Per-coordinate W1, averaged over coordinates.
pub fn w1_1d(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_shapes(a, b)?;
    let d = a[0].len();
    let mut total = 0.0;
    for j in 0..d {
        let ca: Vec<f64> = a.iter().map(|v| v[j]).collect();
        let cb: Vec<f64> = b.iter().map(|v| v[j]).collect();
        total += w1_scalar(&ca, &cb)?;
    }
    Ok(total / d as f64)
}

/// Mean distance between the student on `(times, times_c)` and teacher outputs.
pub fn teacher_distance<D: Denoiser>(
    den: &D,
    spec: SolverSpec,
    times: &[f64],
    times_c: &[f64],
    pairs: &[(Vec<f64>, Vec<f64>)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Shape("no evaluation pairs".into()));
    }
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let losses = par_map(&idx, |k| {
        solve(den, spec, times, times_c, &pairs[k].0).map(|out| distance(&out, &pairs[k].1))
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r: f64,
    pub best_val_loss: f64,
}

/// Trains once per relative radius from a shared initialization and seed.
pub fn sweep_r<D: Denoiser>(
    cfg: &TrainConfig,
    ds: &Dataset,
    den: &D,
    spec: SolverSpec,
    r_values: &[f64],
) -> Result<Vec<SweepRow>> {
    if r_values.iter().any(|&r| !(r >= 0.0)) {
        return Err(Error::config("eval.r_values", "radii must be non-negative"));
    }
    if r_values.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::config("eval.r_values", "radii must be sorted ascending"));
    }
    let (_, val_idx) = ds.split();
    let init = select_init(&cfg.init, &ds.teacher_pairs(&val_idx), den, spec)?;
    let idx: Vec<usize> = (0..r_values.len()).collect();
    par_map(&idx, |k| {
        let mut run = ds.clone();
        run.reset();
        let cfg = TrainConfig {
            r_override: Some(r_values[k]),
            ..cfg.clone()
        };
        train_from(&cfg, &mut run, den, spec, init.clone()).map(|rep| SweepRow {
            r: r_values[k],
            best_val_loss: rep.best_val_loss,
        })
    })
    .into_iter()
    .collect()
}

/// A differentiable map `R^d -> R^d`.
pub trait DiffMap: Sync {
    fn dim(&self) -> usize;
    fn apply<S: Real>(&self, x: &[S]) -> Result<Vec<S>>;
}

/// A solver with a fixed grid, as a map from `x_T` to its output.
pub struct GridMap<'a, D> {
    den: &'a D,
    spec: SolverSpec,
    times: Vec<f64>,
    times_c: Vec<f64>,
}

impl<'a, D: Denoiser> GridMap<'a, D> {
    pub fn new(den: &'a D, spec: SolverSpec, times: Vec<f64>, times_c: Vec<f64>) -> Result<Self> {
        validate_grid(den.schedule(), spec.nfe, &times, &times_c)?;
        Ok(GridMap { den, spec, times, times_c })
    }

    pub fn heuristic(den: &'a D, spec: SolverSpec, kind: Heuristic) -> Result<Self> {
        let times = heuristic_times(kind, spec.nfe, den.schedule())?;
        Self::new(den, spec, times.clone(), times)
    }

    pub fn teacher(den: &'a D, teacher: &TeacherSpec) -> Result<Self> {
        Self::heuristic(den, teacher.solver, teacher.grid)
    }

    pub fn learned(den: &'a D, spec: SolverSpec, disc: &Discretization) -> Result<Self> {
        Self::new(den, spec, disc.tau(), disc.tau_c())
    }
}

impl<D: Denoiser> DiffMap for GridMap<'_, D> {
    fn dim(&self) -> usize {
        self.den.dim()
    }

    fn apply<S: Real>(&self, x: &[S]) -> Result<Vec<S>> {
        let times: Vec<S> = self.times.iter().map(|&t| S::from(t)).collect();
        let times_c: Vec<S> = self.times_c.iter().map(|&t| S::from(t)).collect();
        solve_with(self.den, self.spec, &times, &times_c, x)
    }
}

/// Dense Jacobian of `map` at `x`, one reverse pass per output row.
pub fn jacobian<M: DiffMap>(map: &M, x: &[f64]) -> Result<DMatrix<f64>> {
    let d = map.dim();
    if x.len() != d {
        return Err(Error::Shape(format!("x has dimension {}, expected {d}", x.len())));
    }
    let tape = Tape::new();
    let xs = tape.vars(x);
    let out = map.apply(&xs)?;
    let mut jac = DMatrix::zeros(d, d);
    for (i, &o) in out.iter().enumerate() {
        let adj = tape.backward(&[(o, 1.0)])?;
        for (j, v) in xs.iter().enumerate() {
            jac[(i, j)] = adj.wrt(v);
        }
    }
    Ok(jac)
}

/// `log |det J|` of `map` at `x` via LU with partial pivoting.
pub fn log_abs_det_jacobian<M: DiffMap>(map: &M, x: &[f64]) -> Result<f64> {
    if map.dim() > 4 {
        return Err(Error::Shape(format!("dense Jacobians are limited to d <= 4, got {}", map.dim())));
    }
    let lu = jacobian(map, x)?.lu();
    let u = lu.u();
    let log_det: f64 = (0..u.nrows()).map(|i| u[(i, i)].abs().ln()).sum();
    let det = lu.determinant();
    if !(log_det > 1e-300f64.ln()) || det == 0.0 || !log_det.is_finite() {
        return Err(Error::Singular { det });
    }
    Ok(log_det)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub r: f64,
    pub d: usize,
    pub term1: f64,
    pub term2: f64,
    pub term3_estimate: f64,
    pub samples: usize,
}

/// Closed-form terms `r^2 / 2` and `r * sqrt(d + 1)`.
pub fn bound_terms(r: f64, d: usize) -> (f64, f64) {
    (r * r / 2.0, r * ((d + 1) as f64).sqrt())
}

/// Monte-Carlo estimate of the log-det gap between teacher at `b` and student
/// at a point `a` drawn uniformly from the ball of radius `r * sigma_T`
/// around `b`.
pub fn estimate_bound<T: DiffMap, S: DiffMap>(
    teacher: &T,
    student: &S,
    sched: &NoiseSchedule,
    r: f64,
    n_samples: usize,
    seed: u64,
) -> Result<BoundReport> {
    let d = teacher.dim();
    if student.dim() != d {
        return Err(Error::Shape("teacher and student dimensions differ".into()));
    }
    if n_samples == 0 {
        return Err(Error::config("eval.bound_samples", "need at least one sample"));
    }
    if !(r >= 0.0) {
        return Err(Error::config("eval.r", "radius must be non-negative"));
    }
    let sigma_t = sched.sigma_max();
    let idx: Vec<usize> = (0..n_samples).collect();
    let gaps = par_map(&idx, |k| -> Result<f64> {
        let mut g = rng::stream(seed, rng::domain::BOUND, k as u64);
        let b = rng::normal_vec(&mut g, d, sigma_t);
        let dir = rng::normal_vec(&mut g, d, 1.0);
        let u: f64 = rand::Rng::random(&mut g);
        let norm = f64::norm(&dir).max(f64::MIN_POSITIVE);
        let rad = r * sigma_t * u.powf(1.0 / d as f64);
        let a: Vec<f64> = b.iter().zip(&dir).map(|(bi, di)| bi + rad * di / norm).collect();
        Ok((log_abs_det_jacobian(teacher, &b)? - log_abs_det_jacobian(student, &a)?).abs())
    });
    let mut total = 0.0;
    for g in gaps {
        total += g?;
    }
    let (term1, term2) = bound_terms(r, d);
    Ok(BoundReport {
        r,
        d,
        term1,
        term2,
        term3_estimate: total / n_samples as f64,
        samples: n_samples,
    })
}

/// `m[i][j]`: grid trained with solver `i`, evaluated with solver `j`.
/// Decoupled offsets only apply on the diagonal.
pub fn cross_eval<D: Denoiser>(
    grids: &[(SolverSpec, Discretization)],
    pairs: &[(Vec<f64>, Vec<f64>)],
    den: &D,
) -> Result<Vec<Vec<f64>>> {
    let n = grids.len();
    let cells: Vec<usize> = (0..n * n).collect();
    let vals = par_map(&cells, |c| {
        let (i, j) = (c / n, c % n);
        let (_, disc) = &grids[i];
        let (spec, _) = grids[j];
        if spec.nfe != disc.steps() {
            return Err(Error::Grid(format!(
                "grid {i} has {} steps but solver {j} runs {}",
                disc.steps(),
                spec.nfe
            )));
        }
        let times = disc.tau();
        let times_c = if i == j { disc.tau_c() } else { times.clone() };
        teacher_distance(den, spec, &times, &times_c, pairs)
    });
    let vals: Vec<f64> = vals.into_iter().collect::<Result<_>>()?;
    Ok(vals.chunks(n.max(1)).map(|r| r.to_vec()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Heuristic(Heuristic),
    Ld3,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Heuristic(h) => h.name(),
            Method::Ld3 => "ld3",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    /// Solver families with their orders; `nfe` is taken from `nfes`.
    pub solvers: Vec<(SolverFamily, usize)>,
    pub nfes: Vec<usize>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Teacher pairs generated per seed for training.
    pub count: usize,
    /// Fresh prior draws per seed for evaluation.
    pub n_eval: usize,
    pub teacher: TeacherSpec,
    /// Reference solver for RMSD.
    pub reference: TeacherSpec,
    pub train: TrainConfig,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            solvers: vec![(SolverFamily::Dpmpp, 2), (SolverFamily::Ipndm, 4)],
            nfes: vec![4, 6, 8],
            methods: Heuristic::ALL
                .iter()
                .map(|&h| Method::Heuristic(h))
                .chain([Method::Ld3])
                .collect(),
            seeds: (0..5).collect(),
            count: 100,
            n_eval: 200,
            teacher: TeacherSpec::default(),
            reference: TeacherSpec {
                solver: SolverSpec {
                    family: SolverFamily::Dpmpp,
                    order: 1,
                    nfe: 100,
                },
                grid: Heuristic::LogSnr,
            },
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub solver: String,
    pub nfe: usize,
    pub teacher_dist: f64,
    pub rmsd: f64,
    pub w1: f64,
    pub seed: u64,
}

pub const BENCH_HEADER: &str = "method,solver,nfe,teacher_dist,rmsd,w1,seed";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BENCH_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.method, r.solver, r.nfe, r.teacher_dist, r.rmsd, r.w1, r.seed
        ));
    }
    s
}

struct SeedData {
    dataset: Dataset,
    eval_x: Vec<Vec<f64>>,
    eval_pairs: Vec<(Vec<f64>, Vec<f64>)>,
    reference: Vec<Vec<f64>>,
    truth: Vec<Vec<f64>>,
}

/// Runs every `(seed, solver, nfe, method)` cell on a shared per-seed
/// evaluation set. W1 is measured against `data` samples when given,
/// otherwise against teacher outputs.
pub fn bench<D: Denoiser>(spec: &BenchSpec, den: &D, data: Option<&GaussianMixture>) -> Result<Vec<BenchRow>> {
    if spec.n_eval == 0 {
        return Err(Error::config("eval.n_eval", "need at least one evaluation sample"));
    }
    let sched = den.schedule();
    let d = den.dim();
    let seed_idx: Vec<usize> = (0..spec.seeds.len()).collect();
    let per_seed = par_map(&seed_idx, |s| -> Result<SeedData> {
        let seed = spec.seeds[s];
        let dataset = generate_dataset(den, &spec.teacher, spec.count, seed)?;
        let eval_x = sched.sample_prior(rng::mix(seed, rng::domain::EVAL), spec.n_eval, d);
        let teacher = GridMap::teacher(den, &spec.teacher)?;
        let refmap = GridMap::teacher(den, &spec.reference)?;
        let mut eval_pairs = Vec::with_capacity(spec.n_eval);
        let mut reference = Vec::with_capacity(spec.n_eval);
        for x in &eval_x {
            eval_pairs.push((x.clone(), teacher.apply(x)?));
            reference.push(refmap.apply(x)?);
        }
        let truth = match data {
            Some(gm) => gm.samples(rng::mix(seed, rng::domain::DATA), spec.n_eval),
            None => eval_pairs.iter().map(|p| p.1.clone()).collect(),
        };
        Ok(SeedData {
            dataset,
            eval_x,
            eval_pairs,
            reference,
            truth,
        })
    });
    let per_seed: Vec<SeedData> = per_seed.into_iter().collect::<Result<_>>()?;

    let mut cells = Vec::new();
    for s in 0..spec.seeds.len() {
        for &(family, order) in &spec.solvers {
            for &nfe in &spec.nfes {
                for &m in &spec.methods {
                    cells.push((s, SolverSpec::new(family, order, nfe)?, m));
                }
            }
        }
    }
    let idx: Vec<usize> = (0..cells.len()).collect();
    let rows = par_map(&idx, |c| -> Result<BenchRow> {
        let (s, solver, method) = cells[c];
        let sd = &per_seed[s];
        let (times, times_c) = match method {
            Method::Heuristic(h) => {
                let t = heuristic_times(h, solver.nfe, sched)?;
                (t.clone(), t)
            }
            Method::Ld3 => {
                let mut ds = sd.dataset.clone();
                let cfg = TrainConfig {
                    seed: spec.seeds[s],
                    ..spec.train.clone()
                };
                let rep = train(&cfg, &mut ds, den, solver)?;
                (rep.best.tau(), rep.best.tau_c())
            }
        };
        let map = GridMap::new(den, solver, times, times_c)?;
        let outs: Vec<Vec<f64>> = sd.eval_x.iter().map(|x| map.apply(x)).collect::<Result<_>>()?;
        let teacher_dist = outs
            .iter()
            .zip(&sd.eval_pairs)
            .map(|(o, p)| distance(o, &p.1))
            .sum::<f64>()
            / outs.len() as f64;
        Ok(BenchRow {
            method: method.name().to_string(),
            solver: format!("{}{}", solver.family, solver.order),
            nfe: solver.nfe,
            teacher_dist,
            rmsd: rmsd(&outs, &sd.reference)?,
            w1: w1_1d(&outs, &sd.truth)?,
            seed: spec.seeds[s],
        })
    });
    rows.into_iter().collect()
}
