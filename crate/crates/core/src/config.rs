//! Run configuration in a flat `key = value` text format.
//!
//! Lines are `dotted.key = value`; `#` starts a comment. Every key has a
//! default, unknown keys are errors, and [`RunConfig::to_text`] writes the
//! full effective configuration so a snapshot reproduces the run.

use std::fmt::Display;
use std::str::FromStr;

use crate::denoiser::{train_mlp_dsm, AnyDenoiser, DsmWeight, GaussianMixture, GmDenoiser, MlpConfig, PointDenoiser};
use crate::discretize::Heuristic;
use crate::error::{Error, Result};
use crate::eval::{BenchSpec, Method};
use crate::ld3::{GradMode, TrainConfig};
use crate::schedule::{NoiseSchedule, ScheduleFamily};
use crate::solvers::{SolverFamily, SolverSpec, TeacherSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Gm,
    Point,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiserKind {
    Analytic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub schedule: NoiseSchedule,

    pub data_kind: DataKind,
    pub data_d: usize,
    pub data_weights: Vec<f64>,
    /// Flattened, `d` values per component. For point data, the point.
    pub data_means: Vec<f64>,
    pub data_vars: Vec<f64>,

    pub denoiser: DenoiserKind,
    pub mlp_hidden_layers: usize,
    pub mlp_width: usize,
    pub mlp_n_freq: usize,
    pub mlp_steps: usize,
    pub mlp_batch: usize,
    pub mlp_lr: f64,
    pub mlp_weight: DsmWeight,

    pub solver: SolverSpec,
    pub teacher: TeacherSpec,

    pub count: usize,
    pub train: TrainConfig,

    pub eval_solvers: Vec<(SolverFamily, usize)>,
    pub eval_nfes: Vec<usize>,
    pub eval_methods: Vec<Method>,
    pub eval_seeds: Vec<u64>,
    pub eval_n_eval: usize,
    pub eval_reference_nfe: usize,
    pub eval_r_values: Vec<f64>,
    pub eval_bound_r: f64,
    pub eval_bound_samples: usize,
    pub eval_cross_families: Vec<SolverFamily>,

    pub seed: u64,
    pub out: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gm = GaussianMixture::default_2d();
        let bench = BenchSpec::default();
        let mlp = MlpConfig::default();
        RunConfig {
            schedule: NoiseSchedule::ve_edm(),
            data_kind: DataKind::Gm,
            data_d: 2,
            data_weights: gm.components().iter().map(|c| c.weight).collect(),
            data_means: gm.components().iter().flat_map(|c| c.mean.clone()).collect(),
            data_vars: gm.components().iter().map(|c| c.var).collect(),
            denoiser: DenoiserKind::Analytic,
            mlp_hidden_layers: mlp.hidden_layers,
            mlp_width: mlp.width,
            mlp_n_freq: mlp.n_freq,
            mlp_steps: mlp.steps,
            mlp_batch: mlp.batch,
            mlp_lr: mlp.lr,
            mlp_weight: mlp.weight,
            solver: SolverSpec {
                family: SolverFamily::Dpmpp,
                order: 2,
                nfe: 4,
            },
            teacher: TeacherSpec::default(),
            count: 100,
            train: TrainConfig::default(),
            eval_solvers: bench.solvers,
            eval_nfes: bench.nfes,
            eval_methods: bench.methods,
            eval_seeds: bench.seeds,
            eval_n_eval: bench.n_eval,
            eval_reference_nfe: bench.reference.solver.nfe,
            eval_r_values: vec![0.0, 0.01, 0.1, 1.0, 5.0],
            eval_bound_r: 0.1,
            eval_bound_samples: 100,
            eval_cross_families: vec![SolverFamily::Dpmpp, SolverFamily::Euler],
            seed: 0,
            out: "out".into(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.trim()
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt_f64(key: &str, v: &str) -> Result<Option<f64>> {
    match v.trim() {
        "auto" | "" => Ok(None),
        s => parse(key, s).map(Some),
    }
}

fn show_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "auto".into(), |x| x.to_string())
}

fn parse_order(key: &str, v: &str, family: SolverFamily) -> Result<usize> {
    match v.trim() {
        "auto" | "0" => Ok(family.default_order()),
        s => parse(key, s),
    }
}

fn solver_entry(key: &str, s: &str) -> Result<(SolverFamily, usize)> {
    match s.split_once(':') {
        Some((f, o)) => {
            let fam: SolverFamily = f.parse()?;
            Ok((fam, parse_order(key, o, fam)?))
        }
        None => {
            let fam: SolverFamily = s.parse()?;
            Ok((fam, fam.default_order()))
        }
    }
}

fn method_entry(s: &str) -> Result<Method> {
    match s.trim() {
        "ld3" => Ok(Method::Ld3),
        other => other
            .parse::<Heuristic>()
            .map(Method::Heuristic)
            .map_err(|_| Error::config("eval.methods", format!("unknown method `{other}`"))),
    }
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected `key = value`", lineno + 1)))?;
            entries.push((k.trim(), v.trim()));
        }
        // Families reset their dependent keys, so they go first and orders last.
        let rank = |k: &str| match k {
            "schedule.family" | "solver.family" | "teacher.family" => 0,
            "solver.order" | "teacher.order" => 2,
            _ => 1,
        };
        entries.sort_by_key(|(k, _)| rank(k));
        let mut cfg = RunConfig::default();
        for (k, v) in entries {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        let t = &mut self.train;
        match k {
            "schedule.family" => {
                self.schedule = match v {
                    "ve_edm" | "ve" => NoiseSchedule::ve_edm(),
                    "vp_linear" | "vp" => NoiseSchedule::vp_linear(),
                    other => return Err(Error::config(k, format!("unknown schedule `{other}`"))),
                }
            }
            "schedule.T" => self.schedule.t_max = parse(k, v)?,
            "schedule.t_min" => self.schedule.t_min = parse(k, v)?,
            "schedule.beta_0" | "schedule.beta_1" => match &mut self.schedule.family {
                ScheduleFamily::VpLinear { beta_0, beta_1 } => {
                    let slot = if k.ends_with('0') { beta_0 } else { beta_1 };
                    *slot = parse(k, v)?;
                }
                ScheduleFamily::VeEdm => {
                    return Err(Error::config(k, "only meaningful for schedule.family = vp_linear"))
                }
            },
            "data.kind" => {
                self.data_kind = match v {
                    "gm" => DataKind::Gm,
                    "point" => DataKind::Point,
                    other => return Err(Error::config(k, format!("unknown data kind `{other}`"))),
                }
            }
            "data.d" => self.data_d = parse(k, v)?,
            "data.weights" => self.data_weights = parse_list(k, v)?,
            "data.means" => self.data_means = parse_list(k, v)?,
            "data.vars" => self.data_vars = parse_list(k, v)?,
            "denoiser.kind" => {
                self.denoiser = match v {
                    "analytic" => DenoiserKind::Analytic,
                    "mlp" => DenoiserKind::Mlp,
                    other => return Err(Error::config(k, format!("unknown denoiser `{other}`"))),
                }
            }
            "mlp.hidden_layers" => self.mlp_hidden_layers = parse(k, v)?,
            "mlp.width" => self.mlp_width = parse(k, v)?,
            "mlp.n_freq" => self.mlp_n_freq = parse(k, v)?,
            "mlp.steps" => self.mlp_steps = parse(k, v)?,
            "mlp.batch" => self.mlp_batch = parse(k, v)?,
            "mlp.lr" => self.mlp_lr = parse(k, v)?,
            "mlp.weight" => {
                self.mlp_weight = match v {
                    "unit" => DsmWeight::Unit,
                    "sigma2" => DsmWeight::SigmaSquared,
                    other => return Err(Error::config(k, format!("unknown weighting `{other}`"))),
                }
            }
            "solver.family" => {
                self.solver.family = v.parse()?;
                self.solver.order = self.solver.family.default_order();
            }
            "solver.order" => self.solver.order = parse_order(k, v, self.solver.family)?,
            "solver.nfe" => self.solver.nfe = parse(k, v)?,
            "teacher.family" => {
                self.teacher.solver.family = v.parse()?;
                self.teacher.solver.order = self.teacher.solver.family.default_order();
            }
            "teacher.order" => self.teacher.solver.order = parse_order(k, v, self.teacher.solver.family)?,
            "teacher.nfe" => self.teacher.solver.nfe = parse(k, v)?,
            "teacher.grid" => self.teacher.grid = v.parse()?,
            "train.count" => self.count = parse(k, v)?,
            "train.gamma" => t.gamma = parse(k, v)?,
            "train.r" => t.r_override = opt_f64(k, v)?,
            "train.epochs_phase1" => t.epochs_phase1 = parse(k, v)?,
            "train.epochs_phase2" => t.epochs_phase2 = parse(k, v)?,
            "train.batch" => t.batch = parse(k, v)?,
            "train.lr_xi" => t.lr_xi = parse(k, v)?,
            "train.lr_xic" => t.lr_xi_c = opt_f64(k, v)?,
            "train.lr_xprime" => t.lr_x_prime = opt_f64(k, v)?,
            "train.momentum" => t.momentum = parse(k, v)?,
            "train.clip" => t.clip = parse(k, v)?,
            "train.decay" => t.decay = parse(k, v)?,
            "train.patience" => t.patience = parse(k, v)?,
            "train.floor_xi" => t.floor_xi = parse(k, v)?,
            "train.floor_xic" => t.floor_xi_c = parse(k, v)?,
            "train.val_steps" => t.val_steps = parse(k, v)?,
            "train.init" => t.init = parse_list(k, v)?,
            "train.grad_mode" => {
                t.grad_mode = match v {
                    "checkpointed" => GradMode::Checkpointed,
                    "whole_tape" => GradMode::WholeTape,
                    other => return Err(Error::config(k, format!("unknown gradient mode `{other}`"))),
                }
            }
            "train.wall_clock" => t.record_wall_clock = parse(k, v)?,
            "eval.solvers" => {
                self.eval_solvers = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| solver_entry(k, s))
                    .collect::<Result<_>>()?
            }
            "eval.nfes" => self.eval_nfes = parse_list(k, v)?,
            "eval.methods" => {
                self.eval_methods = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(method_entry)
                    .collect::<Result<_>>()?
            }
            "eval.seeds" => self.eval_seeds = parse_list(k, v)?,
            "eval.n_eval" => self.eval_n_eval = parse(k, v)?,
            "eval.reference_nfe" => self.eval_reference_nfe = parse(k, v)?,
            "eval.r_values" => self.eval_r_values = parse_list(k, v)?,
            "eval.bound_r" => self.eval_bound_r = parse(k, v)?,
            "eval.bound_samples" => self.eval_bound_samples = parse(k, v)?,
            "eval.cross_families" => self.eval_cross_families = parse_list(k, v)?,
            "seed" => self.seed = parse(k, v)?,
            "out" => self.out = v.to_string(),
            _ => return Err(Error::config(k, "unknown key")),
        }
        Ok(())
    }

    /// Checks cross-key consistency.
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        NoiseSchedule::new(s.family, s.t_max, s.t_min).map_err(|e| Error::config("schedule", e.to_string()))?;
        let d = self.data_d;
        if d == 0 {
            return Err(Error::config("data.d", "dimension must be at least 1"));
        }
        match self.data_kind {
            DataKind::Gm => {
                self.mixture()?;
            }
            DataKind::Point => {
                if self.data_means.len() != d {
                    return Err(Error::config("data.means", format!("point data needs exactly {d} values")));
                }
            }
        }
        SolverSpec::new(self.solver.family, self.solver.order, self.solver.nfe)
            .map_err(|e| Error::config("solver", e.to_string()))?;
        let ts = self.teacher.solver;
        SolverSpec::new(ts.family, ts.order, ts.nfe).map_err(|e| Error::config("teacher", e.to_string()))?;
        if ts.nfe < self.solver.nfe {
            return Err(Error::config("teacher.nfe", "teacher NFE must be at least the student NFE"));
        }
        if self.count < 2 {
            return Err(Error::config("train.count", "need at least two pairs"));
        }
        if self.train.init.is_empty() {
            return Err(Error::config("train.init", "need at least one candidate"));
        }
        for &(f, o) in &self.eval_solvers {
            if o == 0 || o > f.max_order() {
                return Err(Error::config("eval.solvers", format!("order {o} invalid for {f}")));
            }
        }
        if self.eval_nfes.contains(&0) {
            return Err(Error::config("eval.nfes", "NFE must be at least 1"));
        }
        Ok(())
    }

    pub fn mixture(&self) -> Result<GaussianMixture> {
        let d = self.data_d;
        let k = self.data_weights.len();
        if k == 0 || self.data_means.len() != k * d || self.data_vars.len() != k {
            return Err(Error::config(
                "data.means",
                format!(
                    "{k} weights need {} mean values and {k} variances, got {} and {}",
                    k * d,
                    self.data_means.len(),
                    self.data_vars.len()
                ),
            ));
        }
        let means: Vec<Vec<f64>> = self.data_means.chunks(d).map(<[f64]>::to_vec).collect();
        GaussianMixture::from_parts(&self.data_weights, &means, &self.data_vars)
            .map_err(|e| Error::config("data", e.to_string()))
    }

    pub fn mlp_config(&self) -> MlpConfig {
        MlpConfig {
            hidden_layers: self.mlp_hidden_layers,
            width: self.mlp_width,
            n_freq: self.mlp_n_freq,
            steps: self.mlp_steps,
            batch: self.mlp_batch,
            lr: self.mlp_lr,
            seed: self.seed,
            weight: self.mlp_weight,
        }
    }

    /// The denoiser this run uses. An MLP is fitted to the configured mixture.
    pub fn denoiser(&self) -> Result<AnyDenoiser> {
        let sched = self.schedule;
        match (self.data_kind, self.denoiser) {
            (DataKind::Point, DenoiserKind::Analytic) => Ok(AnyDenoiser::Point(PointDenoiser {
                x0: self.data_means.clone(),
                sched,
            })),
            (DataKind::Gm, DenoiserKind::Analytic) => Ok(AnyDenoiser::Gm(GmDenoiser {
                gm: self.mixture()?,
                sched,
            })),
            (DataKind::Gm, DenoiserKind::Mlp) => {
                let fit = train_mlp_dsm(&self.mixture()?, &sched, &self.mlp_config())?;
                Ok(AnyDenoiser::Mlp(fit.model))
            }
            (DataKind::Point, DenoiserKind::Mlp) => Err(Error::config(
                "denoiser.kind",
                "the MLP denoiser is fitted to mixture data; use data.kind = gm",
            )),
        }
    }

    pub fn bench_spec(&self) -> BenchSpec {
        let mut reference = BenchSpec::default().reference;
        reference.solver.nfe = self.eval_reference_nfe;
        BenchSpec {
            solvers: self.eval_solvers.clone(),
            nfes: self.eval_nfes.clone(),
            methods: self.eval_methods.clone(),
            seeds: self.eval_seeds.clone(),
            count: self.count,
            n_eval: self.eval_n_eval,
            teacher: self.teacher,
            reference,
            train: TrainConfig {
                seed: self.seed,
                ..self.train.clone()
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Every key with its effective value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.schedule;
        let t = &self.train;
        let mut e: Vec<(&'static str, String)> = vec![(
            "schedule.family",
            match s.family {
                ScheduleFamily::VeEdm => "ve_edm".into(),
                ScheduleFamily::VpLinear { .. } => "vp_linear".into(),
            },
        )];
        e.push(("schedule.T", s.t_max.to_string()));
        e.push(("schedule.t_min", s.t_min.to_string()));
        if let ScheduleFamily::VpLinear { beta_0, beta_1 } = s.family {
            e.push(("schedule.beta_0", beta_0.to_string()));
            e.push(("schedule.beta_1", beta_1.to_string()));
        }
        e.extend([
            (
                "data.kind",
                match self.data_kind {
                    DataKind::Gm => "gm".into(),
                    DataKind::Point => "point".into(),
                },
            ),
            ("data.d", self.data_d.to_string()),
            ("data.weights", join(&self.data_weights)),
            ("data.means", join(&self.data_means)),
            ("data.vars", join(&self.data_vars)),
            (
                "denoiser.kind",
                match self.denoiser {
                    DenoiserKind::Analytic => "analytic".into(),
                    DenoiserKind::Mlp => "mlp".into(),
                },
            ),
            ("mlp.hidden_layers", self.mlp_hidden_layers.to_string()),
            ("mlp.width", self.mlp_width.to_string()),
            ("mlp.n_freq", self.mlp_n_freq.to_string()),
            ("mlp.steps", self.mlp_steps.to_string()),
            ("mlp.batch", self.mlp_batch.to_string()),
            ("mlp.lr", self.mlp_lr.to_string()),
            (
                "mlp.weight",
                match self.mlp_weight {
                    DsmWeight::Unit => "unit".into(),
                    DsmWeight::SigmaSquared => "sigma2".into(),
                },
            ),
            ("solver.family", self.solver.family.to_string()),
            ("solver.order", self.solver.order.to_string()),
            ("solver.nfe", self.solver.nfe.to_string()),
            ("teacher.family", self.teacher.solver.family.to_string()),
            ("teacher.order", self.teacher.solver.order.to_string()),
            ("teacher.nfe", self.teacher.solver.nfe.to_string()),
            ("teacher.grid", self.teacher.grid.to_string()),
            ("train.count", self.count.to_string()),
            ("train.gamma", t.gamma.to_string()),
            ("train.r", show_opt(t.r_override)),
            ("train.epochs_phase1", t.epochs_phase1.to_string()),
            ("train.epochs_phase2", t.epochs_phase2.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.lr_xi", t.lr_xi.to_string()),
            ("train.lr_xic", show_opt(t.lr_xi_c)),
            ("train.lr_xprime", show_opt(t.lr_x_prime)),
            ("train.momentum", t.momentum.to_string()),
            ("train.clip", t.clip.to_string()),
            ("train.decay", t.decay.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.floor_xi", t.floor_xi.to_string()),
            ("train.floor_xic", t.floor_xi_c.to_string()),
            ("train.val_steps", t.val_steps.to_string()),
            ("train.init", join(&t.init)),
            (
                "train.grad_mode",
                match t.grad_mode {
                    GradMode::Checkpointed => "checkpointed".into(),
                    GradMode::WholeTape => "whole_tape".into(),
                },
            ),
            ("train.wall_clock", t.record_wall_clock.to_string()),
            (
                "eval.solvers",
                self.eval_solvers
                    .iter()
                    .map(|(f, o)| format!("{f}:{o}"))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("eval.nfes", join(&self.eval_nfes)),
            (
                "eval.methods",
                self.eval_methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
            ),
            ("eval.seeds", join(&self.eval_seeds)),
            ("eval.n_eval", self.eval_n_eval.to_string()),
            ("eval.reference_nfe", self.eval_reference_nfe.to_string()),
            ("eval.r_values", join(&self.eval_r_values)),
            ("eval.bound_r", self.eval_bound_r.to_string()),
            ("eval.bound_samples", self.eval_bound_samples.to_string()),
            ("eval.cross_families", join(&self.eval_cross_families)),
            ("seed", self.seed.to_string()),
            ("out", self.out.clone()),
        ]);
        e
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
