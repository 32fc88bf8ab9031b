//! Diffusion-ODE solvers over arbitrary decreasing time grids.
//!
//! Step sizes come from `times`; the denoiser is queried at the decoupled
//! `times_c`. With `N = nfe` steps the denoiser is called exactly `N` times,
//! at indices `0..N`.

use std::fmt;
use std::str::FromStr;

use crate::denoiser::Denoiser;
use crate::diff::{Real, SegmentedMap};
use crate::discretize::{heuristic_times, Heuristic};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverFamily {
    /// Explicit Euler on the probability-flow ODE in `t`.
    Euler,
    /// Data-prediction exponential integrator (order 1 is DDIM, order 2 is 2M).
    Dpmpp,
    /// Noise-prediction exponential integrator with Adams-Bashforth history.
    Ipndm,
}

impl SolverFamily {
    pub fn max_order(self) -> usize {
        match self {
            SolverFamily::Euler => 1,
            SolverFamily::Dpmpp => 2,
            SolverFamily::Ipndm => 4,
        }
    }

    pub fn default_order(self) -> usize {
        self.max_order()
    }

    pub fn name(self) -> &'static str {
        match self {
            SolverFamily::Euler => "euler",
            SolverFamily::Dpmpp => "dpmpp",
            SolverFamily::Ipndm => "ipndm",
        }
    }
}

impl fmt::Display for SolverFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "euler" => Ok(SolverFamily::Euler),
            "dpmpp" | "dpm++" | "dpm_solver++" => Ok(SolverFamily::Dpmpp),
            "ipndm" => Ok(SolverFamily::Ipndm),
            other => Err(Error::config("solver.family", format!("unknown solver family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SolverSpec {
    pub family: SolverFamily,
    pub order: usize,
    pub nfe: usize,
}

impl SolverSpec {
    pub fn new(family: SolverFamily, order: usize, nfe: usize) -> Result<Self> {
        if order == 0 || order > family.max_order() {
            return Err(Error::config(
                "solver.order",
                format!("{family} supports orders 1..={}, got {order}", family.max_order()),
            ));
        }
        if nfe == 0 {
            return Err(Error::config("solver.nfe", "NFE must be at least 1"));
        }
        Ok(SolverSpec { family, order, nfe })
    }

    /// Family at its default order.
    pub fn with_default_order(family: SolverFamily, nfe: usize) -> Result<Self> {
        Self::new(family, family.default_order(), nfe)
    }

    /// Size of the per-step history buffer entering step `i`.
    fn history_len(&self, i: usize) -> usize {
        match self.family {
            SolverFamily::Euler => 0,
            SolverFamily::Dpmpp => (self.order - 1).min(i),
            SolverFamily::Ipndm => (self.order - 1).min(i),
        }
    }
}

/// High-NFE reference solver on a heuristic grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherSpec {
    pub solver: SolverSpec,
    pub grid: Heuristic,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        TeacherSpec {
            solver: SolverSpec {
                family: SolverFamily::Dpmpp,
                order: 2,
                nfe: 100,
            },
            grid: Heuristic::LogSnr,
        }
    }
}

/// Adams-Bashforth weights for effective orders 1 to 4, newest first.
const AB_COEFFS: [&[f64]; 4] = [
    &[1.0],
    &[1.5, -0.5],
    &[23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0],
    &[55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0],
];

/// One solver run as a chain of steps over the state `[x | history]`.
///
/// Global parameters are `[times (N+1) | times_c (N+1)]`.
pub struct SolverMap<'a, D> {
    pub den: &'a D,
    pub spec: SolverSpec,
}

impl<'a, D: Denoiser> SolverMap<'a, D> {
    pub fn new(den: &'a D, spec: SolverSpec) -> Self {
        SolverMap { den, spec }
    }

    pub fn pack_params(times: &[f64], times_c: &[f64]) -> Vec<f64> {
        times.iter().chain(times_c).copied().collect()
    }
}

impl<D: Denoiser> SegmentedMap for SolverMap<'_, D> {
    fn steps(&self) -> usize {
        self.spec.nfe
    }

    fn step_params(&self, i: usize) -> Vec<usize> {
        let n = self.spec.nfe;
        if i == 0 {
            vec![0, 1, n + 1]
        } else {
            vec![i - 1, i, i + 1, n + 1 + i]
        }
    }

    fn step<S: Real>(&self, i: usize, p: &[S], state: &[S]) -> Result<Vec<S>> {
        let (t_prev, t, t_next, tc) = if i == 0 {
            (None, p[0], p[1], p[2])
        } else {
            (Some(p[0]), p[1], p[2], p[3])
        };
        let d = self.den.dim();
        let x = &state[..d];
        let hist: Vec<&[S]> = state[d..].chunks(d).collect();
        let sched = self.den.schedule();
        let eps = self.den.epsilon(x, tc);

        let (x_next, new_hist): (Vec<S>, Vec<Vec<S>>) = match self.spec.family {
            SolverFamily::Euler => {
                let (f, g2) = sched.drift_of(t);
                let (_, s) = sched.coeffs_of(t);
                let k = g2 / (s * S::from(2.0));
                let dt = t_next - t;
                let xn = x
                    .iter()
                    .zip(&eps)
                    .map(|(&xi, &e)| xi + dt * (f * xi + k * e))
                    .collect();
                (xn, Vec::new())
            }
            SolverFamily::Dpmpp => {
                let (a, s) = sched.coeffs_of(t);
                let (an, sn) = sched.coeffs_of(t_next);
                let lam = sched.lambda_of(t);
                let h = sched.lambda_of(t_next) - lam;
                let x0: Vec<S> = x.iter().zip(&eps).map(|(&xi, &e)| (xi - s * e) / a).collect();
                let dir: Vec<S> = match (hist.first(), t_prev) {
                    (Some(prev), Some(tp)) if self.spec.order >= 2 => {
                        let h_prev = lam - sched.lambda_of(tp);
                        let c = S::from(1.0) / ((h_prev / h) * S::from(2.0));
                        x0.iter()
                            .zip(prev.iter())
                            .map(|(&cur, &old)| (S::from(1.0) + c) * cur - c * old)
                            .collect()
                    }
                    _ => x0.clone(),
                };
                let ratio = sn / s;
                let coef = an * (-h).exp_m1();
                let xn = x.iter().zip(&dir).map(|(&xi, &di)| ratio * xi - coef * di).collect();
                let keep = if self.spec.order >= 2 { vec![x0] } else { Vec::new() };
                (xn, keep)
            }
            SolverFamily::Ipndm => {
                let (a, _) = sched.coeffs_of(t);
                let (an, sn) = sched.coeffs_of(t_next);
                let h = sched.lambda_of(t_next) - sched.lambda_of(t);
                let k = (hist.len() + 1).min(self.spec.order);
                let w = AB_COEFFS[k - 1];
                let eps_bar: Vec<S> = (0..d)
                    .map(|j| {
                        let mut acc = S::from(w[0]) * eps[j];
                        for (m, past) in hist.iter().take(k - 1).enumerate() {
                            acc = acc + S::from(w[m + 1]) * past[j];
                        }
                        acc
                    })
                    .collect();
                let ratio = an / a;
                let coef = sn * h.exp_m1();
                let xn = x.iter().zip(&eps_bar).map(|(&xi, &e)| ratio * xi - coef * e).collect();
                let mut keep = vec![eps];
                keep.extend(hist.iter().take(self.spec.order - 1).map(|h| h.to_vec()));
                keep.truncate(self.spec.order - 1);
                (xn, keep)
            }
        };

        if x_next.iter().any(|v| !v.value().is_finite()) {
            return Err(Error::Divergence { step: i });
        }
        let mut out = x_next;
        debug_assert_eq!(new_hist.len(), self.spec.history_len(i + 1));
        for h in new_hist {
            out.extend(h);
        }
        Ok(out)
    }
}

/// Checks a (times, times_c) pair against the schedule and step count.
pub fn validate_grid(
    sched: &crate::schedule::NoiseSchedule,
    nfe: usize,
    times: &[f64],
    times_c: &[f64],
) -> Result<()> {
    if times.len() != nfe + 1 || times_c.len() != nfe + 1 {
        return Err(Error::Grid(format!(
            "expected {} times for NFE {nfe}, got {} and {}",
            nfe + 1,
            times.len(),
            times_c.len()
        )));
    }
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs();
    if !close(times[0], sched.t_max) || !close(times[nfe], sched.t_min) {
        return Err(Error::Grid(format!(
            "grid must run from T={} to t_min={}, got {} .. {}",
            sched.t_max, sched.t_min, times[0], times[nfe]
        )));
    }
    if let Some(i) = (0..nfe).find(|&i| !(times[i + 1] < times[i])) {
        return Err(Error::Grid(format!("times not strictly decreasing at index {i}")));
    }
    if let Some(i) = times_c.iter().position(|&t| !(t >= sched.t_min && t <= sched.t_max)) {
        return Err(Error::Grid(format!("times_c[{i}] = {} outside [t_min, T]", times_c[i])));
    }
    Ok(())
}

/// Runs the solver on values of any scalar type; grid validity is the
/// caller's responsibility.
pub fn solve_with<S: Real, D: Denoiser>(
    den: &D,
    spec: SolverSpec,
    times: &[S],
    times_c: &[S],
    x_t: &[S],
) -> Result<Vec<S>> {
    let map = SolverMap::new(den, spec);
    let params: Vec<S> = times.iter().chain(times_c).copied().collect();
    let mut state = x_t.to_vec();
    for i in 0..spec.nfe {
        let p: Vec<S> = map.step_params(i).iter().map(|&k| params[k]).collect();
        state = map.step(i, &p, &state)?;
    }
    state.truncate(den.dim());
    Ok(state)
}

/// Solves from `x_t` at `times[0] = T` down to `times[N] = t_min`.
pub fn solve<D: Denoiser>(
    den: &D,
    spec: SolverSpec,
    times: &[f64],
    times_c: &[f64],
    x_t: &[f64],
) -> Result<Vec<f64>> {
    validate_grid(den.schedule(), spec.nfe, times, times_c)?;
    if x_t.len() != den.dim() {
        return Err(Error::Shape(format!("x_T has dimension {}, expected {}", x_t.len(), den.dim())));
    }
    solve_with(den, spec, times, times_c, x_t)
}

/// Like [`solve`], returning every intermediate `x_{t_i}`.
pub fn solve_trajectory<D: Denoiser>(
    den: &D,
    spec: SolverSpec,
    times: &[f64],
    times_c: &[f64],
    x_t: &[f64],
) -> Result<Vec<Vec<f64>>> {
    validate_grid(den.schedule(), spec.nfe, times, times_c)?;
    let d = den.dim();
    let map = SolverMap::new(den, spec);
    let params = SolverMap::<D>::pack_params(times, times_c);
    let mut state = x_t.to_vec();
    let mut path = vec![state.clone()];
    for i in 0..spec.nfe {
        let p: Vec<f64> = map.step_params(i).iter().map(|&k| params[k]).collect();
        state = map.step(i, &p, &state)?;
        path.push(state[..d].to_vec());
    }
    Ok(path)
}

pub fn teacher_solve<D: Denoiser>(den: &D, teacher: &TeacherSpec, x_t: &[f64]) -> Result<Vec<f64>> {
    let times = heuristic_times(teacher.grid, teacher.solver.nfe, den.schedule())?;
    solve(den, teacher.solver, &times, &times, x_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{GaussianMixture, GmDenoiser, PointDenoiser};
    use crate::schedule::NoiseSchedule;

    fn point() -> PointDenoiser {
        PointDenoiser {
            x0: vec![1.0, -1.0],
            sched: NoiseSchedule::ve_edm(),
        }
    }

    fn gm() -> GmDenoiser {
        GmDenoiser {
            gm: GaussianMixture::default_2d(),
            sched: NoiseSchedule::ve_edm(),
        }
    }

    fn rms(a: &[f64], b: &[f64]) -> f64 {
        (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
    }

    #[test]
    fn ddim_one_step_is_exact_on_point_mass() {
        let den = point();
        let spec = SolverSpec::new(SolverFamily::Dpmpp, 1, 1).unwrap();
        let times = [80.0, 0.002];
        let out = solve(&den, spec, &times, &times, &[8.0, -8.0]).unwrap();
        assert!((out[0] - 1.000175).abs() < 1e-12);
        assert!((out[1] + 1.000175).abs() < 1e-12);
    }

    #[test]
    fn all_exponential_solvers_exact_on_point_mass() {
        let den = point();
        let xt = [30.0, 55.0];
        let want: Vec<f64> = den
            .x0
            .iter()
            .zip(&xt)
            .map(|(m, x)| m + (0.002 / 80.0) * (x - m))
            .collect();
        for (family, order) in [(SolverFamily::Dpmpp, 1), (SolverFamily::Dpmpp, 2), (SolverFamily::Ipndm, 4), (SolverFamily::Euler, 1)] {
            let spec = SolverSpec::new(family, order, 7).unwrap();
            let times = heuristic_times(Heuristic::Edm, 7, &den.sched).unwrap();
            let out = solve(&den, spec, &times, &times, &xt).unwrap();
            assert!(rms(&out, &want) < 1e-10, "{family} order {order}");
        }
    }

    #[test]
    fn single_gaussian_linear_ode() {
        // x(t) = mu + sqrt((s^2 + t^2) / (s^2 + T^2)) (x_T - mu) under VE.
        let mu = vec![0.5, -0.3];
        let var = 0.25;
        let den = GmDenoiser {
            gm: GaussianMixture::from_parts(&[1.0], std::slice::from_ref(&mu), &[var]).unwrap(),
            sched: NoiseSchedule::ve_edm(),
        };
        let teacher = |nfe| TeacherSpec {
            solver: SolverSpec::new(SolverFamily::Dpmpp, 2, nfe).unwrap(),
            grid: Heuristic::LogSnr,
        };
        // Starting at the mean stays at the mean.
        let out = teacher_solve(&den, &teacher(400), &mu).unwrap();
        assert!(rms(&out, &mu) < 1e-8, "{out:?}");

        // Off the mean the error against the closed form falls at second order.
        let xt = [40.0, -70.0];
        let scale = ((var + 0.002f64.powi(2)) / (var + 6400.0)).sqrt();
        let want: Vec<f64> = mu.iter().zip(&xt).map(|(m, x)| m + scale * (x - m)).collect();
        let e200 = rms(&teacher_solve(&den, &teacher(200), &xt).unwrap(), &want);
        let e400 = rms(&teacher_solve(&den, &teacher(400), &xt).unwrap(), &want);
        assert!(e400 < 1e-4, "{e400}");
        assert!((3.5..4.5).contains(&(e200 / e400)), "{e200} / {e400}");
    }

    #[test]
    fn teacher_self_convergence() {
        let den = gm();
        let xs = den.sched.sample_prior(5, 20, 2);
        let t100 = TeacherSpec::default();
        let t400 = TeacherSpec {
            solver: SolverSpec { nfe: 400, ..t100.solver },
            ..t100
        };
        let mut worst: f64 = 0.0;
        let mut total = 0.0;
        for x in &xs {
            let a = teacher_solve(&den, &t100, x).unwrap();
            let b = teacher_solve(&den, &t400, x).unwrap();
            total += rms(&a, &b).powi(2);
            worst = worst.max(rms(&a, &b));
        }
        let overall = (total / xs.len() as f64).sqrt();
        assert!(overall <= 1e-4, "rms {overall}, worst {worst}");
        assert_eq!(teacher_solve(&den, &t100, &xs[0]).unwrap(), teacher_solve(&den, &t100, &xs[0]).unwrap());
    }

    #[test]
    fn teacher_equals_student_on_same_grid() {
        let den = gm();
        let t = TeacherSpec::default();
        let times = heuristic_times(t.grid, t.solver.nfe, &den.sched).unwrap();
        let x = [10.0, -3.0];
        assert_eq!(teacher_solve(&den, &t, &x).unwrap(), solve(&den, t.solver, &times, &times, &x).unwrap());
    }

    #[test]
    fn euler_first_order() {
        let den = gm();
        let teacher = TeacherSpec {
            solver: SolverSpec::new(SolverFamily::Dpmpp, 2, 400).unwrap(),
            grid: Heuristic::LogSnr,
        };
        let xs = den.sched.sample_prior(1, 16, 2);
        let refs: Vec<Vec<f64>> = xs.iter().map(|x| teacher_solve(&den, &teacher, x).unwrap()).collect();
        let err = |n: usize| {
            let spec = SolverSpec::new(SolverFamily::Euler, 1, n).unwrap();
            let times = heuristic_times(Heuristic::LogSnr, n, &den.sched).unwrap();
            let s: f64 = xs
                .iter()
                .zip(&refs)
                .map(|(x, r)| rms(&solve(&den, spec, &times, &times, x).unwrap(), r).powi(2))
                .sum();
            (s / xs.len() as f64).sqrt()
        };
        let ratio = err(20) / err(40);
        assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn decoupled_equals_plain_when_equal() {
        let den = gm();
        let spec = SolverSpec::new(SolverFamily::Ipndm, 3, 6).unwrap();
        let times = heuristic_times(Heuristic::Quadratic, 6, &den.sched).unwrap();
        let x = [3.0, 4.0];
        let a = solve(&den, spec, &times, &times, &x).unwrap();
        let b = solve_with(&den, spec, &times, &times.clone(), &x).unwrap();
        assert_eq!(a, b);
        let mut tc = times.clone();
        tc[2] *= 0.9;
        assert_ne!(solve(&den, spec, &times, &tc, &x).unwrap(), a);
    }

    #[test]
    fn second_order_without_history_is_first_order() {
        let den = gm();
        let times = heuristic_times(Heuristic::LogSnr, 5, &den.sched).unwrap();
        let two = SolverMap::new(&den, SolverSpec::new(SolverFamily::Dpmpp, 2, 5).unwrap());
        let one = SolverMap::new(&den, SolverSpec::new(SolverFamily::Dpmpp, 1, 5).unwrap());
        let p = [times[1], times[2], times[3], times[2]];
        let x = [1.5, -2.0];
        let a = two.step(2, &p, &x).unwrap();
        let b = one.step(2, &p, &x).unwrap();
        assert_eq!(&a[..2], &b[..2]);
    }

    #[test]
    fn grid_errors() {
        let den = gm();
        let spec = SolverSpec::new(SolverFamily::Dpmpp, 2, 2).unwrap();
        let x = [0.0, 0.0];
        assert!(matches!(solve(&den, spec, &[80.0, 90.0, 0.002], &[80.0, 1.0, 0.002], &x), Err(Error::Grid(_))));
        assert!(matches!(solve(&den, spec, &[80.0, 0.002], &[80.0, 0.002], &x), Err(Error::Grid(_))));
        assert!(matches!(solve(&den, spec, &[70.0, 1.0, 0.002], &[70.0, 1.0, 0.002], &x), Err(Error::Grid(_))));
        assert!(matches!(solve(&den, spec, &[80.0, 1.0, 0.002], &[80.0, 1.0, 0.0], &x), Err(Error::Grid(_))));
        assert!(SolverSpec::new(SolverFamily::Dpmpp, 3, 4).is_err());
        assert!(SolverSpec::new(SolverFamily::Euler, 1, 0).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        struct Blowup(NoiseSchedule);
        impl Denoiser for Blowup {
            fn dim(&self) -> usize {
                1
            }
            fn schedule(&self) -> &NoiseSchedule {
                &self.0
            }
            fn epsilon<S: Real>(&self, x: &[S], t: S) -> Vec<S> {
                vec![x[0] * (t - S::from(1.0)).ln()]
            }
        }
        let den = Blowup(NoiseSchedule::ve_edm());
        let spec = SolverSpec::new(SolverFamily::Euler, 1, 3).unwrap();
        let times = [80.0, 10.0, 0.5, 0.002];
        match solve(&den, spec, &times, &times, &[1.0]) {
            Err(Error::Divergence { step }) => assert_eq!(step, 2),
            other => panic!("{other:?}"),
        }
    }
}
