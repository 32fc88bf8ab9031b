//! Noise schedules of the forward diffusion process.
//!
//! `x_t = alpha_t x_0 + sigma_t eps`. The checked `f64` methods validate the
//! time domain; the generic `*_of` methods are the unchecked kernels the
//! solvers differentiate through.

use sha2::{Digest, Sha256};

use crate::diff::Real;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleFamily {
    /// Linear-beta variance-preserving process.
    VpLinear { beta_0: f64, beta_1: f64 },
    /// Variance-exploding process with `sigma_t = t`.
    VeEdm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub family: ScheduleFamily,
    /// End of the forward process.
    pub t_max: f64,
    /// Numerical floor standing in for `t = 0`.
    pub t_min: f64,
}

impl NoiseSchedule {
    pub fn new(family: ScheduleFamily, t_max: f64, t_min: f64) -> Result<Self> {
        if !(t_min > 0.0 && t_min < t_max && t_max.is_finite()) {
            return Err(Error::Input(format!(
                "need 0 < t_min < T, got t_min={t_min}, T={t_max}"
            )));
        }
        if let ScheduleFamily::VpLinear { beta_0, beta_1 } = family {
            if !(beta_0 > 0.0 && beta_1 >= beta_0) {
                return Err(Error::Input(format!(
                    "need 0 < beta_0 <= beta_1, got {beta_0}, {beta_1}"
                )));
            }
        }
        Ok(NoiseSchedule {
            family,
            t_max,
            t_min,
        })
    }

    /// EDM convention: `T = 80`, `t_min = 0.002`.
    pub fn ve_edm() -> Self {
        NoiseSchedule {
            family: ScheduleFamily::VeEdm,
            t_max: 80.0,
            t_min: 0.002,
        }
    }

    /// `beta_0 = 0.1`, `beta_1 = 20`, `T = 1`, `t_min = 1e-3`.
    pub fn vp_linear() -> Self {
        NoiseSchedule {
            family: ScheduleFamily::VpLinear {
                beta_0: 0.1,
                beta_1: 20.0,
            },
            t_max: 1.0,
            t_min: 1e-3,
        }
    }

    fn check(&self, t: f64) -> Result<()> {
        if t >= self.t_min && t <= self.t_max {
            Ok(())
        } else {
            Err(Error::Domain {
                t,
                lo: self.t_min,
                hi: self.t_max,
            })
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        self.check(t).is_ok()
    }

    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        self.check(t)?;
        Ok(self.coeffs_of(t))
    }

    /// `log(alpha_t / sigma_t)`
    pub fn lambda(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(self.lambda_of(t))
    }

    /// `(f, g^2)` with `f = d log(alpha)/dt` and `g^2 = d sigma^2/dt - 2 f sigma^2`.
    pub fn drift_terms(&self, t: f64) -> Result<(f64, f64)> {
        self.check(t)?;
        Ok(self.drift_of(t))
    }

    /// Inverse of [`lambda`](Self::lambda).
    pub fn t_of_lambda(&self, lambda: f64) -> Result<f64> {
        let (lo, hi) = (self.lambda_of(self.t_max), self.lambda_of(self.t_min));
        let slack = 1e-12 * lambda.abs().max(1.0);
        if !(lambda >= lo - slack && lambda <= hi + slack) {
            return Err(Error::LambdaDomain { lambda, lo, hi });
        }
        match self.family {
            ScheduleFamily::VeEdm => Ok((-lambda).exp().clamp(self.t_min, self.t_max)),
            ScheduleFamily::VpLinear { .. } => {
                // lambda is decreasing: shrink the bracket until it stops moving.
                let (mut a, mut b) = (self.t_min, self.t_max);
                loop {
                    let mid = 0.5 * (a + b);
                    if mid <= a || mid >= b {
                        break;
                    }
                    if self.lambda_of(mid) > lambda {
                        a = mid;
                    } else {
                        b = mid;
                    }
                }
                let (la, lb) = (self.lambda_of(a), self.lambda_of(b));
                Ok(if (la - lambda).abs() <= (lb - lambda).abs() { a } else { b })
            }
        }
    }

    /// `sigma_T`, the prior standard deviation.
    pub fn sigma_max(&self) -> f64 {
        self.coeffs_of(self.t_max).1
    }

    /// EDM-style noise level `sigma_t / alpha_t = exp(-lambda_t)`.
    pub fn noise_level(&self, t: f64) -> Result<f64> {
        Ok((-self.lambda(t)?).exp())
    }

    pub fn t_of_noise_level(&self, level: f64) -> Result<f64> {
        if !(level > 0.0) {
            return Err(Error::Input(format!("noise level must be positive, got {level}")));
        }
        self.t_of_lambda(-level.ln())
    }

    pub fn coeffs_of<S: Real>(&self, t: S) -> (S, S) {
        match self.family {
            ScheduleFamily::VeEdm => (S::from(1.0), t),
            ScheduleFamily::VpLinear { .. } => {
                let m = self.log_alpha_of(t);
                (m.exp(), (-(m * S::from(2.0)).exp_m1()).sqrt())
            }
        }
    }

    fn log_alpha_of<S: Real>(&self, t: S) -> S {
        match self.family {
            ScheduleFamily::VeEdm => S::from(0.0),
            ScheduleFamily::VpLinear { beta_0, beta_1 } => {
                t * t * S::from(-0.25 * (beta_1 - beta_0)) + t * S::from(-0.5 * beta_0)
            }
        }
    }

    pub fn lambda_of<S: Real>(&self, t: S) -> S {
        match self.family {
            ScheduleFamily::VeEdm => -t.ln(),
            ScheduleFamily::VpLinear { .. } => {
                let m = self.log_alpha_of(t);
                m - (-(m * S::from(2.0)).exp_m1()).ln() * S::from(0.5)
            }
        }
    }

    pub fn drift_of<S: Real>(&self, t: S) -> (S, S) {
        match self.family {
            ScheduleFamily::VeEdm => (S::from(0.0), t * S::from(2.0)),
            ScheduleFamily::VpLinear { beta_0, beta_1 } => {
                let f = t * S::from(-0.5 * (beta_1 - beta_0)) + S::from(-0.5 * beta_0);
                (f, f * S::from(-2.0))
            }
        }
    }

    /// `count` draws from `N(0, sigma_T^2 I)`; draw `i` uses its own stream.
    pub fn sample_prior(&self, seed: u64, count: usize, d: usize) -> Vec<Vec<f64>> {
        let s = self.sigma_max();
        (0..count)
            .map(|i| {
                let mut r = rng::stream(seed, rng::domain::PRIOR, i as u64);
                rng::normal_vec(&mut r, d, s)
            })
            .collect()
    }

    /// Stable 64-bit fingerprint of the schedule parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        match self.family {
            ScheduleFamily::VeEdm => h.update(b"ve_edm"),
            ScheduleFamily::VpLinear { beta_0, beta_1 } => {
                h.update(b"vp_linear");
                h.update(beta_0.to_le_bytes());
                h.update(beta_1.to_le_bytes());
            }
        }
        h.update(self.t_max.to_le_bytes());
        h.update(self.t_min.to_le_bytes());
        let out = h.finalize();
        let mut b = [0u8; 8];
        b.copy_from_slice(&out[..8]);
        u64::from_le_bytes(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(s: &NoiseSchedule, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| s.t_min + (s.t_max - s.t_min) * i as f64 / (n - 1) as f64)
            .collect()
    }

    #[test]
    fn ve_alpha_sigma() {
        let s = NoiseSchedule::ve_edm();
        assert_eq!(s.alpha_sigma(80.0).unwrap(), (1.0, 80.0));
        assert_eq!(s.alpha_sigma(0.002).unwrap(), (1.0, 0.002));
        assert!(matches!(s.alpha_sigma(81.0), Err(Error::Domain { .. })));
        assert!(matches!(s.alpha_sigma(0.001), Err(Error::Domain { .. })));
    }

    #[test]
    fn vp_identity_limit() {
        let s = NoiseSchedule::new(s_vp().family, 1.0, 1e-9).unwrap();
        let (a, sg) = s.alpha_sigma(1e-9).unwrap();
        assert!((a - 1.0).abs() < 1e-9);
        assert!(sg < 1e-4);
    }

    fn s_vp() -> NoiseSchedule {
        NoiseSchedule::vp_linear()
    }

    #[test]
    fn lambda_values_and_inverse() {
        let ve = NoiseSchedule::ve_edm();
        assert!((ve.lambda(0.4).unwrap() - 0.916_290_731_874_155).abs() < 1e-12);
        for t in [0.01, 1.0, 50.0] {
            let back = ve.t_of_lambda(ve.lambda(t).unwrap()).unwrap();
            assert!((back - t).abs() / t <= 1e-12);
        }
        let vp = s_vp();
        for t in [0.01, 0.3, 1.0, 1e-3] {
            let back = vp.t_of_lambda(vp.lambda(t).unwrap()).unwrap();
            assert!((back - t).abs() / t <= 1e-12, "{t} -> {back}");
        }
        assert!(matches!(ve.t_of_lambda(100.0), Err(Error::LambdaDomain { .. })));
    }

    #[test]
    fn snr_and_lambda_strictly_decreasing() {
        for s in [NoiseSchedule::ve_edm(), s_vp()] {
            let ts = grid(&s, 1000);
            let lam: Vec<f64> = ts.iter().map(|&t| s.lambda(t).unwrap()).collect();
            let snr: Vec<f64> = ts
                .iter()
                .map(|&t| {
                    let (a, sg) = s.alpha_sigma(t).unwrap();
                    a * a / (sg * sg)
                })
                .collect();
            assert!(lam.windows(2).all(|w| w[1] < w[0]));
            assert!(snr.windows(2).all(|w| w[1] < w[0]));
            for &t in &ts {
                let (a, sg) = s.alpha_sigma(t).unwrap();
                assert!(a > 0.0 && sg > 0.0);
            }
        }
    }

    #[test]
    fn drift_terms_match_finite_differences() {
        let ve = NoiseSchedule::ve_edm();
        assert_eq!(ve.drift_terms(5.0).unwrap(), (0.0, 10.0));
        // ODE coefficient g^2 / (2 sigma) is 1 under VE.
        let (_, g2) = ve.drift_terms(3.7).unwrap();
        assert_eq!(g2 / (2.0 * 3.7), 1.0);

        let vp = s_vp();
        for t in [0.05, 0.3, 0.7, 0.95] {
            let h = 1e-5;
            let la = |t: f64| vp.alpha_sigma(t).unwrap().0.ln();
            let s2 = |t: f64| vp.alpha_sigma(t).unwrap().1.powi(2);
            let f_fd = (la(t + h) - la(t - h)) / (2.0 * h);
            let (f, g2) = vp.drift_terms(t).unwrap();
            assert!((f - f_fd).abs() / f.abs() <= 1e-6);
            let g2_fd = (s2(t + h) - s2(t - h)) / (2.0 * h) - 2.0 * f * s2(t);
            assert!((g2 - g2_fd).abs() / g2.abs() <= 1e-6);
        }
    }

    #[test]
    fn prior_is_deterministic() {
        let s = NoiseSchedule::ve_edm();
        assert_eq!(s.sample_prior(3, 5, 4), s.sample_prior(3, 5, 4));
        assert_ne!(s.sample_prior(3, 5, 4), s.sample_prior(4, 5, 4));
        // Prefix property: draw i does not depend on count.
        assert_eq!(s.sample_prior(3, 2, 4)[..], s.sample_prior(3, 5, 4)[..2]);
    }

    #[test]
    fn prior_moments() {
        let s = NoiseSchedule::ve_edm();
        let d = 3;
        let n = 100_000;
        let xs = s.sample_prior(11, n, d);
        let s2 = s.sigma_max().powi(2);
        let mut mean = vec![0.0; d];
        for x in &xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n as f64;
            }
        }
        for j in 0..d {
            let var = xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            assert!((var / s2 - 1.0).abs() <= 0.03, "coordinate {j}: {var}");
        }
        let norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
        assert!(norm <= 0.02 * s.sigma_max() * (d as f64).sqrt());
    }

    #[test]
    fn fingerprint_distinguishes() {
        assert_ne!(NoiseSchedule::ve_edm().fingerprint(), s_vp().fingerprint());
        assert_eq!(NoiseSchedule::ve_edm().fingerprint(), NoiseSchedule::ve_edm().fingerprint());
    }
}
