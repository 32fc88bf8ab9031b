//! First-order optimizers over flat `f64` parameter vectors.

/// RMSprop with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    pub momentum: f64,
    square_avg: Vec<f64>,
    buf: Vec<f64>,
}

impl RmsProp {
    pub fn new(lr: f64, momentum: f64, n: usize) -> Self {
        RmsProp {
            lr,
            alpha: 0.99,
            eps: 1e-8,
            momentum,
            square_avg: vec![0.0; n],
            buf: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        for i in 0..params.len() {
            let g = grad[i];
            self.square_avg[i] = self.alpha * self.square_avg[i] + (1.0 - self.alpha) * g * g;
            let avg = self.square_avg[i].sqrt() + self.eps;
            self.buf[i] = self.momentum * self.buf[i] + g / avg;
            params[i] -= self.lr * self.buf[i];
        }
    }
}

/// Plain stochastic gradient descent.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, params: &mut [f64], grad: &[f64]) {
        for (p, g) in params.iter_mut().zip(grad) {
            *p -= self.lr * g;
        }
    }
}

/// Adam, used for denoiser training.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta_1: f64,
    beta_2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            beta_1: 0.9,
            beta_2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta_1.powi(self.t);
        let c2 = 1.0 - self.beta_2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta_1 * self.m[i] + (1.0 - self.beta_1) * g;
            self.v[i] = self.beta_2 * self.v[i] + (1.0 - self.beta_2) * g * g;
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Rescales `grad` in place so its norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Multiplies a learning rate by `factor` after `patience` observations
/// without a new minimum, never going below `floor`.
#[derive(Debug, Clone)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub floor: f64,
    best: f64,
    bad: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize, floor: f64) -> Self {
        Plateau {
            factor,
            patience,
            floor,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Records a validation value; returns true if `lr` was reduced.
    pub fn observe(&mut self, value: f64, lr: &mut f64) -> bool {
        if value < self.best {
            self.best = value;
            self.bad = 0;
            return false;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            self.bad = 0;
            if *lr > self.floor {
                *lr = (*lr * self.factor).max(self.floor);
                return true;
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmsprop_first_step() {
        let mut opt = RmsProp::new(0.01, 0.9, 1);
        let mut p = [1.0];
        opt.step(&mut p, &[2.0]);
        // square_avg = 0.04, step = g / (0.2 + 1e-8)
        let expected = 1.0 - 0.01 * 2.0 / (0.2 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn clip() {
        let mut g = [3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut small = [0.1, 0.1];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, [0.1, 0.1]);
    }

    #[test]
    fn plateau_decays_and_floors() {
        let mut p = Plateau::new(0.8, 2, 0.5);
        let mut lr = 1.0;
        assert!(!p.observe(1.0, &mut lr));
        assert!(!p.observe(1.0, &mut lr));
        assert!(p.observe(1.0, &mut lr));
        assert!((lr - 0.8).abs() < 1e-15);
        for _ in 0..20 {
            p.observe(2.0, &mut lr);
        }
        assert_eq!(lr, 0.5);
        assert!(!p.observe(0.5, &mut lr));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = Adam::new(0.05, 2);
        let mut p = [3.0, -2.0];
        for _ in 0..2000 {
            let g = [2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-3 && p[1].abs() < 1e-3);
    }
}
