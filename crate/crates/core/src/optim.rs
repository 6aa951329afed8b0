//! Adam, step-decay learning-rate schedule, gradient clipping, and the
//! central-difference gradient checker.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;
/// Global gradient-norm clip applied by the scene optimizers.
pub const CLIP_NORM: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        self.step_impl(params, grads, lr, None)
    }

    /// Adam update with a per-parameter multiplier on `lr`.
    pub fn step_scaled(&mut self, params: &mut [f64], grads: &[f64], lr: f64, scales: &[f64]) -> Result<()> {
        if scales.len() != self.m.len() {
            return Err(Error::input(format!(
                "adam length mismatch: state {}, scales {}",
                self.m.len(),
                scales.len()
            )));
        }
        self.step_impl(params, grads, lr, Some(scales))
    }

    fn step_impl(&mut self, params: &mut [f64], grads: &[f64], lr: f64, scales: Option<&[f64]>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::input(format!(
                "adam length mismatch: state {}, params {}, grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            let lr_i = scales.map_or(lr, |s| lr * s[i]);
            params[i] -= lr_i * m_hat / (v_hat.sqrt() + EPS);
        }
        Ok(())
    }
}

/// Step decay: `lr(epoch) = initial_lr · decay_factor^⌊epoch / decay_every⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub max_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial_lr: 0.1,
            decay_factor: 0.5,
            decay_every: 50,
            max_epochs: 300,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) {
            return Err(Error::Config(format!(
                "initial_lr must be > 0, got {}",
                self.initial_lr
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.initial_lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// Scales `grads` so their Euclidean norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

/// Largest per-coordinate relative error between `analytic` and a central
/// difference of `f` with step `h`.
pub fn fd_check<F>(f: F, params: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(Error::input(format!(
            "fd_check length mismatch: {} params, {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let x0 = x[i];
        x[i] = x0 + h;
        let fp = f(&x);
        x[i] = x0 - h;
        let fm = f(&x);
        x[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::input(format!(
                "fd_check: non-finite objective at coordinate {i}"
            )));
        }
        let g_fd = (fp - fm) / (2.0 * h);
        let rel = (g_fd - analytic[i]).abs() / (g_fd.abs() + analytic[i].abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        s.step(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut s = AdamState::new(2);
        let mut p = vec![0.0, 0.0];
        s.step(&mut p, &[3.0, -0.01], 0.1).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-8);
        assert!((p[1] - 0.1).abs() < 1e-5);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let mut s = AdamState::new(2);
        assert!(s.step(&mut [0.0; 3], &[0.0; 3], 0.1).is_err());
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = AdamState::new(2);
        let mut x = vec![3.0, -2.0];
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            s.step(&mut x, &g, 0.05).unwrap();
        }
        let norm = (x[0] * x[0] + x[1] * x[1]).sqrt();
        assert!(norm < 1e-3, "‖x‖ = {norm}");
    }

    #[test]
    fn schedule_steps_exactly() {
        let s = LrSchedule::default();
        assert_eq!(s.lr(0), 0.1);
        assert_eq!(s.lr(49), 0.1);
        assert_eq!(s.lr(50), 0.05);
        assert_eq!(s.lr(299), 0.1 * 0.5f64.powi(5));
        assert!(LrSchedule { decay_factor: 1.5, ..s }.validate().is_err());
        assert!(LrSchedule { initial_lr: 0.0, ..s }.validate().is_err());
    }

    #[test]
    fn clip_caps_norm() {
        let mut g = vec![30.0, 40.0];
        assert_eq!(clip_global_norm(&mut g, 10.0), 50.0);
        assert!((g[0] - 6.0).abs() < 1e-12 && (g[1] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn fd_check_cases() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = vec![0.3, -1.2, 2.5];
        let good: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!(fd_check(f, &x, &good, 1e-5).unwrap() < 1e-9);
        let bad: Vec<f64> = x.iter().map(|v| 2.1 * v).collect();
        // |2 − 2.1| / (2 + 2.1)
        let err = fd_check(f, &x, &bad, 1e-5).unwrap();
        assert!((err - 0.1 / 4.1).abs() < 1e-6, "{err}");
        let nan = |_: &[f64]| f64::NAN;
        assert!(fd_check(nan, &x, &good, 1e-5).is_err());
    }
}
