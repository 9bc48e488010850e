//! Linear-beta DDPM schedule with v-parameterization.
//!
//! Timesteps are 1-based: `t` runs over `1..=steps` and `alpha_bar(0) = 1`.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Bound applied to the predicted clean sample inside [`DiffusionSchedule::reverse_step`].
pub const X0_CLAMP: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear betas from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("need at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule("require 0 < beta_start <= beta_end < 1"));
        }
        if steps > 1 && beta_start == beta_end {
            return Err(Error::Schedule("betas must strictly increase"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(betas))
    }

    /// 1000 steps, 1e-4 to 2e-2.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("default schedule is valid")
    }

    /// Builds the cumulative table from arbitrary betas; test helpers use this to
    /// inject limiting rows.
    pub fn from_betas(betas: Vec<f64>) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Self { betas, alpha_bars }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::Timestep {
                t,
                steps: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `(sqrt(alpha_bar), sqrt(1 - alpha_bar))` at `t`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        (libm::sqrt(ab), libm::sqrt(1.0 - ab))
    }

    /// `x_t = sqrt(ab) x0 + sqrt(1 - ab) eps`.
    pub fn forward_noise(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check(t)?;
        same_len(x0, eps)?;
        let (a, s) = self.coefficients(t);
        Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + s * e).collect())
    }

    /// `v = sqrt(ab) eps - sqrt(1 - ab) x0`.
    pub fn v_target(&self, x0: &[f64], eps: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check(t)?;
        same_len(x0, eps)?;
        let (a, s) = self.coefficients(t);
        Ok(x0.iter().zip(eps).map(|(&x, &e)| a * e - s * x).collect())
    }

    /// `(x0, eps)` recovered from `(x_t, v)`.
    pub fn split_v(&self, x_t: &[f64], v: &[f64], t: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(t)?;
        same_len(x_t, v)?;
        let (a, s) = self.coefficients(t);
        let x0 = x_t.iter().zip(v).map(|(&x, &v)| a * x - s * v).collect();
        let eps = x_t.iter().zip(v).map(|(&x, &v)| s * x + a * v).collect();
        Ok((x0, eps))
    }

    /// Coefficients of the Gaussian `q(x_prev | x_t, x0)` for a jump from `t` to
    /// `prev < t`: `(coef_x0, coef_xt, variance)`. With `prev = t - 1` this is
    /// the usual DDPM posterior.
    pub fn posterior(&self, t: usize, prev: usize) -> (f64, f64, f64) {
        let ab_t = self.alpha_bar(t);
        let ab_p = self.alpha_bar(prev);
        let beta = 1.0 - ab_t / ab_p;
        let denom = 1.0 - ab_t;
        let coef_x0 = libm::sqrt(ab_p) * beta / denom;
        let coef_xt = libm::sqrt(ab_t / ab_p) * (1.0 - ab_p) / denom;
        let var = (1.0 - ab_p) / denom * beta;
        (coef_x0, coef_xt, var)
    }

    /// One ancestral step from `t` to `t - 1`.
    pub fn reverse_step(
        &self,
        x_t: &[f64],
        v_hat: &[f64],
        t: usize,
        noise: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        self.reverse_jump(x_t, v_hat, t, t - 1, noise)
    }

    /// Ancestral step from `t` to any `prev < t`. `v_hat` is converted to a
    /// clean estimate, clamped to `[-2, 2]`, and the posterior mean is returned.
    /// Noise scaled by the posterior deviation is added when `noise` is given and
    /// `prev > 0`.
    pub fn reverse_jump(
        &self,
        x_t: &[f64],
        v_hat: &[f64],
        t: usize,
        prev: usize,
        noise: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        self.check(t)?;
        if prev >= t {
            return Err(Error::Timestep {
                t: prev,
                steps: t - 1,
            });
        }
        same_len(x_t, v_hat)?;
        if let Some(n) = noise {
            same_len(x_t, n)?;
        }
        let (a, s) = self.coefficients(t);
        let (cx0, cxt, var) = self.posterior(t, prev);
        let sigma = if prev > 0 { libm::sqrt(var) } else { 0.0 };
        let mut out = Vec::with_capacity(x_t.len());
        for i in 0..x_t.len() {
            let x0 = (a * x_t[i] - s * v_hat[i]).clamp(-X0_CLAMP, X0_CLAMP);
            let mut x = cx0 * x0 + cxt * x_t[i];
            if let Some(n) = noise {
                x += sigma * n[i];
            }
            out.push(x);
        }
        Ok(out)
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::Shape {
            expected: a.len(),
            got: b.len(),
        })
    }
}

/// Descending timesteps visited by a sampler using every `stride`-th step; always
/// starts at `steps` and ends at 1.
pub fn strided_timesteps(steps: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut ts: Vec<usize> = (1..=steps).rev().step_by(stride).collect();
    if ts.last() != Some(&1) {
        ts.push(1);
    }
    ts
}

/// Learning rate after `epoch` whole passes: halves every `interval` epochs.
pub fn halving_lr(base: f64, epoch: u64, interval: u64) -> f64 {
    if interval == 0 {
        return base;
    }
    let halvings = (epoch / interval).min(1023) as i32;
    base * libm::pow(0.5, halvings as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_endpoints() {
        let s = DiffusionSchedule::default_linear();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 2e-2).abs() < 1e-15);
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(DiffusionSchedule::linear(0, 1e-4, 2e-2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.0, 2e-2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(DiffusionSchedule::linear(1, 0.1, 0.1).is_ok());
    }

    #[test]
    fn timestep_bounds() {
        let s = DiffusionSchedule::default_linear();
        assert!(s.forward_noise(&[0.0], 0, &[0.0]).is_err());
        assert!(s.forward_noise(&[0.0], 1001, &[0.0]).is_err());
        assert!(s.forward_noise(&[0.0], 1000, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn limiting_rows() {
        // beta = 1e-300 gives alpha_bar == 1.0 in f64.
        let s = DiffusionSchedule::from_betas(alloc::vec![1e-300, 0.5]);
        assert_eq!(s.alpha_bar(1), 1.0);
        let x0 = [0.3, -1.2];
        let eps = [0.7, 0.1];
        assert_eq!(s.forward_noise(&x0, 1, &eps).unwrap(), x0.to_vec());
        assert_eq!(s.v_target(&x0, &eps, 1).unwrap(), eps.to_vec());
        // alpha_bar == 0
        let z = DiffusionSchedule::from_betas(alloc::vec![1.0]);
        let v = z.v_target(&x0, &eps, 1).unwrap();
        assert_eq!(v, alloc::vec![-0.3, 1.2]);
    }

    #[test]
    fn zero_signal_is_scaled_noise() {
        let s = DiffusionSchedule::default_linear();
        let eps = [0.5, -2.0, 1.0];
        let xt = s.forward_noise(&[0.0; 3], 400, &eps).unwrap();
        let (_, sd) = s.coefficients(400);
        for (x, e) in xt.iter().zip(eps) {
            assert_eq!(*x, sd * e);
        }
    }

    #[test]
    fn last_step_is_noise_free() {
        let s = DiffusionSchedule::default_linear();
        let x = [0.2, 0.4];
        let v = [0.1, -0.3];
        let a = s.reverse_step(&x, &v, 1, None).unwrap();
        let b = s.reverse_step(&x, &v, 1, Some(&[100.0, -100.0])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn strides_cover_endpoints() {
        assert_eq!(strided_timesteps(10, 3), alloc::vec![10, 7, 4, 1]);
        assert_eq!(strided_timesteps(10, 1).len(), 10);
        assert_eq!(strided_timesteps(9, 4), alloc::vec![9, 5, 1]);
    }

    #[test]
    fn lr_halves_on_interval() {
        assert_eq!(halving_lr(1e-4, 0, 10_000), 1e-4);
        assert_eq!(halving_lr(1e-4, 9_999, 10_000), 1e-4);
        assert_eq!(halving_lr(1e-4, 10_000, 10_000), 5e-5);
        assert_eq!(halving_lr(1e-4, 25_000, 10_000), 2.5e-5);
    }
}
