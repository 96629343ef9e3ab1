//! Noise schedule, forward corruption and the posterior reverse step.
//!
//! Tables are indexed by diffusion step `t ∈ 0..=T`; index 0 carries the
//! `ᾱ_0 = 1` convention so the `t = 1` formulas need no special case.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta_cap: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            beta_start: 1e-4,
            beta_end: 0.02,
            beta_cap: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::truncated_linear(self.steps, self.beta_start, self.beta_end, self.beta_cap)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// `1 − ᾱ_t`, accumulated as `(1 − ᾱ_{t−1}) + ᾱ_{t−1}·β_t` so that it
    /// equals `β_1` exactly at `t = 1`.
    one_minus_alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    /// `β_t = min(start + (t−1)(end−start)/(T−1), cap)`.
    pub fn truncated_linear(steps: usize, beta_start: f64, beta_end: f64, beta_cap: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end, got {beta_start}, {beta_end}"
            )));
        }
        if !(beta_cap > beta_start && beta_cap < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "beta_cap must lie in (beta_start, 1), got {beta_cap}"
            )));
        }
        let ramp = if steps > 1 {
            (beta_end - beta_start) / (steps - 1) as f64
        } else {
            0.0
        };
        let betas: Vec<f64> = (0..steps)
            .map(|i| (beta_start + i as f64 * ramp).min(beta_cap))
            .collect();
        Self::from_betas(&betas)
    }

    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let steps = betas.len();
        let mut beta = vec![0.0; steps + 1];
        let mut alpha = vec![1.0; steps + 1];
        let mut alpha_bar = vec![1.0; steps + 1];
        let mut omab = vec![0.0; steps + 1];
        let mut posterior_var = vec![0.0; steps + 1];
        for t in 1..=steps {
            beta[t] = betas[t - 1];
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
            omab[t] = omab[t - 1] + alpha_bar[t - 1] * beta[t];
            posterior_var[t] = omab[t - 1] / omab[t] * beta[t];
        }
        Ok(Self {
            steps,
            beta,
            alpha,
            alpha_bar,
            one_minus_alpha_bar: omab,
            posterior_var,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            Err(Error::StepRange {
                step: t,
                max: self.steps,
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// `ᾱ_t` for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.one_minus_alpha_bar[t]
    }

    /// `β̃_t = (1−ᾱ_{t−1})/(1−ᾱ_t)·β_t`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_var[t]
    }

    /// Coefficients `(c_x0, c_xt)` of the posterior mean at step `t`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t)?;
        let denom = self.one_minus_alpha_bar[t];
        let c0 = self.alpha_bar[t - 1].sqrt() * self.beta[t] / denom;
        let ct = self.alpha[t].sqrt() * self.one_minus_alpha_bar[t - 1] / denom;
        Ok((c0, ct))
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`
    pub fn q_sample(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check(t)?;
        same_len(x0, eps)?;
        let a = self.alpha_bar[t].sqrt();
        let b = self.one_minus_alpha_bar[t].sqrt();
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    pub fn posterior_mean(&self, x0: &[f64], xt: &[f64], t: usize) -> Result<Vec<f64>> {
        same_len(x0, xt)?;
        let (c0, ct) = self.posterior_coefficients(t)?;
        Ok(x0.iter().zip(xt).map(|(a, b)| c0 * a + ct * b).collect())
    }

    /// One ancestral step: posterior mean plus `√β̃_t·z`.
    pub fn reverse_step(&self, x_hat0: &[f64], xt: &[f64], t: usize, z: &[f64]) -> Result<Vec<f64>> {
        same_len(x_hat0, z)?;
        let mut out = self.posterior_mean(x_hat0, xt, t)?;
        let sigma = self.posterior_var[t].sqrt();
        if sigma > 0.0 {
            for (o, zi) in out.iter_mut().zip(z) {
                *o += sigma * zi;
            }
        }
        Ok(out)
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::Dimension(format!("vector lengths {} and {}", a.len(), b.len())))
    }
}
