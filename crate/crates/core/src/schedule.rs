//! Discrete variance-preserving noise schedule.
//!
//! Timesteps run over `t = 0..=T`. The forward process is
//! `x_t = sqrt(alpha_bar_t) * x_0 + sqrt(1 - alpha_bar_t) * eps`, and the
//! samplers work in the rescaled coordinates `z = x_t / sqrt(alpha_bar_t)`,
//! where the noise level is `sigma_t = sqrt((1 - alpha_bar_t) / alpha_bar_t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub(crate) beta: Vec<f64>,
    pub(crate) alpha_bar: Vec<f64>,
    pub(crate) sigma: Vec<f64>,
    pub(crate) sigma_post: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation of `beta_t` from `beta_min` (t = 1) to `beta_max` (t = T).
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("schedule needs at least one step"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::param(format!(
                "beta range must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    /// Builds the derived arrays from an explicit `beta_1..beta_T`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::param("schedule needs at least one step"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::param(format!("beta must lie in (0, 1), got {b}")));
        }
        let steps = beta.len();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for b in &beta {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        let sigma = alpha_bar
            .iter()
            .map(|ab| ((1.0 - ab) / ab).sqrt())
            .collect();
        let mut sigma_post = vec![0.0; steps + 1];
        for t in 1..=steps {
            let var = beta[t - 1] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]);
            sigma_post[t] = var.sqrt();
        }
        Ok(Self {
            beta,
            alpha_bar,
            sigma,
            sigma_post,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            Err(Error::Index {
                t,
                lo,
                hi: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Standard deviation of the ancestral posterior `q(x_{t-1} | x_t, x_0)`.
    pub fn sigma_post(&self, t: usize) -> f64 {
        self.sigma_post[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn sigma_posts(&self) -> &[f64] {
        &self.sigma_post
    }

    /// Intermediate level between `sigma_{t-1}` (churn = 0) and `sigma_t` (churn = 1).
    ///
    /// The reverse step from `t` to `t - 1` integrates the stochastic reverse
    /// SDE from `sigma_t` down to this level and the deterministic flow from
    /// here to `sigma_{t-1}`, so `sigma_t^2 - sigma_hat^2` is the variance
    /// re-injected during the step.
    pub fn sigma_hat(&self, t: usize, churn: f64) -> Result<f64> {
        self.check(t, 1)?;
        if !(0.0..=1.0).contains(&churn) {
            return Err(Error::param(format!("churn must lie in [0, 1], got {churn}")));
        }
        let lo = self.sigma[t - 1];
        let hi = self.sigma[t];
        Ok((lo + churn * (hi - lo)).clamp(lo, hi))
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        self.check(t, 0)
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        self.check(t, 1)
    }
}

/// Plain-key description of a linear schedule as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub churn: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_min: 1e-4,
            beta_max: 2e-2,
            churn: 0.0,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        if !(0.0..=1.0).contains(&self.churn) {
            return Err(Error::param(format!(
                "churn must lie in [0, 1], got {}",
                self.churn
            )));
        }
        NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max)
    }
}
