//! Forward-noising schedule and the per-step constants used by denoising
//! and fusion.
//!
//! A schedule fixes `beta_t` for `t = 1..=T` (linear ramp), from which
//! `alpha_t = 1 - beta_t` and the running product `alpha_bar_t` follow.
//! Three derived constants drive everything downstream:
//!
//! * `c1(t) = (1 - alpha_t) / (sqrt(alpha_t) * sqrt(1 - alpha_bar_t))`,
//!   the gain applied to the predicted noise in a denoise step.
//! * `c2(t) = ((1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)) * beta_t`,
//!   the posterior variance of the step; `c2(1) == 0` by convention, so
//!   the final step is deterministic.
//! * `sigma(t) = sqrt(c2(t))`, the standard-deviation form of the same
//!   quantity. Which of `c2`/`sigma` scales the injected noise is a fusion
//!   mode flag, since both conventions appear in practice.
//!
//! Indexing is 1-based throughout: `t` ranges over `1..=timesteps`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// The compact, serializable identity of a schedule. Checkpoints store this
/// and rebuild the full table on load; the derived arrays are never persisted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Builds a linear schedule. Requires `timesteps >= 1` and
/// `0 < beta_start <= beta_end < 1`.
pub fn build_schedule(
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    NoiseSchedule::build(ScheduleParams { timesteps, beta_start, beta_end, kind })
}

impl NoiseSchedule {
    pub fn build(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams { timesteps, beta_start, beta_end, .. } = params;
        if timesteps == 0 {
            return Err(Error::InvalidArgument("timesteps must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) || !beta_start.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "beta_start must lie in (0, 1), got {beta_start}"
            )));
        }
        if !(beta_end > 0.0 && beta_end < 1.0) || !beta_end.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "beta_end must lie in (0, 1), got {beta_end}"
            )));
        }
        if beta_start > beta_end {
            return Err(Error::InvalidArgument(format!(
                "beta_start ({beta_start}) must not exceed beta_end ({beta_end})"
            )));
        }
        let beta: Vec<f64> = if timesteps == 1 {
            vec![beta_start]
        } else {
            (0..timesteps)
                .map(|i| {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                })
                .collect()
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(timesteps);
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule { params, beta, alpha, alpha_bar })
    }

    /// The stock diffusion default: 1000 steps, beta from 1e-4 to 0.02.
    pub fn default_ddpm() -> Self {
        build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear)
            .expect("stock parameters are valid")
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn timesteps(&self) -> usize {
        self.params.timesteps
    }

    /// `beta_t`, 1-based. Panics outside `1..=timesteps`; use the derived
    /// constants for fallible access.
    pub fn beta(&self, t: usize) -> f64 {
        self.check_t_panicking(t);
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.check_t_panicking(t);
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.check_t_panicking(t);
        self.alpha_bar[t - 1]
    }

    fn check_t_panicking(&self, t: usize) {
        assert!(
            (1..=self.params.timesteps).contains(&t),
            "timestep {t} outside 1..={}",
            self.params.timesteps
        );
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if (1..=self.params.timesteps).contains(&t) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.params.timesteps
            )))
        }
    }

    /// Noise-prediction gain of a denoise step at `t`.
    pub fn c1(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        let a = self.alpha[t - 1];
        let abar = self.alpha_bar[t - 1];
        if abar >= 1.0 {
            return Err(Error::DegenerateSchedule { t });
        }
        Ok((1.0 - a) / (a.sqrt() * (1.0 - abar).sqrt()))
    }

    /// Posterior variance factor at `t`; zero at `t == 1` by convention.
    pub fn c2(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        if t == 1 {
            return Ok(0.0);
        }
        let abar_t = self.alpha_bar[t - 1];
        if abar_t >= 1.0 {
            return Err(Error::DegenerateSchedule { t });
        }
        let abar_prev = self.alpha_bar[t - 2];
        Ok((1.0 - abar_prev) / (1.0 - abar_t) * self.beta[t - 1])
    }

    /// Standard deviation form of `c2`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.c2(t)?.sqrt())
    }

    /// The noising map: `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
    pub fn forward_noise(&self, x0: &Vector, t: usize, eps: &Vector) -> Result<Vector> {
        self.check_t(t)?;
        if x0.dim() != eps.dim() {
            return Err(Error::ShapeMismatch {
                op: "forward_noise",
                lhs: (x0.dim(), 1),
                rhs: (eps.dim(), 1),
            });
        }
        let abar = self.alpha_bar[t - 1];
        let signal = abar.sqrt();
        let noise = (1.0 - abar).sqrt();
        x0.scale(signal).add_scaled(noise, eps)
    }
}

/// Free-function form of [`NoiseSchedule::forward_noise`].
pub fn forward_noise(s: &NoiseSchedule, x0: &Vector, t: usize, eps: &Vector) -> Result<Vector> {
    s.forward_noise(x0, t, eps)
}
