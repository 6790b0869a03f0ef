//! Variance-preserving noise schedule.
//!
//! Timesteps are 1-based: `t = 1..=T`. The cumulative product uses the
//! convention `abar_0 = 1`, which makes `sigma_1 = 0` for every `eta`, so the
//! last reverse step is always deterministic.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The four numbers a schedule is a pure function of.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub eta: f64,
}

impl ScheduleParams {
    /// Linear betas rescaled from the 1000-step `1e-4 -> 0.02` schedule.
    ///
    /// For very short schedules (`steps < 21`) the rescaled end point would
    /// reach 1, so it is capped at `0.999`.
    pub fn with_default_betas(steps: usize, eta: f64) -> Self {
        let (beta_start, beta_end) = default_beta_range(steps);
        Self {
            steps,
            beta_start,
            beta_end,
            eta,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.beta_start, self.beta_end, self.eta)
    }
}

pub fn default_beta_range(steps: usize) -> (f64, f64) {
    let scale = 1000.0 / steps.max(1) as f64;
    ((1e-4 * scale).min(0.999), (0.02 * scale).min(0.999))
}

/// All coefficients of a discrete diffusion run. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    // Index 0 holds abar_0 = 1; index t holds abar_t.
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, eta: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("step count T must be >= 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(format!(
                "betas must satisfy 0 < beta_start <= beta_end < 1 (got {beta_start}, {beta_end})"
            )));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::param(format!("eta must be in [0, 1] (got {eta})")));
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

        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for &beta in &betas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * (1.0 - beta));
        }

        let sigmas: Vec<f64> = (1..=steps)
            .map(|t| {
                let var = betas[t - 1] * (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]);
                eta * var.sqrt()
            })
            .collect();

        for t in 2..=steps {
            let bound = (1.0 - alpha_bars[t - 1]).sqrt();
            if sigmas[t - 1] >= bound {
                return Err(Error::ScheduleInconsistency {
                    t,
                    radicand: 1.0 - alpha_bars[t - 1] - sigmas[t - 1] * sigmas[t - 1],
                });
            }
        }

        Ok(Self {
            params: ScheduleParams {
                steps,
                beta_start,
                beta_end,
                eta,
            },
            betas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn eta(&self) -> f64 {
        self.params.eta
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `abar_0..=abar_T`, length `T + 1`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `sigma_1..=sigma_T`, length `T`.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    /// `abar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            })
    }

    pub fn sigma_at(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.sigmas[t - 1])
    }

    /// Stable hash of the four construction parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update((self.params.steps as u64).to_le_bytes());
        hasher.update(self.params.beta_start.to_le_bytes());
        hasher.update(self.params.beta_end.to_le_bytes());
        hasher.update(self.params.eta.to_le_bytes());
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}
