//! The LEDITS edit: invert the source, then run the guided reverse loop from
//! the inverted state, re-injecting the inversion's noise maps at each step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{guided_eps, GuidanceConfig};
use crate::image::GrayImage;
use crate::inversion::{invert, InversionResult};
use crate::predictor::{Condition, NoisePredictor};
use crate::sampler::Generation;
use crate::schedule::{NoiseSchedule, ScheduleParams};

fn default_skip() -> usize {
    36
}

fn default_schedule() -> ScheduleParams {
    ScheduleParams::with_default_betas(100, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditParams {
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleParams,
    /// Initial reverse steps skipped; the loop starts at `t = T - skip`.
    #[serde(default = "default_skip")]
    pub skip: usize,
    #[serde(default)]
    pub seed: u64,
    /// Target condition. `Unconditional` is the empty prompt.
    #[serde(default = "unconditional")]
    pub target: Condition,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    /// Condition the inversion's noise estimates use.
    #[serde(default = "unconditional")]
    pub inversion_condition: Condition,
}

fn unconditional() -> Condition {
    Condition::Unconditional
}

impl Default for EditParams {
    fn default() -> Self {
        Self {
            schedule: default_schedule(),
            skip: default_skip(),
            seed: 0,
            target: Condition::Unconditional,
            guidance: GuidanceConfig::default(),
            inversion_condition: Condition::Unconditional,
        }
    }
}

impl EditParams {
    /// Pure reconstruction: empty target, no concepts, no skip.
    pub fn identity(schedule: ScheduleParams, seed: u64) -> Self {
        Self {
            schedule,
            skip: 0,
            seed,
            target: Condition::Unconditional,
            guidance: GuidanceConfig {
                target_scale: 1.0,
                ..Default::default()
            },
            inversion_condition: Condition::Unconditional,
        }
    }

    /// Builds the schedule and checks the cross-field constraints.
    pub fn validate(&self) -> Result<NoiseSchedule> {
        let schedule = self.schedule.build()?;
        if self.skip >= schedule.steps() {
            return Err(Error::param(format!(
                "skip ({}) must be smaller than T ({})",
                self.skip,
                schedule.steps()
            )));
        }
        if self.schedule.eta <= 0.0 {
            return Err(Error::InversionUndefined {
                t: 2.min(schedule.steps()),
            });
        }
        self.guidance.validate()?;
        Ok(schedule)
    }
}

#[derive(Debug, Clone)]
pub struct EditOutput {
    pub edited: Vec<f64>,
    /// States from `x_{T-skip}` down to the edited `x_0`.
    pub trajectory: Vec<Vec<f64>>,
    pub inversion: InversionResult,
}

/// Guided reverse loop over an existing inversion.
pub fn edit_inverted(
    inversion: &InversionResult,
    predictor: &dyn NoisePredictor,
    params: &EditParams,
) -> Result<Generation> {
    let schedule = params.validate()?;
    predictor.check_schedule(&schedule)?;
    if inversion.condition != params.inversion_condition {
        log::warn!(
            "inversion used condition {} but the run asks for {}; using the stored noise maps as-is",
            inversion.condition,
            params.inversion_condition
        );
    }
    let t_start = schedule.steps() - params.skip;
    inversion.reverse(t_start, &schedule, |x, t| {
        guided_eps(
            x,
            t,
            t_start - t,
            predictor,
            &params.target,
            &params.guidance,
        )
    })
}

/// Inverts `x0` and edits it.
pub fn ledits_edit(
    x0: &[f64],
    predictor: &dyn NoisePredictor,
    params: &EditParams,
) -> Result<EditOutput> {
    let schedule = params.validate()?;
    let inversion = invert(
        x0,
        predictor,
        &params.inversion_condition,
        &schedule,
        params.seed,
    )?;
    let out = edit_inverted(&inversion, predictor, params)?;
    Ok(EditOutput {
        edited: out.x0,
        trajectory: out.trajectory,
        inversion,
    })
}

/// Edits an image with a learned denoiser. Pixels map to `[-1, 1]` on the
/// way in; the result is returned unclamped (clamping happens on write).
pub fn edit_image(
    image: &GrayImage,
    predictor: &dyn NoisePredictor,
    params: &EditParams,
) -> Result<GrayImage> {
    let schedule = params.validate()?;
    predictor.check_schedule(&schedule)?;
    let out = ledits_edit(&image.to_signed(), predictor, params)?;
    GrayImage::from_signed(image.width, image.height, &out.edited)
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}
