use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, Dataset, MlpArch, MlpDenoiser};
use crate::error::{check_dim, Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;

/// One training example. The network input is
/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` and the target is `eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x0: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
    pub cond_id: usize,
}

impl Example {
    pub fn noised(&self, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        schedule.sigma_at(self.t)?;
        let abar = schedule.alpha_bar(self.t)?;
        let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
        Ok(self
            .x0
            .iter()
            .zip(&self.eps)
            .map(|(x, e)| a * x + b * e)
            .collect())
    }
}

/// Epsilon-matching MSE of an arbitrary predictor `f(x_t, t, cond_id)`.
pub fn eps_matching_loss<F>(batch: &[Example], schedule: &NoiseSchedule, mut f: F) -> Result<f64>
where
    F: FnMut(&[f64], usize, usize) -> Result<Vec<f64>>,
{
    if batch.is_empty() {
        return Err(Error::param("batch must be nonempty"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in batch {
        let x_t = ex.noised(schedule)?;
        let pred = f(&x_t, ex.t, ex.cond_id)?;
        check_dim(ex.eps.len(), pred.len())?;
        total += pred
            .iter()
            .zip(&ex.eps)
            .map(|(p, e)| (p - e) * (p - e))
            .sum::<f64>();
        count += pred.len();
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Learning rate at the last step as a fraction of the initial one;
    /// the rate decays linearly in between.
    pub final_lr_fraction: f64,
    pub seed: u64,
    /// Probability of replacing the label with the unconditional slot.
    pub cond_dropout: f64,
    pub hidden: Vec<usize>,
}

fn default_final_lr_fraction() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            steps_per_epoch: 40,
            batch_size: 64,
            adam: AdamConfig::default(),
            final_lr_fraction: default_final_lr_fraction(),
            seed: 0,
            cond_dropout: 0.1,
            hidden: vec![128, 128],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::param(
                "epochs, steps_per_epoch and batch_size must be >= 1",
            ));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.epsilon > 0.0) {
            return Err(Error::param(
                "learning rate and Adam epsilon must be positive",
            ));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::param("Adam betas must be in [0, 1)"));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::param(
                "final learning-rate fraction must be in (0, 1]",
            ));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::param("condition dropout must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Mean training loss per epoch, 1-based.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<(usize, f64)>,
}

/// Trains a classifier-free denoiser on `dataset`. Labels become condition
/// ids; with probability `cond_dropout` the unconditional id is used instead.
pub fn train(
    dataset: &dyn Dataset,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<(MlpDenoiser, TrainLog)> {
    config.validate()?;
    let arch =
        MlpArch::new(dataset.dim(), dataset.num_classes()).with_hidden(config.hidden.clone());
    let mut model = MlpDenoiser::init(arch, schedule, config.seed)?;
    let mut adam = Adam::new(config.adam, model.num_params());
    let mut data_rng = rng::stream(config.seed, 1);
    let uncond = model.unconditional_id();
    let steps = schedule.steps();
    let mut log = TrainLog::default();
    let total_steps = config.epochs * config.steps_per_epoch;
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..config.steps_per_epoch {
            let batch: Vec<Example> = (0..config.batch_size)
                .map(|_| {
                    let (x0, label) = dataset.sample(&mut data_rng);
                    let t = data_rng.random_range(1..=steps);
                    let eps = rng::standard_normal(&mut data_rng, x0.len());
                    let cond_id = if data_rng.random::<f64>() < config.cond_dropout {
                        uncond
                    } else {
                        label
                    };
                    Example {
                        x0,
                        t,
                        eps,
                        cond_id,
                    }
                })
                .collect();
            let (loss, grads) = model.loss_and_grads(&batch)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, loss });
            }
            let progress = if total_steps > 1 {
                step as f64 / (total_steps - 1) as f64
            } else {
                0.0
            };
            let frac = 1.0 - (1.0 - config.final_lr_fraction) * progress;
            adam.set_learning_rate(config.adam.learning_rate * frac);
            adam.step(model.params_mut(), &grads);
            step += 1;
            epoch_loss += loss;
        }
        let mean = epoch_loss / config.steps_per_epoch as f64;
        log::info!("epoch {epoch}: loss {mean:.6}");
        log.epochs.push((epoch, mean));
    }
    Ok((model, log))
}
