//! LEDITS on toy domains: edit-friendly DDPM inversion combined with
//! semantic guidance, over an exact Gaussian-mixture noise predictor and a
//! small trainable MLP denoiser.
//!
//! The usual flow is [`invert`] a source, then run [`edit_inverted`] (or
//! [`ledits_edit`], which does both) with a [`GuidanceConfig`] describing the
//! target condition and any concept edits.

mod binio;
pub mod error;
pub mod guidance;
pub mod image;
pub mod inversion;
pub mod pipeline;
pub mod predictor;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tasks;
pub mod toy_model;

pub use error::{Error, Result};
pub use guidance::{
    cfg_combine, concept_mask, concept_term, guided_eps, mask_count, ConceptBaseline, ConceptEdit,
    Direction, GuidanceConfig,
};
pub use image::GrayImage;
pub use inversion::{invert, noise_map_stats, InversionResult, StepStats};
pub use pipeline::{edit_image, edit_inverted, ledits_edit, mse, EditOutput, EditParams};
pub use predictor::{
    component_posterior, conditional_eps, gmm_eps, Component, Condition, GaussianMixture,
    GmmPredictor, NoisePredictor,
};
pub use sampler::{generate, mu_hat, reverse_step, Generation, ReverseStepInput};
pub use schedule::{NoiseSchedule, ScheduleParams};
pub use toy_model::{MlpArch, MlpDenoiser, TrainConfig, TrainLog};
