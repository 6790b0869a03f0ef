//! Guided noise estimate: classifier-free guidance toward a target condition
//! plus semantic-guidance terms for each edit concept.
//!
//! A concept term is `+/- scale * (mask ⊙ d)` with `d = eps_concept - eps_base`.
//! The mask keeps the `ceil((1 - threshold) * n)` coordinates with the
//! largest `|d|` (ties go to the lower index) and the term is zero until
//! `warmup` reverse steps have run.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::predictor::{Condition, NoisePredictor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Add,
    Remove,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Add => 1.0,
            Direction::Remove => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptEdit {
    pub condition: Condition,
    pub direction: Direction,
    /// Edit-concept guidance scale.
    #[serde(default = "default_concept_scale")]
    pub scale: f64,
    /// Executed reverse steps before the term switches on.
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    /// Quantile of `|d|` below which coordinates are masked out, in `[0, 1)`.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_concept_scale() -> f64 {
    7.0
}

fn default_warmup() -> usize {
    1
}

fn default_threshold() -> f64 {
    0.95
}

impl ConceptEdit {
    /// Edit with the LEDITS defaults: scale 7, warm-up 1, threshold 0.95.
    pub fn new(condition: Condition, direction: Direction) -> Self {
        Self {
            condition,
            direction,
            scale: default_concept_scale(),
            warmup: default_warmup(),
            threshold: default_threshold(),
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::param(format!(
                "concept scale must be finite and >= 0 (got {})",
                self.scale
            )));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::param(format!(
                "threshold must be in [0, 1) (got {})",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Which estimate the concept differences are taken against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptBaseline {
    #[default]
    Unconditional,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Classifier-free scale for the target condition.
    pub target_scale: f64,
    pub concepts: Vec<ConceptEdit>,
    pub concept_baseline: ConceptBaseline,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            target_scale: 15.0,
            concepts: Vec::new(),
            concept_baseline: ConceptBaseline::Unconditional,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_scale >= 0.0 && self.target_scale.is_finite()) {
            return Err(Error::param(format!(
                "target scale must be finite and >= 0 (got {})",
                self.target_scale
            )));
        }
        self.concepts.iter().try_for_each(ConceptEdit::validate)
    }
}

/// `eps_u + scale * (eps_c - eps_u)`, evaluated as `(1 - scale) eps_u +
/// scale eps_c` so that scales 0 and 1 return an input exactly.
pub fn cfg_combine(eps_uncond: &[f64], eps_target: &[f64], target_scale: f64) -> Result<Vec<f64>> {
    check_dim(eps_uncond.len(), eps_target.len())?;
    let keep = 1.0 - target_scale;
    Ok(eps_uncond
        .iter()
        .zip(eps_target)
        .map(|(&u, &c)| keep * u + target_scale * c)
        .collect())
}

/// Number of coordinates a threshold keeps out of `n`.
pub fn mask_count(threshold: f64, n: usize) -> usize {
    let raw = (1.0 - threshold) * n as f64;
    // (1 - 0.95) * 100 evaluates to 5.000000000000004.
    let k = (raw - 1e-9 * raw.max(1.0)).ceil();
    (k.max(0.0) as usize).min(n)
}

/// Indicator of the coordinates kept for difference `d`.
pub fn concept_mask(d: &[f64], threshold: f64) -> Vec<bool> {
    let keep = mask_count(threshold, d.len());
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[b].abs().total_cmp(&d[a].abs()).then(a.cmp(&b)));
    let mut mask = vec![false; d.len()];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    mask
}

pub fn concept_term(
    eps_base: &[f64],
    eps_concept: &[f64],
    edit: &ConceptEdit,
    step_index: usize,
) -> Result<Vec<f64>> {
    check_dim(eps_base.len(), eps_concept.len())?;
    if step_index < edit.warmup {
        return Ok(vec![0.0; eps_base.len()]);
    }
    let d: Vec<f64> = eps_concept
        .iter()
        .zip(eps_base)
        .map(|(c, u)| c - u)
        .collect();
    let mask = concept_mask(&d, edit.threshold);
    let coef = edit.direction.sign() * edit.scale;
    Ok(d.iter()
        .zip(&mask)
        .map(|(&v, &keep)| if keep { coef * v } else { 0.0 })
        .collect())
}

/// Guided noise estimate at `x_t`. `step_index` counts reverse steps already
/// executed in this loop.
pub fn guided_eps(
    x_t: &[f64],
    t: usize,
    step_index: usize,
    predictor: &dyn NoisePredictor,
    target: &Condition,
    config: &GuidanceConfig,
) -> Result<Vec<f64>> {
    let eps_u = predictor.predict(x_t, t, &Condition::Unconditional)?;
    // An empty target makes the classifier-free combination collapse to eps_u.
    let (eps_target, mut eps) = if target.is_unconditional() {
        (eps_u.clone(), eps_u.clone())
    } else {
        let eps_target = predictor.predict(x_t, t, target)?;
        let eps = cfg_combine(&eps_u, &eps_target, config.target_scale)?;
        (eps_target, eps)
    };
    let base = match config.concept_baseline {
        ConceptBaseline::Unconditional => &eps_u,
        ConceptBaseline::Target => &eps_target,
    };
    for edit in &config.concepts {
        if step_index < edit.warmup || edit.scale == 0.0 {
            continue;
        }
        let eps_c = predictor.predict(x_t, t, &edit.condition)?;
        let term = concept_term(base, &eps_c, edit, step_index)?;
        for (e, v) in eps.iter_mut().zip(&term) {
            *e += v;
        }
    }
    Ok(eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{GaussianMixture, GmmPredictor};
    use crate::rng;
    use crate::schedule::ScheduleParams;
    use proptest::prelude::*;

    fn randn(seed: u64, d: usize) -> Vec<f64> {
        rng::standard_normal(&mut rng::seeded(seed), d)
    }

    fn edit(scale: f64, threshold: f64) -> ConceptEdit {
        ConceptEdit {
            condition: Condition::single(0),
            direction: Direction::Add,
            scale,
            warmup: 1,
            threshold,
        }
    }

    #[test]
    fn cfg_identity_scales() {
        let u = randn(1, 10);
        let c = randn(2, 10);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        let s15 = cfg_combine(&u, &c, 15.0).unwrap();
        for j in 0..10 {
            assert!((s15[j] - (u[j] + 15.0 * (c[j] - u[j]))).abs() < 1e-12);
        }
    }

    #[test]
    fn warmup_gates_the_term() {
        let u = randn(3, 10);
        let c = randn(4, 10);
        let e = edit(7.0, 0.95);
        assert!(concept_term(&u, &c, &e, 0)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(concept_term(&u, &c, &e, 1)
            .unwrap()
            .iter()
            .any(|&v| v != 0.0));
    }

    #[test]
    fn threshold_keeps_top_five_percent() {
        let u = randn(5, 100);
        let c = randn(6, 100);
        let term = concept_term(&u, &c, &edit(7.0, 0.95), 3).unwrap();
        assert_eq!(term.iter().filter(|&&v| v != 0.0).count(), 5);
        assert_eq!(mask_count(0.95, 100), 5);
        assert_eq!(mask_count(0.0, 100), 100);
        assert_eq!(mask_count(0.95, 2), 1);
        assert_eq!(mask_count(0.5, 3), 2);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let mask = concept_mask(&[1.0, -2.0, 2.0, 0.5], 0.75);
        assert_eq!(mask, vec![false, true, false, false]);
    }

    #[test]
    fn remove_is_negated_add() {
        let u = randn(7, 20);
        let c = randn(8, 20);
        let add = edit(3.0, 0.5);
        let remove = ConceptEdit {
            direction: Direction::Remove,
            ..add.clone()
        };
        let a = concept_term(&u, &c, &add, 2).unwrap();
        let r = concept_term(&u, &c, &remove, 2).unwrap();
        assert!(a.iter().zip(&r).all(|(x, y)| *x == -*y));
    }

    #[test]
    fn guided_eps_reductions() {
        let s = ScheduleParams::with_default_betas(100, 1.0)
            .build()
            .unwrap();
        let g =
            GaussianMixture::isotropic(&[vec![1.0, 0.0, 2.0], vec![-1.0, 1.0, 0.0]], 0.4).unwrap();
        let p = GmmPredictor::new(g, s);
        let x = randn(9, 3);
        let t = 40;
        let eps_u = p.predict(&x, t, &Condition::Unconditional).unwrap();
        let eps_1 = p.predict(&x, t, &Condition::single(1)).unwrap();

        let only_target = GuidanceConfig {
            target_scale: 1.0,
            ..Default::default()
        };
        assert_eq!(
            guided_eps(&x, t, 0, &p, &Condition::single(1), &only_target).unwrap(),
            eps_1
        );

        let uncond = GuidanceConfig::default();
        assert_eq!(
            guided_eps(&x, t, 0, &p, &Condition::Unconditional, &uncond).unwrap(),
            eps_u
        );

        let plain = GuidanceConfig {
            target_scale: 4.0,
            ..Default::default()
        };
        let base = guided_eps(&x, t, 5, &p, &Condition::single(0), &plain).unwrap();
        let add = ConceptEdit {
            threshold: 0.3,
            ..edit(6.0, 0.3)
        };
        let remove = ConceptEdit {
            direction: Direction::Remove,
            ..add.clone()
        };
        let cancel = GuidanceConfig {
            concepts: vec![add, remove],
            ..plain
        };
        let out = guided_eps(&x, t, 5, &p, &Condition::single(0), &cancel).unwrap();
        for j in 0..3 {
            assert!((out[j] - base[j]).abs() < 1e-12);
        }

        let zero = GuidanceConfig {
            target_scale: 0.0,
            concepts: vec![edit(0.0, 0.0)],
            ..Default::default()
        };
        assert_eq!(
            guided_eps(&x, t, 9, &p, &Condition::single(1), &zero).unwrap(),
            eps_u
        );
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig {
            target_scale: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let bad = GuidanceConfig {
            concepts: vec![edit(1.0, 1.0)],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(GuidanceConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn term_is_homogeneous_in_scale(
            seed in 0u64..1000,
            n in 1usize..64,
            scale in 0.0f64..50.0,
            threshold in 0.0f64..0.999,
        ) {
            let u = randn(seed, n);
            let c = randn(seed + 7919, n);
            let unit = concept_term(&u, &c, &edit(1.0, threshold), 1).unwrap();
            let scaled = concept_term(&u, &c, &edit(scale, threshold), 1).unwrap();
            for j in 0..n {
                prop_assert!((scaled[j] - scale * unit[j]).abs() <= 1e-12 * (1.0 + scaled[j].abs()));
            }
        }

        #[test]
        fn mask_matches_brute_force_sort(seed in 0u64..1000, n in 1usize..200, threshold in 0.0f64..0.999) {
            let d = randn(seed, n);
            let mask = concept_mask(&d, threshold);
            let keep = mask.iter().filter(|&&m| m).count();
            prop_assert_eq!(keep, mask_count(threshold, n));
            // Every kept |d| dominates every dropped one.
            let min_kept = d.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| v.abs()).fold(f64::INFINITY, f64::min);
            let max_dropped = d.iter().zip(&mask).filter(|(_, &m)| !m).map(|(v, _)| v.abs()).fold(0.0, f64::max);
            prop_assert!(keep == 0 || min_kept >= max_dropped);
        }
    }
}
