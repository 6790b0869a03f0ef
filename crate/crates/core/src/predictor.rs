//! Noise-predictor abstraction and the exact predictor for Gaussian-mixture
//! data.
//!
//! Under the forward process `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps`,
//! a diagonal Gaussian mixture stays a diagonal Gaussian mixture: component
//! `k` has mean `sqrt(abar_t) mu_k` and variance `abar_t var_k + 1 - abar_t`.
//! The MMSE noise estimate is `-sqrt(1 - abar_t) * grad log p_t(x)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::schedule::NoiseSchedule;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Conditioning signal. Stands in for a text prompt or an edit concept:
/// a condition selects a subset of mixture components (or data classes).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Unconditional,
    Subset(Vec<usize>),
}

impl Condition {
    /// Sorted, deduplicated subset condition.
    pub fn subset(indices: impl IntoIterator<Item = usize>) -> Self {
        let mut v: Vec<usize> = indices.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        Condition::Subset(v)
    }

    pub fn single(index: usize) -> Self {
        Condition::Subset(vec![index])
    }

    pub fn is_unconditional(&self) -> bool {
        matches!(self, Condition::Unconditional)
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Condition::Unconditional => write!(f, "unconditional"),
            Condition::Subset(s) => write!(f, "subset{s:?}"),
        }
    }
}

/// `eps_theta(x, t, c)`. Implementations must be deterministic.
pub trait NoisePredictor: Send + Sync {
    fn dim(&self) -> usize;

    fn predict(&self, x: &[f64], t: usize, condition: &Condition) -> Result<Vec<f64>>;

    /// Rejects schedules the predictor was not built for.
    fn check_schedule(&self, _schedule: &NoiseSchedule) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal of the covariance.
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture", into = "RawMixture")]
pub struct GaussianMixture {
    components: Vec<Component>,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMixture {
    components: Vec<Component>,
}

impl TryFrom<RawMixture> for GaussianMixture {
    type Error = Error;
    fn try_from(raw: RawMixture) -> Result<Self> {
        GaussianMixture::new(raw.components)
    }
}

impl From<GaussianMixture> for RawMixture {
    fn from(g: GaussianMixture) -> Self {
        RawMixture {
            components: g.components,
        }
    }
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::param("mixture needs at least one component"))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::param("mixture dimension must be >= 1"));
        }
        for (k, c) in components.iter().enumerate() {
            check_dim(dim, c.mean.len())?;
            check_dim(dim, c.var.len())?;
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::param(format!("component {k} weight must be > 0")));
            }
            if c.var.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::param(format!(
                    "component {k} variances must be positive"
                )));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::param(format!("component {k} mean is not finite")));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::param(format!(
                "mixture weights must sum to 1 (got {total})"
            )));
        }
        Ok(Self { components, dim })
    }

    /// Like [`GaussianMixture::new`] but rescales positive weights to sum to 1.
    pub fn normalized(mut components: Vec<Component>) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if total > 0.0 && total.is_finite() {
            for c in &mut components {
                c.weight /= total;
            }
        }
        Self::new(components)
    }

    /// Equal-weight mixture with isotropic variance.
    pub fn isotropic(means: &[Vec<f64>], var: f64) -> Result<Self> {
        let w = 1.0 / means.len().max(1) as f64;
        Self::normalized(
            means
                .iter()
                .map(|m| Component {
                    weight: w,
                    mean: m.clone(),
                    var: vec![var; m.len()],
                })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Restriction to `condition` with renormalized weights.
    pub fn restrict(&self, condition: &Condition) -> Result<GaussianMixture> {
        match condition {
            Condition::Unconditional => Ok(self.clone()),
            Condition::Subset(idx) => {
                if idx.is_empty() {
                    return Err(Error::param("subset condition must be nonempty"));
                }
                let mut picked = Vec::with_capacity(idx.len());
                for &k in idx {
                    let c = self.components.get(k).ok_or_else(|| {
                        Error::UnknownCondition(format!(
                            "component {k} (mixture has {})",
                            self.components.len()
                        ))
                    })?;
                    picked.push(c.clone());
                }
                GaussianMixture::normalized(picked)
            }
        }
    }

    /// Per-component `log w_k + log N_k(x)` for the marginal at `abar`.
    fn log_joint(&self, x: &[f64], abar: f64) -> Vec<f64> {
        let s = abar.sqrt();
        self.components
            .iter()
            .map(|c| {
                let mut acc = c.weight.ln();
                for ((xj, m), var) in x.iter().zip(&c.mean).zip(&c.var) {
                    let v = abar * var + (1.0 - abar);
                    let r = xj - s * m;
                    acc -= 0.5 * (LN_2PI + v.ln() + r * r / v);
                }
                acc
            })
            .collect()
    }

    /// `log p(x)` of the forward marginal with cumulative signal level `abar`.
    pub fn marginal_log_density(&self, x: &[f64], abar: f64) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(log_sum_exp(&self.log_joint(x, abar)))
    }

    /// Component responsibilities under the forward marginal at `abar`.
    pub fn responsibilities(&self, x: &[f64], abar: f64) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        Ok(softmax(&self.log_joint(x, abar)))
    }

    /// `grad_x log p(x)` of the forward marginal at `abar`.
    pub fn score(&self, x: &[f64], abar: f64) -> Result<Vec<f64>> {
        let resp = self.responsibilities(x, abar)?;
        let s = abar.sqrt();
        let mut out = vec![0.0; self.dim];
        for (c, &r) in self.components.iter().zip(&resp) {
            if r == 0.0 {
                continue;
            }
            for j in 0..self.dim {
                let v = abar * c.var[j] + (1.0 - abar);
                out[j] -= r * (x[j] - s * c.mean[j]) / v;
            }
        }
        Ok(out)
    }

    /// Draws `x_0` and the index of the component it came from.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        use rand_distr::{Distribution, StandardNormal};
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                k = i;
                break;
            }
        }
        let c = &self.components[k];
        let x = (0..self.dim)
            .map(|j| {
                let z: f64 = StandardNormal.sample(rng);
                c.mean[j] + c.var[j].sqrt() * z
            })
            .collect();
        (x, k)
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Exact noise estimate for mixture data at timestep `t`.
pub fn gmm_eps(
    x: &[f64],
    t: usize,
    gmm: &GaussianMixture,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    schedule.sigma_at(t)?;
    let abar = schedule.alpha_bar(t)?;
    let k = (1.0 - abar).sqrt();
    let mut eps = gmm.score(x, abar)?;
    for e in &mut eps {
        *e *= -k;
    }
    Ok(eps)
}

/// [`gmm_eps`] on the sub-mixture selected by `condition`.
pub fn conditional_eps(
    x: &[f64],
    t: usize,
    gmm: &GaussianMixture,
    condition: &Condition,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    match condition {
        Condition::Unconditional => gmm_eps(x, t, gmm, schedule),
        Condition::Subset(_) => gmm_eps(x, t, &gmm.restrict(condition)?, schedule),
    }
}

/// Responsibilities of each component for `x` under the time-`t` marginal.
/// `t = 0` evaluates against the data distribution itself.
pub fn component_posterior(
    x: &[f64],
    t: usize,
    gmm: &GaussianMixture,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    gmm.responsibilities(x, schedule.alpha_bar(t)?)
}

/// The analytic predictor bound to a schedule.
#[derive(Debug, Clone)]
pub struct GmmPredictor {
    gmm: GaussianMixture,
    schedule: NoiseSchedule,
}

impl GmmPredictor {
    pub fn new(gmm: GaussianMixture, schedule: NoiseSchedule) -> Self {
        Self { gmm, schedule }
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.gmm
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
}

impl NoisePredictor for GmmPredictor {
    fn dim(&self) -> usize {
        self.gmm.dim()
    }

    fn predict(&self, x: &[f64], t: usize, condition: &Condition) -> Result<Vec<f64>> {
        conditional_eps(x, t, &self.gmm, condition, &self.schedule)
    }

    fn check_schedule(&self, schedule: &NoiseSchedule) -> Result<()> {
        if schedule.alpha_bars() != self.schedule.alpha_bars() {
            return Err(Error::Compatibility(
                "analytic predictor was bound to a different noise schedule".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleParams;

    fn sched() -> NoiseSchedule {
        ScheduleParams::with_default_betas(100, 1.0)
            .build()
            .unwrap()
    }

    #[test]
    fn single_standard_gaussian_closed_form() {
        let s = sched();
        let g = GaussianMixture::isotropic(&[vec![0.0, 0.0, 0.0]], 1.0).unwrap();
        let x = [0.3, -1.2, 2.5];
        for t in [1, 17, 50, 100] {
            let eps = gmm_eps(&x, t, &g, &s).unwrap();
            let k = (1.0 - s.alpha_bar(t).unwrap()).sqrt();
            for j in 0..3 {
                assert!((eps[j] - k * x[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn symmetric_pair_at_origin() {
        let s = sched();
        let g = GaussianMixture::isotropic(&[vec![2.0, -1.0], vec![-2.0, 1.0]], 0.5).unwrap();
        let eps = gmm_eps(&[0.0, 0.0], 40, &g, &s).unwrap();
        assert!(eps.iter().all(|e| e.abs() < 1e-15));
        let post = component_posterior(&[0.0, 0.0], 40, &g, &s).unwrap();
        assert!((post[0] - 0.5).abs() < 1e-15 && (post[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn posterior_concentrates_on_separated_component() {
        let s = sched();
        let g =
            GaussianMixture::isotropic(&[vec![-10.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0]], 0.25)
                .unwrap();
        for t in [0, 1, 10] {
            let abar = s.alpha_bar(t).unwrap();
            for k in 0..3 {
                let x: Vec<f64> = g.components()[k]
                    .mean
                    .iter()
                    .map(|m| abar.sqrt() * m)
                    .collect();
                let post = component_posterior(&x, t, &g, &s).unwrap();
                assert!(post[k] > 0.99, "t={t} k={k} post={post:?}");
            }
        }
    }

    #[test]
    fn posterior_is_normalized_far_from_data() {
        let s = sched();
        let g = GaussianMixture::isotropic(&[vec![-1.0], vec![1.0]], 0.01).unwrap();
        for x in [-1e3, -5.0, 0.0, 7.0, 1e3] {
            let post = component_posterior(&[x], 0, &g, &s).unwrap();
            assert!(post.iter().all(|p| *p >= 0.0 && p.is_finite()));
            assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn unconditional_equals_full_mixture() {
        let s = sched();
        let g = GaussianMixture::isotropic(&[vec![1.0, 1.0], vec![-1.0, 0.5]], 0.3).unwrap();
        let x = [0.2, 0.1];
        assert_eq!(
            conditional_eps(&x, 30, &g, &Condition::Unconditional, &s).unwrap(),
            gmm_eps(&x, 30, &g, &s).unwrap()
        );
    }

    #[test]
    fn singleton_condition_is_that_component() {
        let s = sched();
        let g = GaussianMixture::normalized(vec![
            Component {
                weight: 0.2,
                mean: vec![1.0, -2.0],
                var: vec![0.5, 2.0],
            },
            Component {
                weight: 0.8,
                mean: vec![-3.0, 0.0],
                var: vec![1.0, 1.0],
            },
        ])
        .unwrap();
        let x = [0.4, 0.9];
        let t = 25;
        let abar = s.alpha_bar(t).unwrap();
        let eps = conditional_eps(&x, t, &g, &Condition::single(0), &s).unwrap();
        let c = &g.components()[0];
        for j in 0..2 {
            let v = abar * c.var[j] + 1.0 - abar;
            let expected = (1.0 - abar).sqrt() * (x[j] - abar.sqrt() * c.mean[j]) / v;
            assert!((eps[j] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_or_invalid_subsets_are_rejected() {
        let s = sched();
        let g = GaussianMixture::isotropic(&[vec![0.0]], 1.0).unwrap();
        assert!(matches!(
            conditional_eps(&[0.0], 5, &g, &Condition::Subset(vec![]), &s),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            conditional_eps(&[0.0], 5, &g, &Condition::single(3), &s),
            Err(Error::UnknownCondition(_))
        ));
    }

    #[test]
    fn mixture_validation() {
        assert!(GaussianMixture::new(vec![]).is_err());
        assert!(GaussianMixture::new(vec![Component {
            weight: 0.5,
            mean: vec![0.0],
            var: vec![1.0]
        }])
        .is_err());
        assert!(GaussianMixture::new(vec![Component {
            weight: 1.0,
            mean: vec![0.0],
            var: vec![0.0]
        }])
        .is_err());
        let json = r#"{"components":[{"weight":1.0,"mean":[0.0],"var":[-1.0]}]}"#;
        assert!(serde_json::from_str::<GaussianMixture>(json).is_err());
        let json = r#"{"components":[{"weight":1.0,"mean":[0.0, 1.0],"var":[1.0, 2.0]}]}"#;
        let g: GaussianMixture = serde_json::from_str(json).unwrap();
        assert_eq!(g.dim(), 2);
    }

    #[test]
    fn dimension_mismatch() {
        let s = sched();
        let g = GaussianMixture::isotropic(&[vec![0.0, 0.0]], 1.0).unwrap();
        assert!(matches!(
            gmm_eps(&[0.0], 3, &g, &s),
            Err(Error::DimensionMismatch {
                expected: 2,
                got: 1
            })
        ));
    }

    #[test]
    fn predictions_are_bit_deterministic() {
        let s = sched();
        let g =
            GaussianMixture::isotropic(&[vec![1.0, 2.0], vec![-1.0, 0.0], vec![0.0, -3.0]], 0.2)
                .unwrap();
        let p = GmmPredictor::new(g, s);
        let x = [0.123, -0.456];
        let a = p.predict(&x, 63, &Condition::subset([0, 2])).unwrap();
        let b = p.predict(&x, 63, &Condition::subset([2, 0])).unwrap();
        assert_eq!(a, b);
    }
}
