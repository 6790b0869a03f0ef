//! DDPM mean predictor and reverse step.
//!
//! `mu_hat_t(x_t) = sqrt(abar_{t-1}) (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)
//!                 + sqrt(1 - abar_{t-1} - sigma_t^2) eps`
//!
//! `x_{t-1} = mu_hat_t(x_t) + sigma_t z_t`
//!
//! With `eta = 0` every `sigma_t` vanishes and the loop is DDIM.

use crate::error::{check_dim, Error, Result};
use crate::predictor::{Condition, NoisePredictor};
use crate::rng::{self, Rng};
use crate::schedule::NoiseSchedule;

/// The two coefficients of `mu_hat_t`: `(on x_t, on eps)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanCoefficients {
    pub x: f64,
    pub eps: f64,
}

pub fn mean_coefficients(t: usize, schedule: &NoiseSchedule) -> Result<MeanCoefficients> {
    let sigma = schedule.sigma_at(t)?;
    let abar = schedule.alpha_bar(t)?;
    let abar_prev = schedule.alpha_bar(t - 1)?;
    let radicand = 1.0 - abar_prev - sigma * sigma;
    if radicand < 0.0 {
        return Err(Error::ScheduleInconsistency { t, radicand });
    }
    let ratio = (abar_prev / abar).sqrt();
    Ok(MeanCoefficients {
        x: ratio,
        eps: radicand.sqrt() - ratio * (1.0 - abar).sqrt(),
    })
}

/// `mu_hat_t(x_t; eps)`.
pub fn mu_hat(x_t: &[f64], eps: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    check_dim(x_t.len(), eps.len())?;
    let sigma = schedule.sigma_at(t)?;
    let abar = schedule.alpha_bar(t)?;
    let abar_prev = schedule.alpha_bar(t - 1)?;
    let radicand = 1.0 - abar_prev - sigma * sigma;
    if radicand < 0.0 {
        return Err(Error::ScheduleInconsistency { t, radicand });
    }
    let (sa, sa_prev, s1a, dir) = (
        abar.sqrt(),
        abar_prev.sqrt(),
        (1.0 - abar).sqrt(),
        radicand.sqrt(),
    );
    Ok(x_t
        .iter()
        .zip(eps)
        .map(|(&x, &e)| sa_prev * (x - s1a * e) / sa + dir * e)
        .collect())
}

#[derive(Debug, Clone, Copy)]
pub struct ReverseStepInput<'a> {
    pub x_t: &'a [f64],
    pub eps: &'a [f64],
    pub t: usize,
    /// Noise map. `None` draws a fresh standard normal (or nothing when
    /// `sigma_t = 0`).
    pub z_t: Option<&'a [f64]>,
}

/// `x_{t-1} = mu_hat_t(x_t) + sigma_t z_t`.
pub fn reverse_step<R: rand::Rng + ?Sized>(
    input: ReverseStepInput<'_>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut out = mu_hat(input.x_t, input.eps, input.t, schedule)?;
    let sigma = schedule.sigma_at(input.t)?;
    match input.z_t {
        Some(z) => {
            check_dim(out.len(), z.len())?;
            for (o, zi) in out.iter_mut().zip(z) {
                *o += sigma * zi;
            }
        }
        None if sigma > 0.0 => {
            let z = rng::standard_normal(rng, out.len());
            for (o, zi) in out.iter_mut().zip(&z) {
                *o += sigma * zi;
            }
        }
        None => {}
    }
    Ok(out)
}

/// Output of a reverse loop. `trajectory[0]` is the start state and the
/// last entry is `x_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub x0: Vec<f64>,
    pub trajectory: Vec<Vec<f64>>,
}

/// Runs the reverse loop from `x_start` at `t_start` down to `t = 1`, calling
/// `eps_fn(x_t, t)` for the noise estimate. Fresh noise comes from `rng`.
pub fn run_reverse<F>(
    x_start: Vec<f64>,
    t_start: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    mut eps_fn: F,
) -> Result<Generation>
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    if t_start > schedule.steps() {
        return Err(Error::TimestepOutOfRange {
            t: t_start,
            max: schedule.steps(),
        });
    }
    let mut trajectory = Vec::with_capacity(t_start + 1);
    let mut x = x_start;
    for t in (1..=t_start).rev() {
        let eps = eps_fn(&x, t)?;
        let next = reverse_step(
            ReverseStepInput {
                x_t: &x,
                eps: &eps,
                t,
                z_t: None,
            },
            schedule,
            rng,
        )?;
        trajectory.push(std::mem::replace(&mut x, next));
    }
    trajectory.push(x.clone());
    Ok(Generation { x0: x, trajectory })
}

/// Ancestral sampling from `x_T` (drawn from `N(0, I)` when not supplied).
pub fn generate(
    predictor: &dyn NoisePredictor,
    condition: &Condition,
    schedule: &NoiseSchedule,
    seed: u64,
    x_t: Option<Vec<f64>>,
) -> Result<Generation> {
    predictor.check_schedule(schedule)?;
    let dim = predictor.dim();
    let mut rng = rng::seeded(seed);
    let start = match x_t {
        Some(x) => {
            check_dim(dim, x.len())?;
            x
        }
        None => rng::standard_normal(&mut rng, dim),
    };
    run_reverse(start, schedule.steps(), schedule, &mut rng, |x, t| {
        predictor.predict(x, t, condition)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{GaussianMixture, GmmPredictor};
    use crate::schedule::ScheduleParams;

    fn sched(eta: f64) -> NoiseSchedule {
        ScheduleParams::with_default_betas(100, eta)
            .build()
            .unwrap()
    }

    fn randn(seed: u64, d: usize) -> Vec<f64> {
        rng::standard_normal(&mut rng::seeded(seed), d)
    }

    #[test]
    fn zero_eps_scales_clean_signal() {
        let s = sched(1.0);
        let x0 = randn(1, 5);
        for t in [1, 2, 50, 100] {
            let sa = s.alpha_bar(t).unwrap().sqrt();
            let xt: Vec<f64> = x0.iter().map(|v| sa * v).collect();
            let mu = mu_hat(&xt, &[0.0; 5], t, &s).unwrap();
            let sp = s.alpha_bar(t - 1).unwrap().sqrt();
            for j in 0..5 {
                assert!((mu[j] - sp * x0[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eta_zero_moves_along_the_same_noise() {
        let s = sched(0.0);
        let x0 = randn(2, 4);
        let eps = randn(3, 4);
        for t in [1, 10, 99] {
            let (a, ap) = (s.alpha_bar(t).unwrap(), s.alpha_bar(t - 1).unwrap());
            let xt: Vec<f64> = (0..4)
                .map(|j| a.sqrt() * x0[j] + (1.0 - a).sqrt() * eps[j])
                .collect();
            let mu = mu_hat(&xt, &eps, t, &s).unwrap();
            for j in 0..4 {
                let expected = ap.sqrt() * x0[j] + (1.0 - ap).sqrt() * eps[j];
                assert!((mu[j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mu_hat_matches_two_path_algebra() {
        let s = sched(1.0);
        let xt = randn(4, 8);
        let eps = randn(5, 8);
        let t = 37;
        let (a, ap, sig) = (
            s.alpha_bar(t).unwrap(),
            s.alpha_bar(t - 1).unwrap(),
            s.sigma_at(t).unwrap(),
        );
        let mu = mu_hat(&xt, &eps, t, &s).unwrap();
        for j in 0..8 {
            let x0_hat = (xt[j] - (1.0 - a).sqrt() * eps[j]) / a.sqrt();
            let expected = ap.sqrt() * x0_hat + (1.0 - ap - sig * sig).sqrt() * eps[j];
            assert!((mu[j] - expected).abs() < 1e-12);
        }
        // The coefficient form agrees too.
        let c = mean_coefficients(t, &s).unwrap();
        for j in 0..8 {
            assert!((mu[j] - (c.x * xt[j] + c.eps * eps[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_step_is_affine_in_z_with_slope_sigma() {
        let s = sched(1.0);
        let xt = randn(6, 3);
        let eps = randn(7, 3);
        let z = randn(8, 3);
        let z2: Vec<f64> = z.iter().map(|v| 2.0 * v).collect();
        let t = 60;
        let mut r = rng::seeded(0);
        let step = |z: &[f64], r: &mut Rng| {
            reverse_step(
                ReverseStepInput {
                    x_t: &xt,
                    eps: &eps,
                    t,
                    z_t: Some(z),
                },
                &s,
                r,
            )
            .unwrap()
        };
        let zero = step(&[0.0; 3], &mut r);
        let one = step(&z, &mut r);
        let two = step(&z2, &mut r);
        let mu = mu_hat(&xt, &eps, t, &s).unwrap();
        assert_eq!(zero, mu);
        let sigma = s.sigma_at(t).unwrap();
        for j in 0..3 {
            assert!(((one[j] - zero[j]) - sigma * z[j]).abs() < 1e-14);
            assert!(((two[j] - one[j]) - sigma * z[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn fresh_noise_is_skipped_when_sigma_vanishes() {
        let s = sched(0.0);
        let xt = randn(9, 3);
        let eps = randn(10, 3);
        let mut r = rng::seeded(0);
        let out = reverse_step(
            ReverseStepInput {
                x_t: &xt,
                eps: &eps,
                t: 50,
                z_t: None,
            },
            &s,
            &mut r,
        )
        .unwrap();
        assert_eq!(out, mu_hat(&xt, &eps, 50, &s).unwrap());
    }

    #[test]
    fn one_step_recovers_clean_component() {
        let s = sched(1.0);
        let x0 = randn(11, 6);
        let eps = randn(12, 6);
        let t = 70;
        let (a, ap, sig) = (
            s.alpha_bar(t).unwrap(),
            s.alpha_bar(t - 1).unwrap(),
            s.sigma_at(t).unwrap(),
        );
        let xt: Vec<f64> = (0..6)
            .map(|j| a.sqrt() * x0[j] + (1.0 - a).sqrt() * eps[j])
            .collect();
        let mu = mu_hat(&xt, &eps, t, &s).unwrap();
        let dir = (1.0 - ap - sig * sig).sqrt();
        for j in 0..6 {
            let x0_part = (mu[j] - dir * eps[j]) / ap.sqrt();
            assert!((x0_part - x0[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn generation_is_deterministic_and_eta_matters() {
        let g = GaussianMixture::isotropic(&[vec![1.0, 1.0], vec![-1.0, -1.0]], 0.3).unwrap();
        let x_t = randn(13, 2);
        let s0 = sched(0.0);
        let p0 = GmmPredictor::new(g.clone(), s0.clone());
        let a = generate(&p0, &Condition::Unconditional, &s0, 5, Some(x_t.clone())).unwrap();
        let b = generate(&p0, &Condition::Unconditional, &s0, 5, Some(x_t.clone())).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trajectory.len(), 101);
        assert_eq!(a.trajectory[0], x_t);
        let s1 = sched(1.0);
        let p1 = GmmPredictor::new(g, s1.clone());
        let c = generate(&p1, &Condition::Unconditional, &s1, 5, Some(x_t)).unwrap();
        let diff =
            a.x0.iter()
                .zip(&c.x0)
                .map(|(u, v)| (u - v).abs())
                .fold(0.0, f64::max);
        assert!(diff > 1e-6);
    }

    #[test]
    fn generate_checks_dimensions_and_schedule() {
        let g = GaussianMixture::isotropic(&[vec![0.0, 0.0]], 1.0).unwrap();
        let s = sched(1.0);
        let p = GmmPredictor::new(g, s.clone());
        assert!(generate(&p, &Condition::Unconditional, &s, 0, Some(vec![0.0])).is_err());
        let other = ScheduleParams::with_default_betas(50, 1.0).build().unwrap();
        assert!(generate(&p, &Condition::Unconditional, &other, 0, None).is_err());
    }
}
