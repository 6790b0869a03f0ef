//! Edit-friendly DDPM inversion.
//!
//! Every `x_t` of the auxiliary trajectory is an independent forward
//! corruption of `x_0`. The noise maps are the residuals of the reverse step
//! against that trajectory, so replaying the reverse process with them lands
//! exactly on `x_0`, and changing the noise estimate during replay edits it.

use std::io::{Read, Write};
use std::path::Path;

use crate::binio::{BinReader, BinWriter};
use crate::error::{check_dim, Error, Result};
use crate::predictor::{Condition, NoisePredictor};
use crate::rng;
use crate::sampler::{mu_hat, Generation};
use crate::schedule::NoiseSchedule;

const MAGIC: &[u8; 8] = b"LEDINV\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    /// The inverted input.
    pub x0: Vec<f64>,
    /// Auxiliary trajectory `x_1..=x_T`.
    pub xs: Vec<Vec<f64>>,
    /// Noise maps `z_1..=z_T`. `z_1` is always zero because `sigma_1 = 0`.
    pub zs: Vec<Vec<f64>>,
    /// `x_0 - mu_hat_1(x_1)`, added at the last step in place of
    /// `sigma_1 z_1`.
    pub final_residual: Vec<f64>,
    /// Condition the noise estimates were computed under.
    pub condition: Condition,
    pub schedule_fingerprint: u64,
}

impl InversionResult {
    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn steps(&self) -> usize {
        self.xs.len()
    }

    pub fn x_big_t(&self) -> &[f64] {
        self.xs.last().expect("inversion has at least one step")
    }

    /// `x_t` for `t` in `0..=T`, where `x_0` is the source.
    pub fn x_at(&self, t: usize) -> Option<&[f64]> {
        match t {
            0 => Some(&self.x0),
            t => self.xs.get(t - 1).map(Vec::as_slice),
        }
    }

    pub fn z_at(&self, t: usize) -> Option<&[f64]> {
        t.checked_sub(1)
            .and_then(|i| self.zs.get(i))
            .map(Vec::as_slice)
    }

    pub fn check_schedule(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.schedule_fingerprint != schedule.fingerprint() || self.steps() != schedule.steps() {
            return Err(Error::Compatibility(format!(
                "inversion was computed under schedule {:016x}, run uses {:016x}",
                self.schedule_fingerprint,
                schedule.fingerprint()
            )));
        }
        Ok(())
    }

    /// Reverse loop from the stored `x_{t_start}` using the stored noise maps.
    pub fn reverse<F>(
        &self,
        t_start: usize,
        schedule: &NoiseSchedule,
        mut eps_fn: F,
    ) -> Result<Generation>
    where
        F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
    {
        self.check_schedule(schedule)?;
        if t_start == 0 || t_start > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t: t_start,
                max: self.steps(),
            });
        }
        let mut x = self.xs[t_start - 1].clone();
        let mut trajectory = Vec::with_capacity(t_start + 1);
        for t in (1..=t_start).rev() {
            let eps = eps_fn(&x, t)?;
            check_dim(x.len(), eps.len())?;
            let mut next = mu_hat(&x, &eps, t, schedule)?;
            if t == 1 {
                for (n, r) in next.iter_mut().zip(&self.final_residual) {
                    *n += r;
                }
            } else {
                let sigma = schedule.sigma_at(t)?;
                for (n, z) in next.iter_mut().zip(&self.zs[t - 1]) {
                    *n += sigma * z;
                }
            }
            trajectory.push(std::mem::replace(&mut x, next));
        }
        trajectory.push(x.clone());
        Ok(Generation { x0: x, trajectory })
    }

    /// Replays the full reverse loop under `condition`.
    pub fn replay(
        &self,
        predictor: &dyn NoisePredictor,
        condition: &Condition,
        schedule: &NoiseSchedule,
    ) -> Result<Generation> {
        self.reverse(self.steps(), schedule, |x, t| {
            predictor.predict(x, t, condition)
        })
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut out = BinWriter::new(w, MAGIC, VERSION)?;
        out.u64(self.dim() as u64)?;
        out.u64(self.steps() as u64)?;
        out.u64(self.schedule_fingerprint)?;
        out.condition(&self.condition)?;
        out.f64s(&self.x0)?;
        for x in &self.xs {
            out.f64s(x)?;
        }
        for z in &self.zs {
            out.f64s(z)?;
        }
        out.f64s(&self.final_residual)?;
        out.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let (mut inp, version) = BinReader::new(r, MAGIC)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported inversion version {version}"
            )));
        }
        let dim = inp.usize(1 << 24)?;
        let steps = inp.usize(1 << 20)?;
        if dim == 0 || steps == 0 {
            return Err(Error::Format("empty inversion artifact".into()));
        }
        let schedule_fingerprint = inp.u64()?;
        let condition = inp.condition()?;
        let x0 = inp.f64s(dim)?;
        let xs = (0..steps)
            .map(|_| inp.f64s(dim))
            .collect::<Result<Vec<_>>>()?;
        let zs = (0..steps)
            .map(|_| inp.f64s(dim))
            .collect::<Result<Vec<_>>>()?;
        let final_residual = inp.f64s(dim)?;
        inp.finish()?;
        Ok(Self {
            x0,
            xs,
            zs,
            final_residual,
            condition,
            schedule_fingerprint,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

/// Inverts `x0`: draws the auxiliary trajectory from `seed` and isolates the
/// noise maps under `condition`.
pub fn invert(
    x0: &[f64],
    predictor: &dyn NoisePredictor,
    condition: &Condition,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<InversionResult> {
    predictor.check_schedule(schedule)?;
    check_dim(predictor.dim(), x0.len())?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("x_0 must be finite"));
    }
    let steps = schedule.steps();
    for t in 2..=steps {
        if schedule.sigma_at(t)? <= 0.0 {
            return Err(Error::InversionUndefined { t });
        }
    }

    let mut rng = rng::seeded(seed);
    let xs: Vec<Vec<f64>> = (1..=steps)
        .map(|t| {
            let abar = schedule.alpha_bar(t)?;
            let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
            let noise = rng::standard_normal(&mut rng, x0.len());
            Ok(x0.iter().zip(&noise).map(|(x, e)| a * x + b * e).collect())
        })
        .collect::<Result<_>>()?;

    let mut zs = vec![vec![0.0; x0.len()]; steps];
    let mut final_residual = vec![0.0; x0.len()];
    for t in 1..=steps {
        let x_t = &xs[t - 1];
        let eps = predictor.predict(x_t, t, condition)?;
        let mu = mu_hat(x_t, &eps, t, schedule)?;
        if t == 1 {
            final_residual = x0.iter().zip(&mu).map(|(x, m)| x - m).collect();
        } else {
            let sigma = schedule.sigma_at(t)?;
            zs[t - 1] = xs[t - 2]
                .iter()
                .zip(&mu)
                .map(|(x, m)| (x - m) / sigma)
                .collect();
        }
    }

    Ok(InversionResult {
        x0: x0.to_vec(),
        xs,
        zs,
        final_residual,
        condition: condition.clone(),
        schedule_fingerprint: schedule.fingerprint(),
    })
}

/// Per-timestep statistics of noise maps pooled over many inversions.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub t: usize,
    /// Sample variance of each coordinate across runs.
    pub var: Vec<f64>,
    /// Variance pooled over runs and coordinates.
    pub pooled_var: f64,
    /// Pearson correlation of `z_t` with `z_{t+1}` over runs and coordinates.
    pub lag1_corr: f64,
    /// Fisher z statistic of `lag1_corr` against zero correlation.
    pub lag1_z: f64,
    pub samples: usize,
}

fn pearson(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    let (ma, mb) = pairs
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Statistics for `t = 2..=T` (`z_1` is identically zero). Variances need at
/// least two runs and the significance statistic at least four pairs; below
/// that the fields are NaN.
pub fn noise_map_stats(results: &[InversionResult]) -> Result<Vec<StepStats>> {
    let first = results
        .first()
        .ok_or_else(|| Error::param("need at least one inversion"))?;
    let (steps, dim) = (first.steps(), first.dim());
    for r in results {
        if r.steps() != steps || r.dim() != dim {
            return Err(Error::param(
                "inversions must share step count and dimension",
            ));
        }
    }
    let n = results.len();
    Ok((2..=steps)
        .map(|t| {
            let var: Vec<f64> = (0..dim)
                .map(|j| {
                    if n < 2 {
                        return f64::NAN;
                    }
                    let mean = results.iter().map(|r| r.zs[t - 1][j]).sum::<f64>() / n as f64;
                    results
                        .iter()
                        .map(|r| (r.zs[t - 1][j] - mean).powi(2))
                        .sum::<f64>()
                        / (n - 1) as f64
                })
                .collect();
            let pooled: Vec<f64> = results
                .iter()
                .flat_map(|r| r.zs[t - 1].iter().copied())
                .collect();
            let m = pooled.len();
            let pooled_var = if m < 2 {
                f64::NAN
            } else {
                let mean = pooled.iter().sum::<f64>() / m as f64;
                pooled.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (m - 1) as f64
            };
            let (lag1_corr, lag1_z) = if t < steps && m >= 4 {
                let pairs: Vec<(f64, f64)> = results
                    .iter()
                    .flat_map(|r| r.zs[t - 1].iter().copied().zip(r.zs[t].iter().copied()))
                    .collect();
                let c = pearson(&pairs);
                (c, c.atanh() * ((m - 3) as f64).sqrt())
            } else {
                (f64::NAN, f64::NAN)
            };
            StepStats {
                t,
                var,
                pooled_var,
                lag1_corr,
                lag1_z,
                samples: n,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{GaussianMixture, GmmPredictor};
    use crate::schedule::ScheduleParams;

    fn setup(eta: f64) -> (GmmPredictor, NoiseSchedule) {
        let s = ScheduleParams::with_default_betas(100, eta)
            .build()
            .unwrap();
        let g = GaussianMixture::isotropic(&[vec![-2.0, 0.5], vec![2.0, -0.5]], 0.3).unwrap();
        (GmmPredictor::new(g, s.clone()), s)
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn replay_reconstructs_source() {
        let (p, s) = setup(1.0);
        for seed in 0..10 {
            let x0 = rng::standard_normal(&mut rng::seeded(100 + seed), 2);
            let inv = invert(&x0, &p, &Condition::Unconditional, &s, seed).unwrap();
            assert_eq!(inv.zs.len(), 100);
            assert!(inv.zs[0].iter().all(|&z| z == 0.0));
            let out = inv.replay(&p, &Condition::Unconditional, &s).unwrap();
            assert!(max_abs_diff(&out.x0, &x0) < 1e-6);
            // Every intermediate state is hit as well.
            for t in 1..=100 {
                let replayed = &out.trajectory[100 - t];
                assert!(max_abs_diff(replayed, inv.x_at(t).unwrap()) < 1e-9);
            }
        }
    }

    #[test]
    fn eta_zero_is_rejected() {
        let (p, s) = setup(0.0);
        let err = invert(&[0.0, 0.0], &p, &Condition::Unconditional, &s, 0).unwrap_err();
        assert!(matches!(err, Error::InversionUndefined { t: 2 }));
    }

    #[test]
    fn different_condition_changes_replay() {
        let (p, s) = setup(1.0);
        let x0 = vec![-2.0, 0.5];
        let inv = invert(&x0, &p, &Condition::Unconditional, &s, 3).unwrap();
        let out = inv.replay(&p, &Condition::single(1), &s).unwrap();
        assert!(max_abs_diff(&out.x0, &x0) > 1e-3);
    }

    #[test]
    fn artifact_round_trip() {
        let (p, s) = setup(0.7);
        let inv = invert(&[0.3, -0.1], &p, &Condition::subset([1, 0]), &s, 9).unwrap();
        let mut buf = Vec::new();
        inv.write_to(&mut buf).unwrap();
        let back = InversionResult::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, inv);

        let mut truncated = buf.clone();
        truncated.pop();
        assert!(InversionResult::read_from(truncated.as_slice()).is_err());
        let mut extended = buf.clone();
        extended.push(0);
        assert!(InversionResult::read_from(extended.as_slice()).is_err());
        buf[0] = b'X';
        assert!(matches!(
            InversionResult::read_from(buf.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn schedule_mismatch_is_detected() {
        let (p, s) = setup(1.0);
        let inv = invert(&[0.0, 0.0], &p, &Condition::Unconditional, &s, 0).unwrap();
        let other = ScheduleParams::with_default_betas(100, 0.5)
            .build()
            .unwrap();
        assert!(matches!(
            inv.reverse(100, &other, |x, _| Ok(vec![0.0; x.len()])),
            Err(Error::Compatibility(_))
        ));
    }
}
