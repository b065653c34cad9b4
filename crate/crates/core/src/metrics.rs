//! Field comparison metrics, the radial vorticity spectrum, ensemble pulls and autoregressive rollouts.

use std::f64::consts::PI;

use crate::diffusion::{self, EnsembleStats, SampleShape, TimeGrid, VelocityPredictor};
use crate::error::{Error, Result};
use crate::field::{ConditioningContext, Field};
use crate::schedule::NoiseSchedule;
use crate::spectral::{wavenumber, Fft2};

fn same_len(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    Ok(())
}

/// Relative Frobenius-norm error `|pred - truth| / |truth|`.
pub fn rfne(pred: &[f32], truth: &[f32]) -> Result<f64> {
    same_len(pred, truth)?;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (p as f64, t as f64);
        num += (p - t) * (p - t);
        den += t * t;
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric(
            "RFNE against a zero-norm truth".into(),
        ));
    }
    Ok((num / den).sqrt())
}

/// Pearson correlation coefficient.
pub fn pcc(pred: &[f32], truth: &[f32]) -> Result<f64> {
    same_len(pred, truth)?;
    let n = pred.len() as f64;
    let mp = pred.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mt = truth.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(truth) {
        let (dp, dt) = (p as f64 - mp, t as f64 - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("PCC of a constant field".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Radially binned vorticity spectrum with unit-width annuli centred on `k = 1..=n/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumBins {
    pub k_centers: Vec<f64>,
    pub energy: Vec<f64>,
    pub n_modes_per_bin: Vec<usize>,
    /// Contribution of modes with `round(|k|) > n/2` (the grid corners).
    pub excluded: f64,
}

impl SpectrumBins {
    pub fn total(&self) -> f64 {
        self.energy.iter().sum::<f64>() + self.excluded
    }
}

/// Per-mode contribution `pi |w_k|^2 / ((nx ny)^2 |k|)`, DC excluded.
pub fn spectrum_modes(field: &Field) -> Result<Vec<(f64, f64)>> {
    if field.nx != field.ny {
        return Err(Error::Shape(format!(
            "spectrum needs a square grid, got {}x{}",
            field.nx, field.ny
        )));
    }
    let n = field.nx;
    let fft = Fft2::new(n, n);
    let vals: Vec<f64> = field.values.iter().map(|&v| v as f64).collect();
    let spec = fft.forward_real(&vals);
    let norm = ((n * n) as f64).powi(2);
    let mut out = Vec::with_capacity(n * n - 1);
    for (i, c) in spec.iter().enumerate() {
        let kx = wavenumber(i % n, n);
        let ky = wavenumber(i / n, n);
        let k = (kx * kx + ky * ky).sqrt();
        if k > 0.0 {
            out.push((k, PI * c.norm_sqr() / (norm * k)));
        }
    }
    Ok(out)
}

pub fn vorticity_spectrum(field: &Field) -> Result<SpectrumBins> {
    let modes = spectrum_modes(field)?;
    let half = field.nx / 2;
    let mut energy = vec![0.0; half];
    let mut counts = vec![0usize; half];
    let mut excluded = 0.0;
    for (k, e) in modes {
        let bin = k.round() as usize;
        if (1..=half).contains(&bin) {
            energy[bin - 1] += e;
            counts[bin - 1] += 1;
        } else {
            excluded += e;
        }
    }
    Ok(SpectrumBins {
        k_centers: (1..=half).map(|k| k as f64).collect(),
        energy,
        n_modes_per_bin: counts,
        excluded,
    })
}

/// Summary of the per-pixel pull `(mean - truth) / std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PullStats {
    pub pull_mean: f64,
    pub pull_std: f64,
    pub used: usize,
    /// Pixels skipped because their ensemble std was at or below the floor.
    pub masked: usize,
}

pub fn pull_stats(ens: &EnsembleStats, truth: &[f32], std_floor: f64) -> Result<PullStats> {
    same_len(&ens.mean, truth)?;
    same_len(&ens.std, truth)?;
    let pulls: Vec<f64> = ens
        .mean
        .iter()
        .zip(&ens.std)
        .zip(truth)
        .filter(|((_, &s), _)| s as f64 > std_floor)
        .map(|((&m, &s), &t)| (m as f64 - t as f64) / s as f64)
        .collect();
    let masked = truth.len() - pulls.len();
    if pulls.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "pull mask keeps {} of {} pixels",
            pulls.len(),
            truth.len()
        )));
    }
    let n = pulls.len() as f64;
    let mean = pulls.iter().sum::<f64>() / n;
    let var = pulls.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(PullStats {
        pull_mean: mean,
        pull_std: var.sqrt(),
        used: pulls.len(),
        masked,
    })
}

/// Produces the physical-unit residual `X_{n+1} - X_n` from a forecast context.
pub trait ResidualForecaster {
    fn forecast(&self, context: &ConditioningContext, step: usize) -> Result<Vec<f32>>;
}

/// Always predicts no change.
#[derive(Debug, Clone, Copy, Default)]
pub struct Persistence;

impl ResidualForecaster for Persistence {
    fn forecast(&self, context: &ConditioningContext, _step: usize) -> Result<Vec<f32>> {
        Ok(vec![0.0; context.base().len()])
    }
}

/// Diffusion sampling of the normalized residual, mapped back to physical units.
pub struct DiffusionForecaster<'a, P: VelocityPredictor + ?Sized> {
    pub predictor: &'a P,
    pub n_steps: usize,
    pub schedule: NoiseSchedule,
    pub grid: TimeGrid,
    pub seed: u64,
    pub norm_mean: f64,
    pub norm_std: f64,
}

impl<P: VelocityPredictor + ?Sized> ResidualForecaster for DiffusionForecaster<'_, P> {
    fn forecast(&self, context: &ConditioningContext, step: usize) -> Result<Vec<f32>> {
        let mut ctx = context.clone();
        for s in &mut ctx.snapshots {
            s.values = crate::dataio::normalize(&s.values, self.norm_mean, self.norm_std)?;
        }
        let base = ctx.base();
        let shape = SampleShape::scalar_grid(base.ny, base.nx);
        let r = diffusion::sample(
            self.predictor,
            &ctx,
            shape,
            self.n_steps,
            &self.schedule,
            self.seed.wrapping_add(step as u64),
            self.grid,
        )?;
        crate::dataio::denormalize(&r, self.norm_mean, self.norm_std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub field: Field,
    pub pcc: f64,
}

/// Feed single-step forecasts back as inputs for `truth.len()` steps and score each against `truth`.
pub fn autoregressive_rollout(
    forecaster: &impl ResidualForecaster,
    previous: &Field,
    current: &Field,
    truth: &[Field],
) -> Result<Vec<RolloutStep>> {
    if truth.is_empty() {
        return Err(Error::Parameter(
            "rollout horizon must be at least 1".into(),
        ));
    }
    if !previous.same_grid(current) || truth.iter().any(|t| !t.same_grid(current)) {
        return Err(Error::Shape("rollout frames differ in grid size".into()));
    }
    let mut prev = previous.clone();
    let mut cur = current.clone();
    let mut out = Vec::with_capacity(truth.len());
    for (k, target) in truth.iter().enumerate() {
        let step = k + 1;
        let ctx = ConditioningContext::forecast(prev.clone(), cur.clone(), cur.re_tag, 1);
        let wrap = |e| Error::Rollout {
            step,
            source: Box::new(e),
        };
        let r = forecaster.forecast(&ctx, step).map_err(wrap)?;
        if r.len() != cur.len() {
            return Err(wrap(Error::Shape(format!(
                "forecaster returned {} values for {}",
                r.len(),
                cur.len()
            ))));
        }
        let vals: Vec<f32> = cur.values.iter().zip(&r).map(|(a, b)| a + b).collect();
        let mut next = cur.with_values(vals).map_err(wrap)?;
        next.time_index = cur.time_index + 1;
        let score = pcc(&next.values, &target.values)?;
        out.push(RolloutStep {
            field: next.clone(),
            pcc: score,
        });
        prev = std::mem::replace(&mut cur, next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn rfne_cases() {
        let t = noise(256, 1);
        assert_eq!(rfne(&t, &t).unwrap(), 0.0);
        let two: Vec<f32> = t.iter().map(|v| 2.0 * v).collect();
        assert!((rfne(&two, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!((rfne(&vec![0.0; 256], &t).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            rfne(&t, &vec![0.0; 256]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(rfne(&t, &t[..3]), Err(Error::Shape(_))));
    }

    #[test]
    fn pcc_cases() {
        let t = noise(1000, 2);
        let aff: Vec<f32> = t.iter().map(|v| 3.0 * v + 7.0).collect();
        assert!((pcc(&aff, &t).unwrap() - 1.0).abs() < 1e-9);
        let neg: Vec<f32> = t.iter().map(|v| -v).collect();
        assert!((pcc(&neg, &t).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(
            pcc(&vec![1.0; 1000], &t),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn independent_fields_are_uncorrelated() {
        let a = noise(1_000_000, 3);
        let b = noise(1_000_000, 4);
        assert!(pcc(&a, &b).unwrap().abs() < 0.01);
    }

    #[test]
    fn single_mode_spectrum() {
        let n = 64;
        let f = Field::from_fn(n, n, |x, _| (5.0 * x as f64 * 2.0 * PI / n as f64).sin()).unwrap();
        let s = vorticity_spectrum(&f).unwrap();
        assert_eq!(s.energy.len(), n / 2);
        let total = s.total();
        assert!(s.energy[4] / total > 0.999);
        // per-mode oracle: two modes at |k| = 5 with |w_k| = n^2 / 2
        let expected = 2.0 * PI * ((n * n) as f64 / 2.0).powi(2) / (((n * n) as f64).powi(2) * 5.0);
        assert!((s.energy[4] - expected).abs() < 1e-6 * expected);
        let z = vorticity_spectrum(&Field::zeros(n, n).unwrap()).unwrap();
        assert!(z.energy.iter().all(|&e| e == 0.0));
        assert!(vorticity_spectrum(&Field::zeros(16, 8).unwrap()).is_err());
    }

    #[test]
    fn spectrum_bins_partition_modes() {
        let n = 32;
        let vals = noise(n * n, 5);
        let f = Field::new(n, n, vals).unwrap();
        let s = vorticity_spectrum(&f).unwrap();
        let modes = spectrum_modes(&f).unwrap();
        let direct: f64 = modes.iter().map(|m| m.1).sum();
        assert!((s.total() - direct).abs() < 1e-10 * direct);
        assert_eq!(
            s.n_modes_per_bin.iter().sum::<usize>()
                + modes
                    .iter()
                    .filter(|m| m.0.round() as usize > n / 2)
                    .count(),
            n * n - 1
        );
    }

    #[test]
    fn pull_scaling_is_exact() {
        let truth = noise(1000, 6);
        let stack: Vec<Vec<f32>> = (0..10)
            .map(|i| {
                let e = noise(1000, 100 + i);
                truth.iter().zip(&e).map(|(t, e)| t + 0.5 * e).collect()
            })
            .collect();
        let ens = EnsembleStats::from_members(stack).unwrap();
        let base = pull_stats(&ens, &truth, 0.0).unwrap();
        let mut halved = ens.clone();
        halved.std.iter_mut().for_each(|s| *s *= 0.5);
        let h = pull_stats(&halved, &truth, 0.0).unwrap();
        assert!((h.pull_std / base.pull_std - 2.0).abs() < 1e-6);
        assert!(matches!(
            pull_stats(&ens, &truth, 1e9),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn honest_std_and_perfect_mean() {
        let n = 100_000;
        let truth = noise(n, 7);
        let z = noise(n, 8);
        let ens = EnsembleStats {
            mean: truth.iter().zip(&z).map(|(t, z)| t + 0.3 * z).collect(),
            std: vec![0.3; n],
            members: 2,
            stack: vec![],
        };
        let p = pull_stats(&ens, &truth, 0.0).unwrap();
        assert!(p.pull_mean.abs() < 0.02);
        assert!((p.pull_std - 1.0).abs() < 0.02);
        assert_eq!(p.masked, 0);
    }

    fn frames(n: usize) -> Vec<Field> {
        (0..8)
            .map(|k| {
                let mut f = Field::from_fn(16, 16, |x, y| {
                    ((x as f64 + 0.3 * k as f64) * 0.4).sin() + (y as f64 * 0.4).cos()
                })
                .unwrap();
                f.time_index = k;
                f
            })
            .take(n)
            .collect()
    }

    struct Oracle(Vec<Field>);

    impl ResidualForecaster for Oracle {
        fn forecast(&self, ctx: &ConditioningContext, _step: usize) -> Result<Vec<f32>> {
            let k = ctx.base().time_index;
            Ok(self.0[k + 1]
                .values
                .iter()
                .zip(&self.0[k].values)
                .map(|(a, b)| a - b)
                .collect())
        }
    }

    struct Failing;

    impl ResidualForecaster for Failing {
        fn forecast(&self, _: &ConditioningContext, step: usize) -> Result<Vec<f32>> {
            if step == 3 {
                Err(Error::Estimator("boom".into()))
            } else {
                Ok(vec![0.0; 256])
            }
        }
    }

    #[test]
    fn persistence_and_oracle_rollouts() {
        let fr = frames(8);
        let truth = &fr[2..];
        let p = autoregressive_rollout(&Persistence, &fr[0], &fr[1], truth).unwrap();
        for (k, s) in p.iter().enumerate() {
            let direct = pcc(&fr[1].values, &truth[k].values).unwrap();
            assert_eq!(s.pcc, direct);
        }
        let o = autoregressive_rollout(&Oracle(fr.clone()), &fr[0], &fr[1], truth).unwrap();
        assert!(o.iter().all(|s| (s.pcc - 1.0).abs() < 1e-6));
        let e = autoregressive_rollout(&Failing, &fr[0], &fr[1], truth).unwrap_err();
        assert!(matches!(e, Error::Rollout { step: 3, .. }));
        assert!(autoregressive_rollout(&Persistence, &fr[0], &fr[1], &[]).is_err());
    }
}
