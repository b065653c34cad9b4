//! Forward noising, velocity targets and the deterministic DDIM sampler.
//!
//! Tensors are flat `f32` buffers described by a [`SampleShape`]; the
//! per-element arithmetic is carried out in `f64` and rounded once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ConditioningContext;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl SampleShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn scalar_grid(height: usize, width: usize) -> Self {
        Self::new(1, height, width)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `z = alpha(t) r + sigma(t) eps`, with the noise draw kept for target computation.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample {
    pub z: Vec<f32>,
    pub t: f64,
    pub eps: Vec<f32>,
}

/// Anything that maps `(t, z, context)` to a velocity estimate of the same shape.
pub trait VelocityPredictor: Sync {
    fn predict(
        &self,
        t: f64,
        z: &[f32],
        shape: SampleShape,
        context: &ConditioningContext,
    ) -> Result<Vec<f32>>;
}

impl<F> VelocityPredictor for F
where
    F: Fn(f64, &[f32], SampleShape, &ConditioningContext) -> Result<Vec<f32>> + Sync,
{
    fn predict(
        &self,
        t: f64,
        z: &[f32],
        shape: SampleShape,
        context: &ConditioningContext,
    ) -> Result<Vec<f32>> {
        self(t, z, shape, context)
    }
}

fn same_len(a: &[f32], b: &[f32], what: &str) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{what}: {} vs {} elements",
            a.len(),
            b.len()
        )))
    }
}

fn lincomb(a: f64, x: &[f32], b: f64, y: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| (a * xi as f64 + b * yi as f64) as f32)
        .collect()
}

pub fn forward_perturb(
    r: &[f32],
    t: f64,
    eps: &[f32],
    schedule: &NoiseSchedule,
) -> Result<NoisedSample> {
    same_len(r, eps, "residual and noise")?;
    let (alpha, sigma) = schedule.alpha_sigma(t)?;
    Ok(NoisedSample {
        z: lincomb(alpha, r, sigma, eps),
        t,
        eps: eps.to_vec(),
    })
}

/// Training target `v = alpha(t) eps - sigma(t) r`.
pub fn velocity_target(
    r: &[f32],
    t: f64,
    eps: &[f32],
    schedule: &NoiseSchedule,
) -> Result<Vec<f32>> {
    same_len(r, eps, "residual and noise")?;
    let (alpha, sigma) = schedule.alpha_sigma(t)?;
    Ok(lincomb(alpha, eps, -sigma, r))
}

/// Clean-sample estimate implied by a velocity: `alpha z - sigma v`.
pub fn predicted_mean(
    z: &[f32],
    t: f64,
    v_hat: &[f32],
    schedule: &NoiseSchedule,
) -> Result<Vec<f32>> {
    same_len(z, v_hat, "state and velocity")?;
    let (alpha, sigma) = schedule.alpha_sigma(t)?;
    Ok(lincomb(alpha, z, -sigma, v_hat))
}

/// One deterministic update from `t_from` down to `t_to`.
pub fn ddim_step(
    z: &[f32],
    t_from: f64,
    t_to: f64,
    v_hat: &[f32],
    schedule: &NoiseSchedule,
) -> Result<Vec<f32>> {
    same_len(z, v_hat, "state and velocity")?;
    if t_to >= t_from {
        return Err(Error::Ordering { t_from, t_to });
    }
    let (a, s) = schedule.alpha_sigma(t_from)?;
    let (a_to, s_to) = schedule.alpha_sigma(t_to)?;
    Ok(z.iter()
        .zip(v_hat)
        .map(|(&zi, &vi)| {
            let (zi, vi) = (zi as f64, vi as f64);
            let mean = a * zi - s * vi;
            let eps = a * vi + s * zi;
            (a_to * mean + s_to * eps) as f32
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeGrid {
    /// Equally spaced in `t`.
    #[default]
    UniformT,
    /// Equally spaced in log-SNR between the schedule clamps.
    UniformLogSnr,
}

/// Decreasing sampling times `t_0 = t_max > ... > t_N = 0`.
///
/// The start is clamped to `t_max`; the end is exactly zero so that the last
/// update returns the clean-sample estimate.
pub fn time_grid(schedule: &NoiseSchedule, n_steps: usize, grid: TimeGrid) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(Error::Parameter("n_steps must be at least 1".into()));
    }
    let n = n_steps as f64;
    let mut ts: Vec<f64> = match grid {
        TimeGrid::UniformT => (0..=n_steps)
            .map(|i| schedule.t_max * (1.0 - i as f64 / n))
            .collect(),
        TimeGrid::UniformLogSnr => {
            let lo = schedule.log_snr(schedule.t_max)?;
            let hi = schedule.log_snr(schedule.t_min)?;
            (0..=n_steps)
                .map(|i| schedule.t_from_log_snr(lo + (hi - lo) * i as f64 / n))
                .collect()
        }
    };
    ts[0] = schedule.t_max;
    ts[n_steps] = 0.0;
    Ok(ts)
}

/// Noise stream `stream` of the generator seeded with `seed`; streams are independent.
pub fn noise_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal(rng: &mut impl Rng, len: usize) -> Vec<f32> {
    (0..len)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect()
}

/// Integrate the deterministic reverse process from a given initial state along `times`.
pub fn sample_from<P: VelocityPredictor + ?Sized>(
    predictor: &P,
    context: &ConditioningContext,
    shape: SampleShape,
    z_init: Vec<f32>,
    times: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f32>> {
    if z_init.len() != shape.len() {
        return Err(Error::Shape(format!(
            "initial state has {} elements, shape needs {}",
            z_init.len(),
            shape.len()
        )));
    }
    let mut z = z_init;
    for pair in times.windows(2) {
        let (t_from, t_to) = (pair[0], pair[1]);
        let v_hat = predictor.predict(t_from, &z, shape, context)?;
        if v_hat.len() != z.len() {
            return Err(Error::Shape(format!(
                "predictor returned {} elements for a state of {}",
                v_hat.len(),
                z.len()
            )));
        }
        z = ddim_step(&z, t_from, t_to, &v_hat, schedule)?;
    }
    Ok(z)
}

fn sample_stream<P: VelocityPredictor + ?Sized>(
    predictor: &P,
    context: &ConditioningContext,
    shape: SampleShape,
    times: &[f64],
    schedule: &NoiseSchedule,
    seed: u64,
    stream: u64,
) -> Result<Vec<f32>> {
    let mut rng = noise_rng(seed, stream);
    let z1 = standard_normal(&mut rng, shape.len());
    sample_from(predictor, context, shape, z1, times, schedule)
}

/// Draw one sample (a normalized residual) starting from `Z_1 ~ N(0, I)`.
#[allow(clippy::too_many_arguments)]
pub fn sample<P: VelocityPredictor + ?Sized>(
    predictor: &P,
    context: &ConditioningContext,
    shape: SampleShape,
    n_steps: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    grid: TimeGrid,
) -> Result<Vec<f32>> {
    let times = time_grid(schedule, n_steps, grid)?;
    sample_stream(predictor, context, shape, &times, schedule, seed, 0)
}

/// Per-pixel statistics over an ensemble of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mean: Vec<f32>,
    /// Population standard deviation (denominator `members`).
    pub std: Vec<f32>,
    pub members: usize,
    pub stack: Vec<Vec<f32>>,
}

impl EnsembleStats {
    pub fn from_members(stack: Vec<Vec<f32>>) -> Result<Self> {
        let m = stack.len();
        if m < 2 {
            return Err(Error::Parameter(format!(
                "an ensemble needs at least 2 members, got {m}"
            )));
        }
        let len = stack[0].len();
        if stack.iter().any(|s| s.len() != len) {
            return Err(Error::Shape("ensemble members differ in size".into()));
        }
        let mut mean = vec![0.0f32; len];
        let mut std = vec![0.0f32; len];
        for i in 0..len {
            let mu = stack.iter().map(|s| s[i] as f64).sum::<f64>() / m as f64;
            let var = stack
                .iter()
                .map(|s| (s[i] as f64 - mu).powi(2))
                .sum::<f64>()
                / m as f64;
            mean[i] = mu as f32;
            std[i] = var.sqrt() as f32;
        }
        Ok(Self {
            mean,
            std,
            members: m,
            stack,
        })
    }
}

/// Run `m_members` samplers on independent noise streams of `seed` and summarize.
///
/// Members are evaluated in parallel; the result does not depend on the
/// number of worker threads.
#[allow(clippy::too_many_arguments)]
pub fn ensemble<P: VelocityPredictor + ?Sized>(
    predictor: &P,
    context: &ConditioningContext,
    shape: SampleShape,
    n_steps: usize,
    m_members: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    grid: TimeGrid,
) -> Result<EnsembleStats> {
    if m_members < 2 {
        return Err(Error::Parameter(format!(
            "an ensemble needs at least 2 members, got {m_members}"
        )));
    }
    let times = time_grid(schedule, n_steps, grid)?;
    let stack = (0..m_members as u64)
        .into_par_iter()
        .map(|i| sample_stream(predictor, context, shape, &times, schedule, seed, i))
        .collect::<Result<Vec<_>>>()?;
    EnsembleStats::from_members(stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Field;

    fn ctx() -> ConditioningContext {
        ConditioningContext::super_resolution(Field::zeros(8, 8).unwrap(), 1000.0, 4)
    }

    #[test]
    fn perturb_endpoints() {
        let s = NoiseSchedule::default();
        let r = vec![1.0, -2.0, 3.5];
        let e = vec![0.3, 0.1, -0.7];
        assert_eq!(forward_perturb(&r, 0.0, &e, &s).unwrap().z, r);
        let z1 = forward_perturb(&r, 1.0, &e, &s).unwrap().z;
        for (a, b) in z1.iter().zip(&e) {
            assert!((a - b).abs() < 1e-7);
        }
        let z = forward_perturb(&[2.0, 0.0], 0.5, &[0.0, 2.0], &s)
            .unwrap()
            .z;
        let rt2 = 2f32.sqrt();
        assert!((z[0] - rt2).abs() < 1e-6 && (z[1] - rt2).abs() < 1e-6);
    }

    #[test]
    fn target_endpoints() {
        let s = NoiseSchedule::default();
        let r = vec![1.0, -2.0];
        let e = vec![0.5, 0.25];
        assert_eq!(velocity_target(&r, 0.0, &e, &s).unwrap(), e);
        let v1 = velocity_target(&r, 1.0, &e, &s).unwrap();
        assert!((v1[0] + 1.0).abs() < 1e-7 && (v1[1] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let s = NoiseSchedule::default();
        assert!(matches!(
            forward_perturb(&[1.0], 0.3, &[1.0, 2.0], &s),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            velocity_target(&[1.0], 0.3, &[1.0, 2.0], &s),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            ddim_step(&[1.0], 0.5, 0.2, &[1.0, 2.0], &s),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn step_ordering_enforced() {
        let s = NoiseSchedule::default();
        assert!(matches!(
            ddim_step(&[1.0], 0.2, 0.5, &[0.0], &s),
            Err(Error::Ordering { .. })
        ));
        assert!(matches!(
            ddim_step(&[1.0], 0.5, 0.5, &[0.0], &s),
            Err(Error::Ordering { .. })
        ));
    }

    #[test]
    fn single_step_from_pure_noise_recovers_residual() {
        let s = NoiseSchedule::default();
        let r = vec![0.7f32, -1.3, 2.0, 0.0];
        let e = vec![-0.2f32, 0.9, 0.4, -1.1];
        let z = forward_perturb(&r, 1.0, &e, &s).unwrap().z;
        let v = velocity_target(&r, 1.0, &e, &s).unwrap();
        let mean = predicted_mean(&z, 1.0, &v, &s).unwrap();
        let out = ddim_step(&z, 1.0, 0.0, &v, &s).unwrap();
        for i in 0..r.len() {
            assert!((mean[i] - r[i]).abs() < 1e-6);
            assert!((out[i] - r[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_velocity_step() {
        let s = NoiseSchedule::default();
        let z = vec![1.5f32, -0.5];
        let out = ddim_step(&z, 0.5, 0.2, &[0.0, 0.0], &s).unwrap();
        let (a, sg) = s.alpha_sigma(0.5).unwrap();
        let (a2, s2) = s.alpha_sigma(0.2).unwrap();
        for i in 0..2 {
            let want = a2 * a * z[i] as f64 + s2 * sg * z[i] as f64;
            assert!((out[i] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn time_grids_are_decreasing_and_anchored() {
        let s = NoiseSchedule::default();
        for grid in [TimeGrid::UniformT, TimeGrid::UniformLogSnr] {
            for n in [1, 2, 5, 50] {
                let ts = time_grid(&s, n, grid).unwrap();
                assert_eq!(ts.len(), n + 1);
                assert_eq!(ts[0], s.t_max);
                assert_eq!(ts[n], 0.0);
                assert!(ts.windows(2).all(|w| w[1] < w[0]));
            }
        }
        assert!(time_grid(&s, 0, TimeGrid::UniformT).is_err());
        let two = time_grid(&s, 2, TimeGrid::UniformT).unwrap();
        assert!((two[1] - s.t_max / 2.0).abs() < 1e-15);
    }

    #[test]
    fn sample_is_deterministic_and_shape_checked() {
        let s = NoiseSchedule::default();
        let shape = SampleShape::scalar_grid(8, 8);
        let pred =
            |t: f64, z: &[f32], _: SampleShape, _: &ConditioningContext| -> Result<Vec<f32>> {
                Ok(z.iter().map(|v| v * t as f32 * 0.5).collect())
            };
        let a = sample(&pred, &ctx(), shape, 4, &s, 11, TimeGrid::UniformT).unwrap();
        let b = sample(&pred, &ctx(), shape, 4, &s, 11, TimeGrid::UniformT).unwrap();
        assert_eq!(a, b);
        let c = sample(&pred, &ctx(), shape, 4, &s, 12, TimeGrid::UniformT).unwrap();
        assert_ne!(a, c);

        let bad =
            |_: f64, _: &[f32], _: SampleShape, _: &ConditioningContext| -> Result<Vec<f32>> {
                Ok(vec![0.0; 3])
            };
        assert!(matches!(
            sample(&bad, &ctx(), shape, 2, &s, 0, TimeGrid::UniformT),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ensemble_needs_two_members() {
        let s = NoiseSchedule::default();
        let pred =
            |_: f64, z: &[f32], _: SampleShape, _: &ConditioningContext| -> Result<Vec<f32>> {
                Ok(vec![0.0; z.len()])
            };
        let shape = SampleShape::scalar_grid(8, 8);
        assert!(matches!(
            ensemble(&pred, &ctx(), shape, 2, 1, &s, 0, TimeGrid::UniformT),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn members_collapse_when_the_velocity_pins_the_clean_sample() {
        // Velocity (alpha z - r)/sigma makes alpha z - sigma v = r for any state,
        // so every member lands on r whatever its initial noise.
        let s = NoiseSchedule::default();
        let shape = SampleShape::scalar_grid(8, 8);
        let r: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).sin()).collect();
        let pred =
            |t: f64, z: &[f32], _: SampleShape, _: &ConditioningContext| -> Result<Vec<f32>> {
                let (a, sg) = NoiseSchedule::default().alpha_sigma(t)?;
                Ok(z.iter()
                    .zip(&r)
                    .map(|(&zi, &ri)| ((a * zi as f64 - ri as f64) / sg) as f32)
                    .collect())
            };
        let st = ensemble(&pred, &ctx(), shape, 3, 6, &s, 3, TimeGrid::UniformT).unwrap();
        assert_eq!(st.members, 6);
        assert!(st.std.iter().all(|&v| v < 1e-5));
        for (m, want) in st.mean.iter().zip(&r) {
            assert!((m - want).abs() < 1e-5);
        }
    }
}
