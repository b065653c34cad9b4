//! Optimal velocity, Fisher divergence to the standard normal and the covariance bounds,
//! checked against Gaussian closed forms and estimated on simulator data.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{make_fc_residual, make_sr_residual, random_origin};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::schedule::NoiseSchedule;

pub const MIN_FISHER_SAMPLES: usize = 100;
/// Sample counts above this use the binned estimator.
pub const EXACT_KDE_LIMIT: usize = 4000;
const BINNED_GRID: usize = 4096;

/// Silverman's rule of thumb, `0.9 min(sd, IQR/1.34) N^(-1/5)`.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Estimator(
            "bandwidth needs at least 2 samples".into(),
        ));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let q = |p: f64| {
        let pos = p * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if !(spread > 0.0) {
        return Err(Error::Estimator("samples have zero variance".into()));
    }
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

/// Score `d/dx log p_hat` of a Gaussian KDE at every sample, by direct summation.
fn kde_scores_exact(samples: &[f64], h: f64) -> Vec<f64> {
    let inv2h2 = 0.5 / (h * h);
    samples
        .par_iter()
        .map(|&x| {
            let (mut p, mut dp) = (0.0f64, 0.0f64);
            for &y in samples {
                let d = x - y;
                let k = (-d * d * inv2h2).exp();
                p += k;
                dp -= d * k;
            }
            dp / (h * h * p)
        })
        .collect()
}

/// Same, with samples linearly binned onto a fine grid and the kernel convolved there.
fn kde_scores_binned(samples: &[f64], h: f64) -> Vec<f64> {
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 4.0 * h;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 4.0 * h;
    let m = BINNED_GRID;
    let delta = (hi - lo) / (m - 1) as f64;
    let mut counts = vec![0.0f64; m];
    for &x in samples {
        let pos = (x - lo) / delta;
        let i = (pos.floor() as usize).min(m - 2);
        let f = pos - i as f64;
        counts[i] += 1.0 - f;
        counts[i + 1] += f;
    }
    let half = ((6.0 * h / delta).ceil() as usize).min(m - 1);
    let kern: Vec<f64> = (0..=half)
        .map(|j| {
            let d = j as f64 * delta;
            (-0.5 * d * d / (h * h)).exp()
        })
        .collect();
    let conv = |i: usize| -> (f64, f64) {
        let (mut p, mut dp) = (0.0, 0.0);
        let a = i.saturating_sub(half);
        let b = (i + half).min(m - 1);
        for (j, &c) in counts.iter().enumerate().take(b + 1).skip(a) {
            if c == 0.0 {
                continue;
            }
            let off = i as isize - j as isize;
            let k = kern[off.unsigned_abs()];
            p += c * k;
            dp -= c * k * off as f64 * delta;
        }
        (p, dp)
    };
    let grid: Vec<(f64, f64)> = (0..m).into_par_iter().map(conv).collect();
    samples
        .iter()
        .map(|&x| {
            let pos = (x - lo) / delta;
            let i = (pos.floor() as usize).min(m - 2);
            let f = pos - i as f64;
            let p = (1.0 - f) * grid[i].0 + f * grid[i + 1].0;
            let dp = (1.0 - f) * grid[i].1 + f * grid[i + 1].1;
            dp / (h * h * p)
        })
        .collect()
}

/// Monte Carlo estimate of `D_F(p || N(0,1)) = E_p[(d/dx log p + x)^2]` with a Gaussian KDE for `p`.
pub fn fisher_divergence_1d(samples: &[f64], bandwidth: Option<f64>) -> Result<f64> {
    if samples.len() < MIN_FISHER_SAMPLES {
        return Err(Error::Estimator(format!(
            "{} samples, at least {MIN_FISHER_SAMPLES} required",
            samples.len()
        )));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::Estimator("non-finite sample".into()));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(Error::Parameter(format!("bandwidth {h} must be positive"))),
        None => silverman_bandwidth(samples)?,
    };
    let scores = if samples.len() <= EXACT_KDE_LIMIT {
        kde_scores_exact(samples, h)
    } else {
        kde_scores_binned(samples, h)
    };
    let n = samples.len() as f64;
    Ok(scores
        .iter()
        .zip(samples)
        .map(|(s, x)| (s + x).powi(2))
        .sum::<f64>()
        / n)
}

/// Marginal variance `alpha^2 P + sigma^2` of `Z_t` for a `N(0, P)` prior.
pub fn marginal_variance(t: f64, prior_var: f64, schedule: &NoiseSchedule) -> Result<f64> {
    let (a, s) = schedule.alpha_sigma(t)?;
    Ok(a * a * prior_var + s * s)
}

/// `D_F(N(0,V) || N(0,1)) = (1 - 1/V)^2 V`.
pub fn gaussian_fisher(v: f64) -> f64 {
    (1.0 - 1.0 / v).powi(2) * v
}

/// Optimal velocity `-(sigma/alpha)(z + d/dz log p_t(z))` for a `N(0, prior_var)` prior.
pub fn optimal_velocity_gaussian(
    t: f64,
    z: f64,
    prior_var: f64,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if !(prior_var > 0.0) {
        return Err(Error::Parameter(format!(
            "prior variance {prior_var} must be positive"
        )));
    }
    let ratio = schedule.noise_to_signal(t)?;
    let v = marginal_variance(t, prior_var, schedule)?;
    Ok(-ratio * z * (1.0 - 1.0 / v))
}

/// Prior on the clean scalar.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    Gaussian {
        var: f64,
    },
    /// Equally weighted atoms; `p_t` is then an exact Gaussian mixture.
    Empirical(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prop1Method {
    /// Left side by quadrature of `v*^2` against `p_t`, right side in closed form.
    Analytic,
    /// Left side by Monte Carlo over the forward process.
    MonteCarlo { n: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prop1Row {
    pub t: f64,
    /// `E_{p_t} |v*|^2`.
    pub lhs: f64,
    /// `(sigma/alpha)^2 D_F(p_t || N(0,1))`.
    pub rhs: f64,
    /// `|lhs - rhs| / max(|rhs|, 1e-300)`, or the absolute gap when both are ~0.
    pub discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub rows: Vec<Prop1Row>,
    pub max_discrepancy: f64,
}

fn discrepancy(lhs: f64, rhs: f64) -> f64 {
    let gap = (lhs - rhs).abs();
    if rhs.abs() < 1e-300 {
        gap
    } else {
        gap / rhs.abs()
    }
}

/// `int f(z) N(z; 0, v) dz` by the trapezoid rule on `[-14 sqrt v, 14 sqrt v]`.
fn gaussian_expectation(v: f64, f: impl Fn(f64) -> f64) -> f64 {
    let sd = v.sqrt();
    let n = 20_000;
    let lo = -14.0 * sd;
    let dz = 28.0 * sd / n as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * v).sqrt();
    (0..=n)
        .map(|i| {
            let z = lo + i as f64 * dz;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            w * f(z) * norm * (-0.5 * z * z / v).exp()
        })
        .sum::<f64>()
        * dz
}

/// Exact score of `p_t = (1/N) sum N(alpha r_i, sigma^2)`.
fn mixture_score(z: f64, atoms: &[f64], alpha: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let logs: Vec<f64> = atoms
        .iter()
        .map(|r| -0.5 * (z - alpha * r).powi(2) / s2)
        .collect();
    let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut w, mut wm) = (0.0, 0.0);
    for (l, r) in logs.iter().zip(atoms) {
        let e = (l - mx).exp();
        w += e;
        wm += e * alpha * r;
    }
    -(z - wm / w) / s2
}

fn forward_draws(
    prior: &Prior,
    t: f64,
    n: usize,
    seed: u64,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let (a, s) = schedule.alpha_sigma(t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = (0..n)
        .map(|_| {
            let r = match prior {
                Prior::Gaussian { var } => var.sqrt() * rng.sample::<f64, _>(StandardNormal),
                Prior::Empirical(atoms) => atoms[rng.random_range(0..atoms.len())],
            };
            a * r + s * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    Ok(draws)
}

/// Evaluate both sides of `E|v*|^2 = (sigma/alpha)^2 D_F(p_t || N(0,1))` on a t-grid.
///
/// For an empirical prior the right side uses the KDE estimator on forward
/// draws and the left side the exact mixture score, so agreement is only
/// up to estimator error.
pub fn prop1_check(
    prior: &Prior,
    t_grid: &[f64],
    schedule: &NoiseSchedule,
    method: Prop1Method,
) -> Result<Prop1Report> {
    match prior {
        Prior::Gaussian { var } if !(*var > 0.0) => {
            return Err(Error::Parameter(format!(
                "prior variance {var} must be positive"
            )))
        }
        Prior::Empirical(a) if a.is_empty() => {
            return Err(Error::Parameter("empirical prior has no atoms".into()))
        }
        _ => {}
    }
    let rows = t_grid
        .par_iter()
        .enumerate()
        .map(|(k, &t)| -> Result<Prop1Row> {
            let ratio = schedule.noise_to_signal(t)?;
            let (a, s) = schedule.alpha_sigma(t)?;
            let (lhs, rhs) = match (prior, method) {
                (Prior::Gaussian { var }, Prop1Method::Analytic) => {
                    let v = marginal_variance(t, *var, schedule)?;
                    let lhs = gaussian_expectation(v, |z| {
                        let vs = -ratio * z * (1.0 - 1.0 / v);
                        vs * vs
                    });
                    (lhs, ratio * ratio * gaussian_fisher(v))
                }
                (Prior::Gaussian { var }, Prop1Method::MonteCarlo { n, seed }) => {
                    let v = marginal_variance(t, *var, schedule)?;
                    let z = forward_draws(prior, t, n, seed.wrapping_add(k as u64), schedule)?;
                    let lhs = z
                        .iter()
                        .map(|&z| (-ratio * z * (1.0 - 1.0 / v)).powi(2))
                        .sum::<f64>()
                        / n as f64;
                    (lhs, ratio * ratio * gaussian_fisher(v))
                }
                (Prior::Empirical(atoms), m) => {
                    let (n, seed) = match m {
                        Prop1Method::MonteCarlo { n, seed } => (n, seed),
                        Prop1Method::Analytic => (20_000, 0),
                    };
                    let z = forward_draws(prior, t, n, seed.wrapping_add(k as u64), schedule)?;
                    let lhs = z
                        .iter()
                        .map(|&z| (-ratio * (z + mixture_score(z, atoms, a, s))).powi(2))
                        .sum::<f64>()
                        / n as f64;
                    (lhs, ratio * ratio * fisher_divergence_1d(&z, None)?)
                }
            };
            Ok(Prop1Row {
                t,
                lhs,
                rhs,
                discrepancy: discrepancy(lhs, rhs),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_discrepancy = rows.iter().map(|r| r.discrepancy).fold(0.0, f64::max);
    Ok(Prop1Report {
        rows,
        max_discrepancy,
    })
}

/// Gaussian-prior quantities behind the Hessian identity and the velocity-gradient bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HessianReport {
    pub t: f64,
    pub prior_var: f64,
    pub marginal_var: f64,
    /// `d^2/dz^2 log p_t = -1/V`.
    pub hessian_true: f64,
    /// Posterior variance of `Z_0` given `Z_t`: `P sigma^2 / V`.
    pub posterior_cov: f64,
    /// `-1/sigma^2 + (alpha^2/sigma^4) Cov_t`.
    pub hessian_corrected: f64,
    /// `(alpha^2/sigma^4) Cov_t`, without the `-1/sigma^2` term.
    pub hessian_uncorrected: f64,
    pub identity_error: f64,
    /// `d v*/dz = -(sigma/alpha)(1 - 1/V)`.
    pub grad_v: f64,
    /// `sigma/alpha + (alpha/sigma^3) lambda_max`.
    pub bound: f64,
    /// `alpha/sigma + (alpha/sigma^3) lambda_max`, implied by the corrected identity.
    pub bound_corrected: f64,
    pub bound_holds: bool,
    pub bound_corrected_holds: bool,
}

pub fn hessian_covariance_check(
    prior_var: f64,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<HessianReport> {
    if !(prior_var > 0.0) {
        return Err(Error::Parameter(format!(
            "prior variance {prior_var} must be positive"
        )));
    }
    let ratio = schedule.noise_to_signal(t)?;
    let (a, s) = schedule.alpha_sigma(t)?;
    let v = marginal_variance(t, prior_var, schedule)?;
    let hessian_true = -1.0 / v;
    let cov = prior_var * s * s / v;
    let s2 = s * s;
    let hessian_uncorrected = a * a / (s2 * s2) * cov;
    let hessian_corrected = -1.0 / s2 + hessian_uncorrected;
    let grad_v = -ratio * (1.0 - 1.0 / v);
    let curv = a / (s2 * s) * cov;
    let bound = ratio + curv;
    let bound_corrected = a / s + curv;
    Ok(HessianReport {
        t,
        prior_var,
        marginal_var: v,
        hessian_true,
        posterior_cov: cov,
        hessian_corrected,
        hessian_uncorrected,
        identity_error: (hessian_corrected - hessian_true).abs(),
        grad_v,
        bound,
        bound_corrected,
        bound_holds: bound >= grad_v.abs(),
        bound_corrected_holds: bound_corrected >= grad_v.abs(),
    })
}

pub const POWER_ITERATION_CAP: usize = 10_000;

/// Largest eigenvalue of the sample covariance of `rows` (each of length `d`) by power iteration.
pub fn top_eigen_covariance(rows: &[Vec<f64>], tol: f64) -> Result<f64> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape(
            "rows must be non-empty and equally long".into(),
        ));
    }
    if n <= d {
        return Err(Error::Estimator(format!(
            "{n} samples for dimension {d}; need more than d"
        )));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for r in rows {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            let ci = c[i];
            for j in i..d {
                cov[i * d + j] += ci * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if trace <= 0.0 {
        return Ok(0.0);
    }
    // deterministic start with a component along every axis
    let mut x: Vec<f64> = (0..d).map(|i| 1.0 + 0.01 * i as f64).collect();
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter_mut().for_each(|v| *v /= norm);
    let mut lambda = 0.0;
    let mut residual = f64::INFINITY;
    for _ in 0..POWER_ITERATION_CAP {
        let y: Vec<f64> = (0..d)
            .map(|i| (0..d).map(|j| cov[i * d + j] * x[j]).sum())
            .collect();
        let next = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if ny == 0.0 {
            return Ok(0.0);
        }
        residual = (next - lambda).abs() / next.abs().max(f64::MIN_POSITIVE);
        lambda = next;
        x = y.into_iter().map(|v| v / ny).collect();
        if residual < tol {
            return Ok(lambda);
        }
    }
    Err(Error::Iteration {
        iterations: POWER_ITERATION_CAP,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherSource {
    Raw,
    SrResidual,
    FcResidual,
}

impl FisherSource {
    pub fn label(self) -> &'static str {
        match self {
            FisherSource::Raw => "raw",
            FisherSource::SrResidual => "sr_residual",
            FisherSource::FcResidual => "fc_residual",
        }
    }
}

/// Random square patches (flattened) of raw fields or of their residuals.
///
/// SR residuals use `factor`; FC residuals are one-step differences.
pub fn collect_patches(
    fields: &[Field],
    source: FisherSource,
    patch: usize,
    count: usize,
    factor: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let need = if source == FisherSource::FcResidual {
        3
    } else {
        1
    };
    if fields.len() < need {
        return Err(Error::Estimator(format!(
            "{} snapshot(s), {need} needed for {}",
            fields.len(),
            source.label()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut cache: Option<(usize, Field)> = None;
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..count {
        if order.is_empty() {
            order = (0..fields.len() - need + 1).collect();
            order.shuffle(&mut rng);
        }
        let i = order.pop().expect("refilled above");
        let grid = match &cache {
            Some((j, g)) if *j == i => g.clone(),
            _ => {
                let g = match source {
                    FisherSource::Raw => fields[i].clone(),
                    FisherSource::SrResidual => make_sr_residual(&fields[i], factor)?.residual,
                    FisherSource::FcResidual => {
                        let mut prev = fields[i].clone();
                        let mut cur = fields[i + 1].clone();
                        let mut fut = fields[i + 2].clone();
                        prev.time_index = 0;
                        cur.time_index = 1;
                        fut.time_index = 2;
                        make_fc_residual(&prev, &cur, &fut, 1)?.residual
                    }
                };
                cache = Some((i, g.clone()));
                g
            }
        };
        if patch > grid.nx || patch > grid.ny {
            return Err(Error::Parameter(format!(
                "patch {patch} larger than the grid"
            )));
        }
        let x0 = random_origin(grid.nx, patch, &mut rng);
        let y0 = random_origin(grid.ny, patch, &mut rng);
        let mut v = Vec::with_capacity(patch * patch);
        for y in y0..y0 + patch {
            for x in x0..x0 + patch {
                v.push(grid.at(x, y) as f64);
            }
        }
        out.push(v);
    }
    Ok(out)
}

/// Root mean square over all scalars of a patch set.
pub fn rms(patches: &[Vec<f64>]) -> f64 {
    let (s, n) = patches
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    (s / n.max(1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherCurve {
    pub t_grid: Vec<f64>,
    pub d_f: Vec<f64>,
    /// `tan^2(pi t / 2) d_f`.
    pub scaled: Vec<f64>,
    pub source_label: String,
    pub n_samples: usize,
    /// Bandwidth at the first grid point (Silverman unless overridden).
    pub kde_bandwidth: f64,
}

/// `D_F(p_t || N(0,1))` over a t-grid for scalars `x` (already in the chosen units),
/// noised as `alpha x + sigma eps`.
pub fn fisher_curve(
    samples: &[f64],
    label: &str,
    t_grid: &[f64],
    schedule: &NoiseSchedule,
    bandwidth: Option<f64>,
    seed: u64,
) -> Result<FisherCurve> {
    if samples.len() < MIN_FISHER_SAMPLES {
        return Err(Error::Estimator(format!(
            "{} samples, at least {MIN_FISHER_SAMPLES} required",
            samples.len()
        )));
    }
    let pts = t_grid
        .par_iter()
        .enumerate()
        .map(|(k, &t)| -> Result<(f64, f64, f64)> {
            let ratio = schedule.noise_to_signal(t)?;
            let (a, s) = schedule.alpha_sigma(t)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let z: Vec<f64> = samples
                .iter()
                .map(|&x| a * x + s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let h = match bandwidth {
                Some(h) => h,
                None => silverman_bandwidth(&z)?,
            };
            let d = fisher_divergence_1d(&z, Some(h))?;
            Ok((d, ratio * ratio * d, h))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FisherCurve {
        t_grid: t_grid.to_vec(),
        d_f: pts.iter().map(|p| p.0).collect(),
        scaled: pts.iter().map(|p| p.1).collect(),
        source_label: label.to_string(),
        n_samples: samples.len(),
        kde_bandwidth: pts.first().map_or(0.0, |p| p.2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normals(n: usize, seed: u64, mean: f64, sd: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| mean + sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    #[test]
    fn fisher_standard_normal_is_near_zero() {
        let d = fisher_divergence_1d(&normals(100_000, 1, 0.0, 1.0), None).unwrap();
        assert!(d >= 0.0 && d < 0.05, "{d}");
    }

    #[test]
    fn fisher_shifted_mean() {
        let d = fisher_divergence_1d(&normals(100_000, 2, 1.0, 1.0), None).unwrap();
        assert!((d - 1.0).abs() < 0.1, "{d}");
    }

    #[test]
    fn fisher_wide_gaussian() {
        // score -x/4 against -x: E[(3x/4)^2] = 9/16 * 4
        let oracle = (0.75f64).powi(2) * 4.0;
        assert!((oracle - gaussian_fisher(4.0)).abs() < 1e-15);
        let d = fisher_divergence_1d(&normals(100_000, 3, 0.0, 2.0), None).unwrap();
        assert!((d - oracle).abs() < 0.1 * oracle, "{d}");
    }

    #[test]
    fn binned_matches_exact() {
        let s = normals(3000, 4, 0.5, 1.5);
        let h = silverman_bandwidth(&s).unwrap();
        let a = kde_scores_exact(&s, h);
        let b = kde_scores_binned(&s, h);
        let worst = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn fisher_errors() {
        assert!(matches!(
            fisher_divergence_1d(&[1.0; 50], None),
            Err(Error::Estimator(_))
        ));
        assert!(matches!(
            fisher_divergence_1d(&[1.0; 500], None),
            Err(Error::Estimator(_))
        ));
    }

    #[test]
    fn optimal_velocity_values() {
        let s = NoiseSchedule::default();
        for &t in &[0.1, 0.5, 0.9] {
            for &z in &[-2.0, 0.3, 5.0] {
                assert_eq!(optimal_velocity_gaussian(t, z, 1.0, &s).unwrap(), 0.0);
            }
        }
        let v = optimal_velocity_gaussian(0.5, 1.0, 4.0, &s).unwrap();
        assert!((v + 0.6).abs() < 1e-12);
        assert!(optimal_velocity_gaussian(0.0, 1.0, 4.0, &s).is_err());
        assert!(optimal_velocity_gaussian(1.0, 1.0, 4.0, &s).is_err());
    }

    #[test]
    fn velocity_matches_score_form() {
        // v* = -(sigma/alpha)(z + score) with score -z/V
        let s = NoiseSchedule::default();
        let (t, z, p) = (0.3, 0.7, 2.5);
        let (a, sg) = s.alpha_sigma(t).unwrap();
        let v = a * a * p + sg * sg;
        let direct = -(sg / a) * (z - z / v);
        assert!((optimal_velocity_gaussian(t, z, p, &s).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn prop1_analytic_and_monte_carlo() {
        let s = NoiseSchedule::default();
        let ts = [0.1, 0.3, 0.5, 0.7, 0.9];
        for var in [0.25, 4.0] {
            let r = prop1_check(&Prior::Gaussian { var }, &ts, &s, Prop1Method::Analytic).unwrap();
            assert!(r.max_discrepancy < 1e-10, "{r:?}");
        }
        let r = prop1_check(
            &Prior::Gaussian { var: 4.0 },
            &ts,
            &s,
            Prop1Method::MonteCarlo {
                n: 100_000,
                seed: 1,
            },
        )
        .unwrap();
        assert!(r.max_discrepancy < 0.02, "{r:?}");
        let r = prop1_check(
            &Prior::Gaussian { var: 1.0 },
            &ts,
            &s,
            Prop1Method::Analytic,
        )
        .unwrap();
        assert!(r
            .rows
            .iter()
            .all(|row| row.lhs.abs() < 1e-15 && row.rhs.abs() < 1e-15));
    }

    #[test]
    fn prop1_empirical_prior_is_close() {
        let s = NoiseSchedule::default();
        let atoms = normals(400, 9, 0.0, 2.0);
        let r = prop1_check(
            &Prior::Empirical(atoms),
            &[0.5, 0.7],
            &s,
            Prop1Method::MonteCarlo { n: 20_000, seed: 3 },
        )
        .unwrap();
        assert!(r.max_discrepancy < 0.15, "{r:?}");
    }

    #[test]
    fn hessian_worked_example() {
        let s = NoiseSchedule::default();
        let r = hessian_covariance_check(4.0, 0.5, &s).unwrap();
        assert!((r.marginal_var - 2.5).abs() < 1e-12);
        assert!((r.posterior_cov - 0.8).abs() < 1e-12);
        assert!((r.hessian_true + 0.4).abs() < 1e-12);
        assert!((r.hessian_corrected + 0.4).abs() < 1e-12);
        assert!((r.hessian_uncorrected - 1.6).abs() < 1e-12);
        assert!(r.bound_holds && r.bound_corrected_holds);
        let one = hessian_covariance_check(1.0, 0.5, &s).unwrap();
        assert!(one.grad_v.abs() < 1e-15 && one.bound > 0.0);
    }

    #[test]
    fn hessian_matches_finite_difference_of_the_score() {
        let s = NoiseSchedule::default();
        for &t in &[0.2, 0.6] {
            let p = 3.0;
            let r = hessian_covariance_check(p, t, &s).unwrap();
            let h = 1e-4;
            let logp = |z: f64| -0.5 * z * z / r.marginal_var;
            let fd = (logp(0.3 + h) - 2.0 * logp(0.3) + logp(0.3 - h)) / (h * h);
            assert!((fd - r.hessian_corrected).abs() < 1e-6);
        }
    }

    #[test]
    fn printed_bound_fails_for_narrow_priors() {
        let s = NoiseSchedule::default();
        let r = hessian_covariance_check(0.01, 0.1, &s).unwrap();
        assert!(!r.bound_holds);
        assert!(r.bound_corrected_holds);
        assert!((r.grad_v.abs() - 4.47).abs() < 0.01);
    }

    #[test]
    fn bound_grows_with_prior_variance() {
        let s = NoiseSchedule::default();
        for &t in &[0.1, 0.5, 0.9] {
            let a = hessian_covariance_check(2.0, t, &s).unwrap();
            let b = hessian_covariance_check(4.0, t, &s).unwrap();
            assert!(b.bound >= a.bound);
        }
    }

    #[test]
    fn eigen_iid_and_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..10_000)
            .map(|_| (0..16).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let l = top_eigen_covariance(&rows, 1e-8).unwrap();
        assert!((0.9..=1.2).contains(&l), "{l}");
        let u: Vec<f64> = (0..8).map(|i| if i < 4 { 0.5 } else { 0.0 }).collect();
        let rows: Vec<Vec<f64>> = normals(5000, 6, 0.0, 3.0)
            .into_iter()
            .map(|s| u.iter().map(|x| s * x).collect())
            .collect();
        let l = top_eigen_covariance(&rows, 1e-8).unwrap();
        assert!((l - 9.0).abs() < 0.5, "{l}");
        assert!(top_eigen_covariance(&rows[..5], 1e-8).is_err());
    }

    #[test]
    fn noise_only_curve_is_flat() {
        let s = NoiseSchedule::default();
        let c = fisher_curve(
            &normals(20_000, 7, 0.0, 1.0),
            "noise",
            &[0.05, 0.5, 0.95],
            &s,
            None,
            1,
        )
        .unwrap();
        assert!(c.d_f.iter().all(|&d| d < 0.05), "{c:?}");
        assert!(c
            .scaled
            .iter()
            .zip(&c.d_f)
            .all(|(a, b)| a.is_finite() && *b >= 0.0));
    }
}
