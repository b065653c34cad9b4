//! Variance-preserving cosine noise schedule.
//!
//! `alpha(t) = cos(pi t / 2)`, `sigma(t) = sin(pi t / 2)`, so that
//! `alpha^2 + sigma^2 = 1` on `[0, 1]`. The log-SNR and the SDE drift and
//! diffusion coefficients diverge at the endpoints; they are only defined
//! on the clamped interval `[t_min, t_max]`.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_T_MIN: f64 = 1e-3;
pub const DEFAULT_T_MAX: f64 = 1.0 - 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
        }
    }
}

impl NoiseSchedule {
    pub fn cosine(t_min: f64, t_max: f64) -> Result<Self> {
        let s = Self {
            kind: ScheduleKind::Cosine,
            t_min,
            t_max,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.t_min > 0.0 && self.t_min < 0.5 && self.t_max > 0.5 && self.t_max < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!(
                "schedule clamps must satisfy 0 < t_min < 0.5 < t_max < 1, got [{}, {}]",
                self.t_min, self.t_max
            )))
        }
    }

    fn check_unit(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain(format!("diffusion time {t} outside [0, 1]")))
        }
    }

    fn check_clamped(&self, t: f64) -> Result<()> {
        if t >= self.t_min && t <= self.t_max {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "diffusion time {t} outside [{}, {}]",
                self.t_min, self.t_max
            )))
        }
    }

    /// `(alpha(t), sigma(t))`, defined on all of `[0, 1]`.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        Self::check_unit(t)?;
        match self.kind {
            ScheduleKind::Cosine => {
                let (s, c) = (FRAC_PI_2 * t).sin_cos();
                Ok((c, s))
            }
        }
    }

    /// Log signal-to-noise ratio `log(alpha^2 / sigma^2) = -2 log tan(pi t / 2)`.
    pub fn log_snr(&self, t: f64) -> Result<f64> {
        self.check_clamped(t)?;
        match self.kind {
            ScheduleKind::Cosine => Ok(-2.0 * (FRAC_PI_2 * t).tan().ln()),
        }
    }

    /// Inverse of [`Self::log_snr`].
    pub fn t_from_log_snr(&self, lambda: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => (-0.5 * lambda).exp().atan() / FRAC_PI_2,
        }
    }

    /// Drift `f = alpha'/alpha` and squared diffusion
    /// `g^2 = 2 sigma^2 (sigma'/sigma - alpha'/alpha)` of the forward SDE.
    pub fn drift_coeffs(&self, t: f64) -> Result<(f64, f64)> {
        self.check_clamped(t)?;
        match self.kind {
            ScheduleKind::Cosine => {
                let tan = (FRAC_PI_2 * t).tan();
                Ok((-FRAC_PI_2 * tan, std::f64::consts::PI * tan))
            }
        }
    }

    /// `sigma(t) / alpha(t)`; the factor linking the optimal velocity to the score.
    pub fn noise_to_signal(&self, t: f64) -> Result<f64> {
        self.check_clamped(t)?;
        let (a, s) = self.alpha_sigma(t)?;
        Ok(s / a)
    }
}
