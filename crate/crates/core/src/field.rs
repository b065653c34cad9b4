//! Scalar grid snapshots and the conditioning context attached to them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Vorticity,
    VelocityU,
    VelocityV,
}

impl Quantity {
    pub fn code(self) -> u8 {
        match self {
            Quantity::Vorticity => 0,
            Quantity::VelocityU => 1,
            Quantity::VelocityV => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Quantity::Vorticity),
            1 => Ok(Quantity::VelocityU),
            2 => Ok(Quantity::VelocityV),
            c => Err(Error::Format(format!("unknown quantity code {c}"))),
        }
    }
}

/// A 2D scalar snapshot on a periodic grid, stored row-major (`values[y * nx + x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f32>,
    pub domain_length: f64,
    pub quantity: Quantity,
    pub time_index: usize,
    pub dt: f64,
    pub re_tag: f64,
}

fn check_size(n: usize, what: &str) -> Result<()> {
    if n >= 8 && n.is_power_of_two() {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{what} = {n} must be a power of two and at least 8"
        )))
    }
}

impl Field {
    pub fn new(nx: usize, ny: usize, values: Vec<f32>) -> Result<Self> {
        check_size(nx, "nx")?;
        check_size(ny, "ny")?;
        if values.len() != nx * ny {
            return Err(Error::Shape(format!(
                "{} values for a {nx}x{ny} grid",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            nx,
            ny,
            values,
            domain_length: 2.0 * std::f64::consts::PI,
            quantity: Quantity::Vorticity,
            time_index: 0,
            dt: 0.0,
            re_tag: 0.0,
        })
    }

    pub fn zeros(nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, vec![0.0; nx * ny])
    }

    pub fn from_fn(nx: usize, ny: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(nx * ny);
        for y in 0..ny {
            for x in 0..nx {
                values.push(f(x, y) as f32);
            }
        }
        Self::new(nx, ny, values)
    }

    /// Same metadata, new values.
    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        let mut out = Self::new(self.nx, self.ny, values)?;
        out.copy_meta_from(self);
        Ok(out)
    }

    pub fn copy_meta_from(&mut self, other: &Field) {
        self.domain_length = other.domain_length;
        self.quantity = other.quantity;
        self.time_index = other.time_index;
        self.dt = other.dt;
        self.re_tag = other.re_tag;
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.nx + x]
    }

    /// Periodic lookup.
    #[inline]
    pub fn at_wrapped(&self, x: isize, y: isize) -> f32 {
        let xi = x.rem_euclid(self.nx as isize) as usize;
        let yi = y.rem_euclid(self.ny as isize) as usize;
        self.values[yi * self.nx + xi]
    }

    pub fn same_grid(&self, other: &Field) -> bool {
        self.nx == other.nx && self.ny == other.ny
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self
            .values
            .iter()
            .map(|&v| (v as f64 - m).powi(2))
            .sum::<f64>()
            / self.values.len() as f64;
        var.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[serde(rename = "sr")]
    SuperResolution,
    #[serde(rename = "fc")]
    Forecast,
}

impl Task {
    pub fn snapshot_count(self) -> usize {
        match self {
            Task::SuperResolution => 1,
            Task::Forecast => 2,
        }
    }
}

/// Longest forecast horizon the step feature is scaled against.
pub const MAX_FORECAST_STEP: f64 = 50.0;

/// Auxiliary conditioning for one sample: the conditioning snapshots plus scalar tags.
///
/// SR carries `up(X_lr)` at target resolution. FC carries the two most
/// recent frames, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningContext {
    pub task: Task,
    pub snapshots: Vec<Field>,
    pub re_tag: f64,
    pub step_index: usize,
    pub upsample_factor: usize,
}

impl ConditioningContext {
    pub fn super_resolution(upsampled: Field, re_tag: f64, factor: usize) -> Self {
        Self {
            task: Task::SuperResolution,
            snapshots: vec![upsampled],
            re_tag,
            step_index: 1,
            upsample_factor: factor,
        }
    }

    pub fn forecast(previous: Field, current: Field, re_tag: f64, step: usize) -> Self {
        Self {
            task: Task::Forecast,
            snapshots: vec![previous, current],
            re_tag,
            step_index: step,
            upsample_factor: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.task.snapshot_count();
        if self.snapshots.len() != want {
            return Err(Error::Context(format!(
                "{:?} context needs {want} snapshot(s), got {}",
                self.task,
                self.snapshots.len()
            )));
        }
        if self
            .snapshots
            .iter()
            .any(|s| !s.same_grid(&self.snapshots[0]))
        {
            return Err(Error::Context(
                "conditioning snapshots differ in grid size".into(),
            ));
        }
        if !self.re_tag.is_finite() {
            return Err(Error::Context("re_tag must be finite".into()));
        }
        if self.upsample_factor < 1 || self.step_index < 1 {
            return Err(Error::Context(
                "upsample_factor and step_index must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// The most recent snapshot: the residual's base for both tasks.
    pub fn base(&self) -> &Field {
        self.snapshots
            .last()
            .expect("validated context has snapshots")
    }

    /// Scalar features `(log-Re, step, log2 factor)`, each roughly in `[0, 1]`;
    /// fields that do not apply to the task are zero.
    pub fn context_vector(&self) -> [f32; 3] {
        let re = ((self.re_tag.max(1.0).log10() - 3.0) / 2.0) as f32;
        match self.task {
            Task::SuperResolution => [re, 0.0, ((self.upsample_factor as f64).log2() / 3.0) as f32],
            Task::Forecast => [re, (self.step_index as f64 / MAX_FORECAST_STEP) as f32, 0.0],
        }
    }

    /// Snapshot values stacked channel-wise.
    pub fn stacked_snapshots(&self) -> Vec<f32> {
        self.snapshots
            .iter()
            .flat_map(|s| s.values.iter().copied())
            .collect()
    }
}
