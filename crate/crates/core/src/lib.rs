//! Residual diffusion for turbulent flow super-resolution and forecasting: schedules,
//! sampling, data handling, a Navier–Stokes simulator, metrics and theory checks.

pub mod dataio;
pub mod diffusion;
pub mod error;
pub mod field;
pub mod metrics;
pub mod schedule;
pub mod simulator;
pub mod spectral;
pub mod theory;

pub use error::{Error, Result};
pub use field::{ConditioningContext, Field, Quantity, Task};
pub use schedule::NoiseSchedule;
