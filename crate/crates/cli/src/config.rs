//! Run configuration: one TOML document with a section per command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use flexdiff_core::dataio::OverlapMode;
use flexdiff_core::diffusion::TimeGrid;
use flexdiff_core::simulator::SimConfig;
use flexdiff_core::{Error, Result, Task};
use flexdiff_model::{FlexConfig, SkipFusion, TrainConfig};

use crate::analysis::FisherUnits;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub theory: TheoryConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub task: Task,
    /// SR upsampling factor.
    pub factor: usize,
    /// FC step `s`.
    pub horizon: usize,
    /// Square training/inference tile side; also the model's image size.
    pub patch: usize,
    pub tile_stride: usize,
    pub overlap: OverlapMode,
    pub prefilter: bool,
    /// Residual normalization; derived from the training residuals when absent.
    pub norm_std: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: Task::SuperResolution,
            factor: 4,
            horizon: 1,
            patch: 32,
            tile_stride: 16,
            overlap: OverlapMode::CosineTaper,
            prefilter: false,
            norm_std: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// A preset name, or `custom` to use the `custom` table verbatim.
    pub preset: String,
    /// Empty means the data task, or both tasks for multitask training.
    pub tasks: Vec<Task>,
    pub dropout: f64,
    pub l_weak: Option<usize>,
    pub skip_fusion: SkipFusion,
    pub task_encoder: bool,
    pub seed: u64,
    pub custom: Option<FlexConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: "tiny".into(),
            tasks: Vec::new(),
            dropout: 0.1,
            l_weak: None,
            skip_fusion: SkipFusion::Concat,
            task_encoder: true,
            seed: 0,
            custom: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub n_steps: usize,
    /// Members per prediction; 1 gives a single sample without spread.
    pub ensemble: usize,
    pub seed: u64,
    pub use_ema: bool,
    pub grid: TimeGrid,
    /// FC autoregressive steps.
    pub rollout: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n_steps: 2,
            ensemble: 1,
            seed: 0,
            use_ema: true,
            grid: TimeGrid::UniformT,
            rollout: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub std_floor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { std_floor: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub t_grid: Vec<f64>,
    /// Patches per source for the Fisher curves.
    pub patches: usize,
    pub patch: usize,
    pub factor: usize,
    /// Patch side for the covariance eigenvalue.
    pub eigen_patch: usize,
    pub eigen_patches: usize,
    pub prior_vars: Vec<f64>,
    pub mc_samples: usize,
    pub units: FisherUnits,
    /// KDE bandwidth; Silverman's rule when absent.
    pub bandwidth: Option<f64>,
    pub seed: u64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            t_grid: vec![
                0.001, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95,
            ],
            patches: 400,
            patch: 16,
            factor: 4,
            eigen_patch: 4,
            eigen_patches: 20_000,
            prior_vars: vec![0.25, 1.0, 4.0],
            mc_samples: 100_000,
            units: FisherUnits::default(),
            bandwidth: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parameter(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical text; parsing it yields an equal config.
    pub fn to_canonical(&self) -> Result<String> {
        toml::to_string(self)
            .map_err(|e| Error::Parameter(format!("config cannot be written: {e}")))
    }

    pub fn tasks(&self) -> Vec<Task> {
        if !self.model.tasks.is_empty() {
            self.model.tasks.clone()
        } else if self.train.multitask {
            vec![Task::SuperResolution, Task::Forecast]
        } else {
            vec![self.data.task]
        }
    }

    pub fn model_config(&self) -> Result<FlexConfig> {
        let m = &self.model;
        let cfg = if m.preset == "custom" {
            m.custom.clone().ok_or_else(|| {
                Error::Parameter("preset \"custom\" needs a [model.custom] table".into())
            })?
        } else {
            let mut c = FlexConfig::preset(&m.preset, self.data.patch)?.with_tasks(&self.tasks());
            c.dropout = m.dropout;
            c.skip_fusion = m.skip_fusion;
            c.task_encoder = m.task_encoder;
            if m.l_weak.is_some() {
                c.l_weak = m.l_weak;
            }
            c
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if d.factor == 0 || d.horizon == 0 || d.patch == 0 || d.tile_stride == 0 {
            return Err(Error::Parameter(
                "data factor, horizon, patch and tile_stride must be positive".into(),
            ));
        }
        if let Some(s) = d.norm_std {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Parameter(format!("norm_std {s} must be positive")));
            }
        }
        if self.sample.n_steps == 0 || self.sample.ensemble == 0 {
            return Err(Error::Parameter(
                "sample n_steps and ensemble must be positive".into(),
            ));
        }
        self.model_config()?;
        Ok(())
    }
}
