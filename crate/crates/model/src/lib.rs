//! Tensors with reverse-mode autodiff, the multi-task velocity network, and its training loop.

pub mod backbone;
pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use backbone::{FlexConfig, FlexNet, FlexPredictor, ForwardOptions, SkipFusion};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use graph::{Graph, Var};
pub use optim::{LrSchedule, OptimizerKind};
pub use params::ParamStore;
pub use tensor::{Real, Tensor};
pub use trainer::{GradMode, LossKind, StepReport, TrainConfig, TrainState, Trainer};
