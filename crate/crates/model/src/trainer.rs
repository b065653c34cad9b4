//! Velocity-matching training loop.

use std::collections::HashMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use flexdiff_core::dataio::ResidualSample;
use flexdiff_core::diffusion::{forward_perturb, standard_normal, velocity_target};
use flexdiff_core::{ConditioningContext, Error, NoiseSchedule, Result, Task};

use crate::backbone::{FlexNet, FlexPredictor, ForwardOptions};
use crate::graph::Graph;
use crate::optim::{
    apply_update, ema_gap, ema_update, learning_rate, LrSchedule, OptimizerConfig, OptimizerKind,
    OptimizerState,
};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    TwoSteps,
    Summed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub base_lr: f64,
    pub lr_schedule: LrSchedule,
    pub ema_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Horizon of the cosine schedule in optimizer steps.
    pub total_steps: u64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub multitask: bool,
    pub grad_mode: GradMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::L1,
            base_lr: 1e-5,
            lr_schedule: LrSchedule::Cosine,
            ema_decay: 0.999,
            epochs: 1,
            batch_size: 8,
            total_steps: 1000,
            optimizer: OptimizerKind::Lion,
            weight_decay: 0.0,
            multitask: false,
            grad_mode: GradMode::TwoSteps,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Parameter(format!(
                "ema_decay {} outside (0, 1)",
                self.ema_decay
            )));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Parameter(format!(
                "base_lr {} must be positive",
                self.base_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Parameter("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let base = match self.optimizer {
            OptimizerKind::Lion => OptimizerConfig::lion(),
            OptimizerKind::Adamw => OptimizerConfig::adamw(),
        };
        OptimizerConfig {
            weight_decay: self.weight_decay,
            ..base
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub count: u64,
    pub mean: f64,
    pub last: f64,
}

impl LossStats {
    fn record(&mut self, loss: f64) {
        self.count += 1;
        self.mean += (loss - self.mean) / self.count as f64;
        self.last = loss;
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub ema: ParamStore<f32>,
    pub opt: OptimizerState,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub loss_stats: LossStats,
}

impl TrainState {
    pub fn new(params: ParamStore<f32>, seed: u64) -> Self {
        Self {
            ema: params.clone(),
            opt: OptimizerState::new(&params),
            params,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            loss_stats: LossStats::default(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .tensors()
            .iter()
            .chain(self.ema.tensors())
            .all(Tensor::is_finite)
    }
}

/// A residual with its diffusion time and noise draw.
#[derive(Debug, Clone)]
pub struct NoisedItem<'a> {
    pub sample: &'a ResidualSample,
    pub t: f64,
    pub eps: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItemLoss {
    pub t: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Optimizer step count after this update.
    pub step: u64,
    /// `None` for a summed multitask step.
    pub task: Option<Task>,
    pub loss: f64,
    pub lr: f64,
    pub ema_gap: f64,
    pub items: Vec<ItemLoss>,
}

pub struct LossEval {
    /// Sum of the per-partition mean losses.
    pub total: f64,
    pub parts: Vec<f64>,
    pub items: Vec<ItemLoss>,
    pub grads: HashMap<usize, Tensor<f32>>,
}

pub struct Trainer {
    pub net: FlexNet,
    pub cfg: TrainConfig,
    pub schedule: NoiseSchedule,
}

impl Trainer {
    pub fn new(net: FlexNet, cfg: TrainConfig, schedule: NoiseSchedule) -> Result<Self> {
        cfg.validate()?;
        schedule.validate()?;
        Ok(Self { net, cfg, schedule })
    }

    pub fn sample_time(&self, rng: &mut impl Rng) -> f64 {
        rng.random_range(self.schedule.t_min..=self.schedule.t_max)
    }

    pub fn noise_items<'a>(
        &self,
        rng: &mut impl Rng,
        batch: &[&'a ResidualSample],
    ) -> Vec<NoisedItem<'a>> {
        batch
            .iter()
            .map(|&sample| {
                let t = self.sample_time(rng);
                let eps = standard_normal(rng, sample.residual.len());
                NoisedItem { sample, t, eps }
            })
            .collect()
    }

    /// Indices of a batch drawn uniformly with replacement.
    pub fn draw_indices(&self, state: &mut TrainState, n: usize) -> Vec<usize> {
        (0..self.cfg.batch_size)
            .map(|_| state.rng.random_range(0..n))
            .collect()
    }

    /// Loss and parameter gradients for consecutive partitions evaluated as one batch.
    pub fn loss_and_grads(
        &self,
        params: &ParamStore<f32>,
        parts: &[Vec<NoisedItem>],
        dropout_seed: u64,
    ) -> Result<LossEval> {
        let items: Vec<&NoisedItem> = parts.iter().flatten().collect();
        if items.is_empty() {
            return Err(Error::Parameter("empty batch".into()));
        }
        let r0 = &items[0].sample.residual;
        let (h, w) = (r0.ny, r0.nx);
        let len = h * w;
        let mut z = Vec::with_capacity(items.len() * len);
        let mut v = Vec::with_capacity(items.len() * len);
        for it in &items {
            if it.sample.residual.len() != len {
                return Err(Error::Shape("batch residuals differ in size".into()));
            }
            let r = &it.sample.residual.values;
            z.extend(forward_perturb(r, it.t, &it.eps, &self.schedule)?.z);
            v.extend(velocity_target(r, it.t, &it.eps, &self.schedule)?);
        }
        let b = items.len();
        let ts: Vec<f64> = items.iter().map(|i| i.t).collect();
        let ctxs: Vec<&ConditioningContext> = items.iter().map(|i| &i.sample.context).collect();
        let mut g = Graph::<f32>::training(dropout_seed);
        let y = self.net.forward(
            &mut g,
            params,
            &ts,
            Tensor::new(vec![b, 1, h, w], z),
            &ctxs,
            &ForwardOptions::default(),
        )?;
        let target = g.constant(Tensor::new(vec![b, 1, h, w], v));
        let diff = g.sub(y, target);
        let mut losses = Vec::with_capacity(parts.len());
        let mut start = 0;
        for p in parts.iter().filter(|p| !p.is_empty()) {
            let d = g.narrow(diff, 0, start, p.len());
            let e = match self.cfg.loss {
                LossKind::L1 => g.abs(d),
                LossKind::L2 => g.square(d),
            };
            losses.push(g.mean_all(e));
            start += p.len();
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l);
        }
        let total_v = g.value(total).data()[0] as f64;
        let dv = g.value(diff).data();
        let per_item = items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                let s = &dv[i * len..(i + 1) * len];
                let acc: f64 = match self.cfg.loss {
                    LossKind::L1 => s.iter().map(|x| x.abs() as f64).sum(),
                    LossKind::L2 => s.iter().map(|x| (*x as f64).powi(2)).sum(),
                };
                ItemLoss {
                    t: it.t,
                    loss: acc / len as f64,
                }
            })
            .collect();
        let parts_v = losses
            .iter()
            .map(|&l| g.value(l).data()[0] as f64)
            .collect();
        if !total_v.is_finite() {
            return Ok(LossEval {
                total: total_v,
                parts: parts_v,
                items: per_item,
                grads: HashMap::new(),
            });
        }
        let grads = g.backward(total).into_params();
        Ok(LossEval {
            total: total_v,
            parts: parts_v,
            items: per_item,
            grads,
        })
    }

    fn optimizer_step(
        &self,
        state: &mut TrainState,
        parts: Vec<Vec<NoisedItem>>,
        task: Option<Task>,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepReport> {
        let seed = rng.next_u64();
        let eval = self.loss_and_grads(&state.params, &parts, seed)?;
        if !eval.total.is_finite() {
            return Err(Error::Instability {
                step: state.step as usize,
                what: format!("non-finite training loss {}", eval.total),
            });
        }
        let lr = learning_rate(
            self.cfg.lr_schedule,
            self.cfg.base_lr,
            state.step,
            self.cfg.total_steps,
        );
        let mut params = state.params.clone();
        let mut opt = state.opt.clone();
        apply_update(
            &self.cfg.optimizer_config(),
            lr,
            &mut params,
            &mut opt,
            &eval.grads,
        );
        if !params.tensors().iter().all(Tensor::is_finite) {
            return Err(Error::Instability {
                step: state.step as usize,
                what: "non-finite parameters after update".into(),
            });
        }
        state.params = params;
        state.opt = opt;
        ema_update(&mut state.ema, &state.params, self.cfg.ema_decay);
        state.step += 1;
        state.loss_stats.record(eval.total);
        Ok(StepReport {
            step: state.step,
            task,
            loss: eval.total,
            lr,
            ema_gap: ema_gap(&state.ema, &state.params),
            items: eval.items,
        })
    }

    /// One optimizer step on a single-task batch. On error the state is left untouched.
    pub fn train_step(
        &self,
        state: &mut TrainState,
        batch: &[&ResidualSample],
    ) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Parameter("empty batch".into()));
        }
        let task = batch[0].context.task;
        let mut rng = state.rng.clone();
        let items = self.noise_items(&mut rng, batch);
        let report = self.optimizer_step(state, vec![items], Some(task), &mut rng)?;
        state.rng = rng;
        Ok(report)
    }

    /// Multitask update: two sequential steps (SR then FC) or one step on the summed loss.
    pub fn train_step_multitask(
        &self,
        state: &mut TrainState,
        sr: &[&ResidualSample],
        fc: &[&ResidualSample],
    ) -> Result<Vec<StepReport>> {
        match (sr.is_empty(), fc.is_empty()) {
            (true, true) => return Err(Error::Parameter("empty batch".into())),
            (false, true) => return Ok(vec![self.train_step(state, sr)?]),
            (true, false) => return Ok(vec![self.train_step(state, fc)?]),
            _ => {}
        }
        match self.cfg.grad_mode {
            GradMode::TwoSteps => {
                let backup = state.clone();
                let first = self.train_step(state, sr)?;
                match self.train_step(state, fc) {
                    Ok(second) => Ok(vec![first, second]),
                    Err(e) => {
                        *state = backup;
                        Err(e)
                    }
                }
            }
            GradMode::Summed => {
                let mut rng = state.rng.clone();
                let a = self.noise_items(&mut rng, sr);
                let b = self.noise_items(&mut rng, fc);
                let report = self.optimizer_step(state, vec![a, b], None, &mut rng)?;
                state.rng = rng;
                Ok(vec![report])
            }
        }
    }

    pub fn predictor(&self, state: &TrainState, use_ema: bool) -> FlexPredictor {
        FlexPredictor {
            net: self.net.clone(),
            params: if use_ema {
                state.ema.clone()
            } else {
                state.params.clone()
            },
        }
    }
}

/// One row of the training log.
pub fn log_row(r: &StepReport) -> String {
    let task = match r.task {
        Some(Task::SuperResolution) => "sr",
        Some(Task::Forecast) => "fc",
        None => "sr+fc",
    };
    format!(
        "{},{},{:.8e},{:.6e},{:.6e}",
        r.step, task, r.loss, r.lr, r.ema_gap
    )
}

pub const LOG_HEADER: &str = "step,task,loss,lr,ema_gap";
