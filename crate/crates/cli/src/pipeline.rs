//! Residual datasets, the patch-based training loop and tiled inference.

use std::path::Path;

use serde::{Deserialize, Serialize};

use flexdiff_core::dataio::{
    crop, make_fc_residual, make_sr_residual_with, normalize, random_origin, stitch, Dataset,
    Patch, ResidualSample, SrOptions,
};
use flexdiff_core::diffusion::{ensemble, sample, SampleShape};
use flexdiff_core::metrics::ResidualForecaster;
use flexdiff_core::{ConditioningContext, Error, Field, NoiseSchedule, Result, Task};
use flexdiff_model::trainer::StepReport;
use flexdiff_model::{FlexPredictor, TrainState, Trainer};

use crate::config::{DataConfig, SampleConfig};

/// Physical-unit residual samples of one trajectory.
pub fn residual_samples(
    traj: &[Field],
    data: &DataConfig,
    task: Task,
) -> Result<Vec<ResidualSample>> {
    match task {
        Task::SuperResolution => traj
            .iter()
            .map(|f| {
                make_sr_residual_with(
                    f,
                    data.factor,
                    SrOptions {
                        prefilter: data.prefilter,
                    },
                )
            })
            .collect(),
        Task::Forecast => {
            let s = data.horizon;
            if traj.len() < s + 2 {
                return Ok(Vec::new());
            }
            (1..traj.len() - s)
                .map(|i| make_fc_residual(&traj[i - 1], &traj[i], &traj[i + s], s))
                .collect()
        }
    }
}

/// Root mean square of all residual values (the normalization std at zero mean).
pub fn residual_std(samples: &[ResidualSample]) -> Result<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for r in samples {
        for &v in &r.residual.values {
            s += (v as f64).powi(2);
        }
        n += r.residual.len();
    }
    if n == 0 {
        return Err(Error::Estimator("no residual samples".into()));
    }
    let std = (s / n as f64).sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::Estimator(format!("degenerate residual scale {std}")));
    }
    Ok(std)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task: Task,
    pub factor: usize,
    pub horizon: usize,
    pub norm_mean: f64,
    pub norm_std: f64,
    pub count: usize,
    pub re_tags: Vec<f64>,
}

/// Residual samples stored as parallel snapshot files plus a JSON header.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDataset {
    pub meta: DatasetMeta,
    pub residual: Dataset,
    /// Upsampled low-resolution field (SR) or current frame (FC).
    pub base: Dataset,
    /// FC only.
    pub previous: Option<Dataset>,
    pub target: Dataset,
}

fn stack(fields: impl Iterator<Item = Field>, like: &Field, norm_std: f64) -> Result<Dataset> {
    let mut ds = Dataset::new(like.nx, like.ny, like.dt, 0.0, like.re_tag);
    ds.norm_std = norm_std;
    for f in fields {
        ds.push(&f)?;
    }
    Ok(ds)
}

impl ResidualDataset {
    pub fn from_samples(
        samples: &[ResidualSample],
        data: &DataConfig,
        task: Task,
        norm_std: f64,
    ) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Estimator("dataset would be empty".into()))?;
        let like = &first.residual;
        let base = |s: &ResidualSample| s.context.base().clone();
        let target = |s: &ResidualSample| {
            let b = s.context.base();
            b.with_values(
                s.residual
                    .values
                    .iter()
                    .zip(&b.values)
                    .map(|(r, b)| r + b)
                    .collect(),
            )
        };
        Ok(Self {
            meta: DatasetMeta {
                task,
                factor: data.factor,
                horizon: data.horizon,
                norm_mean: 0.0,
                norm_std,
                count: samples.len(),
                re_tags: samples.iter().map(|s| s.context.re_tag).collect(),
            },
            residual: stack(samples.iter().map(|s| s.residual.clone()), like, norm_std)?,
            base: stack(samples.iter().map(base), like, 1.0)?,
            previous: match task {
                Task::Forecast => Some(stack(
                    samples.iter().map(|s| s.context.snapshots[0].clone()),
                    like,
                    1.0,
                )?),
                Task::SuperResolution => None,
            },
            target: stack(
                samples
                    .iter()
                    .map(target)
                    .collect::<Result<Vec<_>>>()?
                    .into_iter(),
                like,
                1.0,
            )?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: &str, ds: &Dataset| -> Result<()> {
            let p = dir.join(name);
            ds.save(&p)?;
            written.push(p);
            Ok(())
        };
        put("residual.ds", &self.residual)?;
        put("base.ds", &self.base)?;
        if let Some(p) = &self.previous {
            put("previous.ds", p)?;
        }
        put("target.ds", &self.target)?;
        let meta = dir.join("dataset.json");
        std::fs::write(
            &meta,
            serde_json::to_string_pretty(&self.meta).expect("meta serializes") + "\n",
        )?;
        written.push(meta);
        Ok(written)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("dataset.json"))?;
        let meta: DatasetMeta =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("dataset.json: {e}")))?;
        let residual = Dataset::load(dir.join("residual.ds"))?;
        let base = Dataset::load(dir.join("base.ds"))?;
        let previous = match meta.task {
            Task::Forecast => Some(Dataset::load(dir.join("previous.ds"))?),
            Task::SuperResolution => None,
        };
        let target = Dataset::load(dir.join("target.ds"))?;
        let n = meta.count;
        if [residual.len(), base.len(), target.len()]
            .iter()
            .any(|&l| l != n)
            || previous.as_ref().is_some_and(|p| p.len() != n)
            || meta.re_tags.len() != n
        {
            return Err(Error::Format(format!(
                "dataset files disagree with the header count {n}"
            )));
        }
        Ok(Self {
            meta,
            residual,
            base,
            previous,
            target,
        })
    }

    /// Samples in physical units.
    pub fn samples(&self) -> Result<Vec<ResidualSample>> {
        (0..self.meta.count)
            .map(|i| {
                let re = self.meta.re_tags[i];
                let mut base = self.base.field(i)?;
                base.re_tag = re;
                let context = match &self.previous {
                    Some(p) => {
                        let mut prev = p.field(i)?;
                        prev.re_tag = re;
                        ConditioningContext::forecast(prev, base, re, self.meta.horizon)
                    }
                    None => ConditioningContext::super_resolution(base, re, self.meta.factor),
                };
                Ok(ResidualSample {
                    residual: self.residual.field(i)?,
                    context,
                    norm_mean: 0.0,
                    norm_std: 1.0,
                })
            })
            .collect()
    }
}

pub fn normalize_samples(samples: &[ResidualSample], std: f64) -> Result<Vec<ResidualSample>> {
    samples.iter().map(|s| s.normalized(0.0, std)).collect()
}

/// Normalized training samples per task.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub sr: Vec<ResidualSample>,
    pub fc: Vec<ResidualSample>,
}

/// A batch of random `patch`-sized windows of randomly drawn samples.
pub fn crop_batch(
    tr: &Trainer,
    st: &mut TrainState,
    set: &[ResidualSample],
    patch: usize,
) -> Result<Vec<ResidualSample>> {
    let idx = tr.draw_indices(st, set.len());
    idx.into_iter()
        .map(|i| {
            let s = &set[i];
            let (nx, ny) = (s.residual.nx, s.residual.ny);
            if nx == patch && ny == patch {
                return Ok(s.clone());
            }
            let x0 = random_origin(nx, patch, &mut st.rng);
            let y0 = random_origin(ny, patch, &mut st.rng);
            s.crop(x0, y0, patch)
        })
        .collect()
}

/// Train until `st.step >= until`, reporting every optimizer step.
pub fn train_until(
    tr: &Trainer,
    st: &mut TrainState,
    data: &TrainData,
    patch: usize,
    until: u64,
    mut on_report: impl FnMut(&StepReport, &TrainState) -> Result<()>,
) -> Result<()> {
    if data.sr.is_empty() && data.fc.is_empty() {
        return Err(Error::Estimator("no training samples".into()));
    }
    while st.step < until {
        let sr = if data.sr.is_empty() {
            Vec::new()
        } else {
            crop_batch(tr, st, &data.sr, patch)?
        };
        let fc = if data.fc.is_empty() {
            Vec::new()
        } else {
            crop_batch(tr, st, &data.fc, patch)?
        };
        let a: Vec<&ResidualSample> = sr.iter().collect();
        let b: Vec<&ResidualSample> = fc.iter().collect();
        for r in tr.train_step_multitask(st, &a, &b)? {
            on_report(&r, st)?;
        }
    }
    Ok(())
}

/// Tile origins covering `n` with windows of `patch` at `stride`, the last one flush with the edge.
pub fn tile_origins(n: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&s| s + patch <= n)
        .collect();
    if v.last().is_some_and(|&s| s + patch < n) {
        v.push(n - patch);
    }
    v
}

/// Tiled residual prediction in physical units.
pub struct Inference<'a> {
    pub predictor: &'a FlexPredictor,
    pub data: &'a DataConfig,
    pub sample: &'a SampleConfig,
    pub schedule: NoiseSchedule,
    pub norm_std: f64,
}

pub struct Prediction {
    pub residual: Field,
    /// Per-pixel ensemble spread, with two or more members.
    pub spread: Option<Field>,
}

impl Inference<'_> {
    pub fn residual(&self, ctx: &ConditioningContext, seed: u64) -> Result<Prediction> {
        let mut nctx = ctx.clone();
        for s in &mut nctx.snapshots {
            s.values = normalize(&s.values, 0.0, self.norm_std)?;
        }
        let base = nctx.base().clone();
        let p = self.data.patch;
        if base.nx < p || base.ny < p {
            return Err(Error::Shape(format!(
                "{}x{} field is smaller than the {p} patch",
                base.nx, base.ny
            )));
        }
        let shape = SampleShape::scalar_grid(p, p);
        let (mut means, mut spreads) = (Vec::new(), Vec::new());
        let mut k = 0u64;
        for y0 in tile_origins(base.ny, p, self.data.tile_stride) {
            for x0 in tile_origins(base.nx, p, self.data.tile_stride) {
                let mut tc = nctx.clone();
                for s in &mut tc.snapshots {
                    *s = crop(s, x0, y0, p)?;
                }
                let tile_seed = seed.wrapping_mul(0x9E37_79B9).wrapping_add(k);
                k += 1;
                let scale = |v: &[f32]| {
                    v.iter()
                        .map(|x| (*x as f64 * self.norm_std) as f32)
                        .collect::<Vec<_>>()
                };
                let like = crop(&base, x0, y0, p)?;
                let (m, sd) = if self.sample.ensemble >= 2 {
                    let e = ensemble(
                        self.predictor,
                        &tc,
                        shape,
                        self.sample.n_steps,
                        self.sample.ensemble,
                        &self.schedule,
                        tile_seed,
                        self.sample.grid,
                    )?;
                    (scale(&e.mean), Some(scale(&e.std)))
                } else {
                    let r = sample(
                        self.predictor,
                        &tc,
                        shape,
                        self.sample.n_steps,
                        &self.schedule,
                        tile_seed,
                        self.sample.grid,
                    )?;
                    (scale(&r), None)
                };
                means.push(Patch {
                    x0,
                    y0,
                    field: like.with_values(m)?,
                });
                if let Some(sd) = sd {
                    spreads.push(Patch {
                        x0,
                        y0,
                        field: like.with_values(sd)?,
                    });
                }
            }
        }
        let mut residual = stitch(&means, base.nx, base.ny, self.data.overlap)?;
        residual.copy_meta_from(ctx.base());
        let spread = if spreads.is_empty() {
            None
        } else {
            let mut s = stitch(&spreads, base.nx, base.ny, self.data.overlap)?;
            s.copy_meta_from(ctx.base());
            Some(s)
        };
        Ok(Prediction { residual, spread })
    }

    /// Base plus predicted residual.
    pub fn field(&self, ctx: &ConditioningContext, seed: u64) -> Result<(Field, Option<Field>)> {
        let p = self.residual(ctx, seed)?;
        let b = ctx.base();
        let vals = b
            .values
            .iter()
            .zip(&p.residual.values)
            .map(|(a, r)| a + r)
            .collect();
        Ok((b.with_values(vals)?, p.spread))
    }
}

/// Single-step forecaster for autoregressive rollouts.
pub struct TiledForecaster<'a> {
    pub inference: Inference<'a>,
    pub seed: u64,
}

impl ResidualForecaster for TiledForecaster<'_> {
    fn forecast(&self, context: &ConditioningContext, step: usize) -> Result<Vec<f32>> {
        Ok(self
            .inference
            .residual(context, self.seed.wrapping_add(step as u64))?
            .residual
            .values)
    }
}
