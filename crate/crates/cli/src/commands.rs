//! Command implementations behind the `flexdiff` binary.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use flexdiff_core::dataio::Dataset;
use flexdiff_core::diffusion::EnsembleStats;
use flexdiff_core::metrics::{autoregressive_rollout, pcc, pull_stats, rfne, vorticity_spectrum};
use flexdiff_core::simulator::run_with;
use flexdiff_core::{Error, Field, NoiseSchedule, Result, Task};
use flexdiff_model::trainer::{log_row, LOG_HEADER};
use flexdiff_model::{
    load_checkpoint, save_checkpoint, FlexNet, FlexPredictor, TrainState, Trainer,
};

use crate::analysis::{fig7_analog, gaussian_self_test};
use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::pipeline::{
    normalize_samples, residual_samples, residual_std, train_until, Inference, ResidualDataset,
    TiledForecaster, TrainData,
};

#[derive(Debug, Parser)]
#[command(
    name = "flexdiff",
    version,
    about = "Residual diffusion for turbulent flow super-resolution and forecasting"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a vorticity trajectory.
    Simulate(SimulateArgs),
    /// Turn trajectories into residual samples.
    MakeDataset(MakeDatasetArgs),
    Train(TrainArgs),
    /// Predict fields from a checkpoint.
    Sample(SampleArgs),
    /// Score predictions against truth.
    Evaluate(EvaluateArgs),
    /// Fisher-divergence curves, covariance spectra and Gaussian identity checks.
    Theory(TheoryArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Sr,
    Fc,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Sr => Task::SuperResolution,
            TaskArg::Fc => Task::Forecast,
        }
    }
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub viscosity: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Zero viscosity.
    #[arg(long)]
    pub inviscid: bool,
}

#[derive(Debug, Args)]
pub struct MakeDatasetArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Trajectory files.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub factor: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, conflicts_with = "norm_from")]
    pub norm_std: Option<f64>,
    /// Reuse the normalization of an existing dataset directory.
    #[arg(long)]
    pub norm_from: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Dataset directories (one per task for multitask training).
    #[arg(long = "data", required = true)]
    pub data: Vec<PathBuf>,
    /// Run directory for the checkpoint, log and manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop (with a checkpoint) once this many steps are done.
    #[arg(long)]
    pub stop_after: Option<u64>,
    /// Continue from the run directory's checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory: one prediction per sample.
    #[arg(long, required_unless_present = "trajectory")]
    pub data: Option<PathBuf>,
    /// Trajectory file: autoregressive forecast rollout.
    #[arg(long, conflicts_with = "data")]
    pub trajectory: Option<PathBuf>,
    /// Index of the current frame that starts the rollout.
    #[arg(long, default_value_t = 1)]
    pub start: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub ensemble: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rollout: Option<usize>,
    /// Use the raw weights instead of the EMA.
    #[arg(long)]
    pub raw_weights: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Reference predictions scored alongside (bicubic or persistence).
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Ensemble spread matching `pred`; enables the pull statistics.
    #[arg(long)]
    pub std: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Trajectory files.
    #[arg(long = "data")]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::MakeDataset(a) => make_dataset(&a),
        Command::Train(a) => train(&a),
        Command::Sample(a) => sample_cmd(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Theory(a) => theory(&a),
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    let s = &mut cfg.sim;
    macro_rules! set {
        ($($f:ident => $field:ident),*) => {$( if let Some(v) = a.$f { s.$field = v; } )*};
    }
    set!(n => n, steps => steps, seed => init_seed, stride => stride, burn_in => burn_in, viscosity => viscosity, dt => dt);
    if a.inviscid {
        s.viscosity = 0.0;
    }
    cfg.validate()?;
    let (mut e, mut z) = (Vec::new(), Vec::new());
    let ds = run_with(&cfg.sim, |st| {
        e.push(st.energy);
        z.push(st.enstrophy);
    })?;
    ds.save(&a.out)?;
    let drift = |v: &[f64]| {
        v.iter()
            .map(|x| ((x - v[0]) / v[0]).abs())
            .fold(0.0, f64::max)
    };
    println!("snapshots: {}", ds.len());
    println!("re_tag: {:.6e}", cfg.sim.re_tag());
    println!(
        "energy: initial {:.9e} final {:.9e} max relative drift {:.3e}",
        e[0],
        e[e.len() - 1],
        drift(&e)
    );
    println!(
        "enstrophy: initial {:.9e} final {:.9e} max relative drift {:.3e}",
        z[0],
        z[z.len() - 1],
        drift(&z)
    );
    let canonical = cfg.to_canonical()?;
    let mut m = Manifest::new("simulate", &canonical);
    m.output(&a.out)?;
    m.note("snapshots", ds.len());
    m.note("energy_drift", drift(&e));
    m.note("enstrophy_drift", drift(&z));
    m.write(&manifest_path(&a.out))
}

fn load_trajectory(p: &Path) -> Result<Vec<Field>> {
    Dataset::load(p)?.fields()
}

pub fn make_dataset(a: &MakeDatasetArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(t) = a.task {
        cfg.data.task = t.into();
    }
    if let Some(f) = a.factor {
        cfg.data.factor = f;
    }
    if let Some(h) = a.horizon {
        cfg.data.horizon = h;
    }
    if let Some(s) = a.norm_std {
        cfg.data.norm_std = Some(s);
    }
    if let Some(dir) = &a.norm_from {
        cfg.data.norm_std = Some(ResidualDataset::load(dir)?.meta.norm_std);
    }
    cfg.validate()?;
    let task = cfg.data.task;
    let mut samples = Vec::new();
    for p in &a.inputs {
        samples.extend(residual_samples(&load_trajectory(p)?, &cfg.data, task)?);
    }
    if samples.is_empty() {
        return Err(Error::Estimator(
            "the inputs yield no residual samples".into(),
        ));
    }
    let std = match cfg.data.norm_std {
        Some(s) => s,
        None => residual_std(&samples)?,
    };
    cfg.data.norm_std = Some(std);
    let ds = ResidualDataset::from_samples(&samples, &cfg.data, task, std)?;
    let written = ds.save(&a.out)?;
    println!("samples: {}", samples.len());
    println!("norm_std: {std:.9e}");
    let mut m = Manifest::new("make-dataset", &cfg.to_canonical()?);
    for p in &a.inputs {
        m.input(p)?;
    }
    for p in &written {
        m.output(p)?;
    }
    m.note("samples", samples.len());
    m.note("norm_std", std);
    m.write(&a.out.join("manifest.json"))
}

/// Normalized per-task training data and the shared normalization scale.
pub fn load_train_data(
    dirs: &[PathBuf],
    cfg_std: Option<f64>,
) -> Result<(TrainData, f64, Vec<Task>)> {
    let sets = dirs
        .iter()
        .map(|d| ResidualDataset::load(d))
        .collect::<Result<Vec<_>>>()?;
    let std = match cfg_std {
        Some(s) => s,
        None => {
            let s = sets[0].meta.norm_std;
            if sets.iter().any(|d| d.meta.norm_std != s) {
                return Err(Error::Consistency(
                    "datasets use different normalizations; rebuild them with a shared --norm-std"
                        .into(),
                ));
            }
            s
        }
    };
    let mut data = TrainData::default();
    let mut tasks = Vec::new();
    for d in &sets {
        let n = normalize_samples(&d.samples()?, std)?;
        match d.meta.task {
            Task::SuperResolution => data.sr.extend(n),
            Task::Forecast => data.fc.extend(n),
        }
        if !tasks.contains(&d.meta.task) {
            tasks.push(d.meta.task);
        }
    }
    tasks.sort_by_key(|t| matches!(t, Task::Forecast));
    Ok((data, std, tasks))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.steps {
        cfg.train.total_steps = s;
    }
    if let Some(p) = &a.preset {
        cfg.model.preset = p.clone();
    }
    if let Some(lr) = a.lr {
        cfg.train.base_lr = lr;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let (data, std, tasks) = load_train_data(&a.data, cfg.data.norm_std)?;
    cfg.data.norm_std = Some(std);
    if tasks.len() == 2 {
        cfg.train.multitask = true;
    } else {
        if cfg.train.multitask {
            return Err(Error::Parameter(
                "multitask training needs one SR and one FC dataset".into(),
            ));
        }
        cfg.data.task = tasks[0];
    }
    let model = cfg.model_config()?;
    let canonical = cfg.to_canonical()?;
    std::fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("checkpoint.bin");
    let log_path = a.out.join("train_log.csv");
    std::fs::write(a.out.join("config.toml"), &canonical)?;

    let (net, params) = FlexNet::build::<f32>(&model, cfg.model.seed)?;
    let trainer = Trainer::new(net, cfg.train.clone(), NoiseSchedule::default())?;
    let mut state = if a.resume {
        let (_, st) = load_checkpoint(&ckpt, Some(&canonical))?;
        if !st.params.same_layout(&params) {
            return Err(Error::Consistency(
                "checkpoint parameters do not match the model".into(),
            ));
        }
        st
    } else {
        TrainState::new(params, cfg.train.seed)
    };
    let mut log = if a.resume {
        BufWriter::new(OpenOptions::new().append(true).open(&log_path)?)
    } else {
        let mut w = BufWriter::new(File::create(&log_path)?);
        writeln!(w, "{LOG_HEADER}")?;
        w
    };
    let total = cfg.train.total_steps;
    let until = a.stop_after.map_or(total, |s| s.min(total));
    let start = state.step;
    let every = (total / 20).max(1);
    let result = train_until(
        &trainer,
        &mut state,
        &data,
        cfg.data.patch,
        until,
        |r, _| {
            writeln!(log, "{}", log_row(r))?;
            if r.step % every == 0 || r.step == until {
                eprintln!("step {:>6}  loss {:.5}  lr {:.3e}", r.step, r.loss, r.lr);
            }
            Ok(())
        },
    );
    log.flush()?;
    drop(log);
    result?;
    save_checkpoint(&ckpt, &canonical, &state)?;
    let mut m = Manifest::new("train", &canonical);
    for d in &a.data {
        for f in ["dataset.json", "residual.ds"] {
            m.input(&d.join(f))?;
        }
    }
    m.output(&ckpt)?;
    m.output(&log_path)?;
    m.note("start_step", start);
    m.note("step", state.step);
    m.note("mean_loss", state.loss_stats.mean);
    m.note("last_loss", state.loss_stats.last);
    m.note("norm_std", std);
    m.write(&a.out.join("manifest.json"))
}

/// The model stored in a checkpoint, checked against `cfg` when given.
pub fn load_model(
    ckpt: &Path,
    cfg: Option<RunConfig>,
    use_ema: bool,
) -> Result<(RunConfig, FlexPredictor)> {
    let (text, state) = load_checkpoint(ckpt, None)?;
    let stored = RunConfig::parse(&text)?;
    let mut cfg = match cfg {
        None => stored.clone(),
        Some(c) => {
            if c.model_config()? != stored.model_config()? {
                return Err(Error::Consistency(
                    "checkpoint config mismatch: model differs".into(),
                ));
            }
            if c.data.norm_std.is_some() && c.data.norm_std != stored.data.norm_std {
                return Err(Error::Consistency(
                    "checkpoint config mismatch: normalization differs".into(),
                ));
            }
            c
        }
    };
    cfg.data.norm_std = stored.data.norm_std;
    let (net, params) = FlexNet::build::<f32>(&cfg.model_config()?, cfg.model.seed)?;
    if !state.params.same_layout(&params) {
        return Err(Error::Consistency(
            "checkpoint config mismatch: parameter layout differs".into(),
        ));
    }
    let params = if use_ema { state.ema } else { state.params };
    Ok((cfg, FlexPredictor { net, params }))
}

pub fn sample_cmd(a: &SampleArgs) -> Result<()> {
    let user = match &a.config.config {
        Some(p) => Some(RunConfig::load(p)?),
        None => None,
    };
    let use_ema = !a.raw_weights && user.as_ref().is_none_or(|c| c.sample.use_ema);
    let (mut cfg, predictor) = load_model(&a.checkpoint, user, use_ema)?;
    if let Some(s) = a.steps {
        cfg.sample.n_steps = s;
    }
    if let Some(m) = a.ensemble {
        cfg.sample.ensemble = m;
    }
    if let Some(s) = a.seed {
        cfg.sample.seed = s;
    }
    if let Some(r) = a.rollout {
        cfg.sample.rollout = r;
    }
    cfg.sample.use_ema = use_ema;
    cfg.validate()?;
    let norm_std = cfg
        .data
        .norm_std
        .ok_or_else(|| Error::Consistency("checkpoint lacks a normalization scale".into()))?;
    let inf = Inference {
        predictor: &predictor,
        data: &cfg.data,
        sample: &cfg.sample,
        schedule: NoiseSchedule::default(),
        norm_std,
    };
    std::fs::create_dir_all(&a.out)?;
    let canonical = cfg.to_canonical()?;
    let mut m = Manifest::new("sample", &canonical);
    m.input(&a.checkpoint)?;
    let mut outputs = Vec::new();
    if let Some(dir) = &a.data {
        let ds = ResidualDataset::load(dir)?;
        m.input(&dir.join("base.ds"))?;
        if !predictor.net.config().tasks.contains(&ds.meta.task) {
            return Err(Error::Consistency(format!(
                "checkpoint model was not trained for {:?}",
                ds.meta.task
            )));
        }
        let samples = ds.samples()?;
        let like = &samples[0].residual;
        let mut pred = Dataset::new(like.nx, like.ny, ds.base.dt, 0.0, ds.base.re_tag);
        let mut spread = pred.clone();
        for (i, s) in samples.iter().enumerate() {
            let (f, sd) = inf.field(&s.context, cfg.sample.seed.wrapping_add(i as u64))?;
            pred.push(&f)?;
            if let Some(sd) = sd {
                spread.push(&sd)?;
            }
        }
        outputs.push(save_ds(&pred, &a.out.join("pred.ds"))?);
        if !spread.is_empty() {
            outputs.push(save_ds(&spread, &a.out.join("std.ds"))?);
        }
        println!("predictions: {}", pred.len());
    } else if let Some(traj_path) = &a.trajectory {
        m.input(traj_path)?;
        let traj = load_trajectory(traj_path)?;
        let h = cfg.sample.rollout;
        if a.start == 0 || a.start + h >= traj.len() {
            return Err(Error::Parameter(format!(
                "rollout from frame {} over {h} steps needs frames up to {} (have {})",
                a.start,
                a.start + h,
                traj.len()
            )));
        }
        let truth = &traj[a.start + 1..=a.start + h];
        let fc = TiledForecaster {
            inference: inf,
            seed: cfg.sample.seed,
        };
        let steps = autoregressive_rollout(&fc, &traj[a.start - 1], &traj[a.start], truth)?;
        let cur = &traj[a.start];
        let mk = || Dataset::new(cur.nx, cur.ny, cur.dt, 0.0, cur.re_tag);
        let (mut pred, mut tr, mut pers) = (mk(), mk(), mk());
        for (s, t) in steps.iter().zip(truth) {
            pred.push(&s.field)?;
            tr.push(t)?;
            pers.push(cur)?;
            println!(
                "step {:>3}  pcc {:.6}  persistence {:.6}",
                tr.len(),
                s.pcc,
                pcc(&cur.values, &t.values)?
            );
        }
        outputs.push(save_ds(&pred, &a.out.join("pred.ds"))?);
        outputs.push(save_ds(&tr, &a.out.join("truth.ds"))?);
        outputs.push(save_ds(&pers, &a.out.join("persistence.ds"))?);
    }
    for p in &outputs {
        m.output(p)?;
    }
    m.write(&a.out.join("manifest.json"))
}

fn save_ds(ds: &Dataset, p: &Path) -> Result<PathBuf> {
    ds.save(p)?;
    Ok(p.to_path_buf())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let pred = Dataset::load(&a.pred)?;
    let truth = Dataset::load(&a.truth)?;
    let base = a.baseline.as_ref().map(Dataset::load).transpose()?;
    let spread = a.std.as_ref().map(Dataset::load).transpose()?;
    let n = truth.len();
    let same = |d: &Dataset| d.len() == n && d.nx == truth.nx && d.ny == truth.ny;
    if !same(&pred)
        || base.as_ref().is_some_and(|b| !same(b))
        || spread.as_ref().is_some_and(|s| !same(s))
    {
        return Err(Error::Shape(format!(
            "inputs differ in snapshot count or grid (truth has {n} of {}x{})",
            truth.nx, truth.ny
        )));
    }
    if n == 0 {
        return Err(Error::Estimator("no snapshots to evaluate".into()));
    }
    std::fs::create_dir_all(&a.out)?;
    let metrics_path = a.out.join("metrics.csv");
    let mut csv = String::from("row,rfne,pcc");
    if base.is_some() {
        csv.push_str(",baseline_rfne,baseline_pcc");
    }
    csv.push('\n');
    let mut sums = vec![0.0; if base.is_some() { 4 } else { 2 }];
    for i in 0..n {
        let t = &truth.snapshots[i];
        let mut row = vec![rfne(&pred.snapshots[i], t)?, pcc(&pred.snapshots[i], t)?];
        if let Some(b) = &base {
            row.extend([rfne(&b.snapshots[i], t)?, pcc(&b.snapshots[i], t)?]);
        }
        for (s, v) in sums.iter_mut().zip(&row) {
            *s += v;
        }
        push_row(&mut csv, &i.to_string(), &row);
    }
    let means: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
    push_row(&mut csv, "mean", &means);
    std::fs::write(&metrics_path, csv)?;

    let spectrum_path = a.out.join("spectrum.csv");
    let (k, ep) = mean_spectrum(&pred)?;
    let (_, et) = mean_spectrum(&truth)?;
    let eb = base.as_ref().map(mean_spectrum).transpose()?.map(|x| x.1);
    let mut csv = String::from("k,pred,truth");
    if eb.is_some() {
        csv.push_str(",baseline");
    }
    csv.push('\n');
    for i in 0..k.len() {
        let mut row = vec![ep[i], et[i]];
        if let Some(b) = &eb {
            row.push(b[i]);
        }
        push_row(&mut csv, &k[i].to_string(), &row);
    }
    std::fs::write(&spectrum_path, csv)?;

    let mut m = Manifest::new("evaluate", &cfg.to_canonical()?);
    m.input(&a.pred)?;
    m.input(&a.truth)?;
    if let Some(b) = &a.baseline {
        m.input(b)?;
    }
    m.output(&metrics_path)?;
    m.output(&spectrum_path)?;
    m.note("mean_rfne", means[0]);
    m.note("mean_pcc", means[1]);
    println!("mean rfne {:.6}  mean pcc {:.6}", means[0], means[1]);
    if base.is_some() {
        m.note("baseline_mean_rfne", means[2]);
        m.note("baseline_mean_pcc", means[3]);
        println!(
            "baseline rfne {:.6}  baseline pcc {:.6}",
            means[2], means[3]
        );
    }
    if let (Some(s), Some(sp)) = (&spread, &a.std) {
        m.input(sp)?;
        let ens = EnsembleStats {
            mean: pred.snapshots.concat(),
            std: s.snapshots.concat(),
            members: 0,
            stack: Vec::new(),
        };
        let p = pull_stats(&ens, &truth.snapshots.concat(), cfg.eval.std_floor)?;
        let pull_path = a.out.join("pull.csv");
        std::fs::write(
            &pull_path,
            format!(
                "pull_mean,pull_std,used,masked\n{:.9e},{:.9e},{},{}\n",
                p.pull_mean, p.pull_std, p.used, p.masked
            ),
        )?;
        m.output(&pull_path)?;
        m.note("pull_mean", p.pull_mean);
        m.note("pull_std", p.pull_std);
        println!("pull mean {:.6}  pull std {:.6}", p.pull_mean, p.pull_std);
    }
    m.write(&a.out.join("manifest.json"))
}

fn push_row(csv: &mut String, key: &str, vals: &[f64]) {
    csv.push_str(key);
    for v in vals {
        write!(csv, ",{v:.9e}").unwrap();
    }
    csv.push('\n');
}

/// Radially binned spectrum averaged over snapshots.
fn mean_spectrum(d: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut k = Vec::new();
    let mut acc: Vec<f64> = Vec::new();
    for f in d.fields()? {
        let s = vorticity_spectrum(&f)?;
        if acc.is_empty() {
            k = s.k_centers;
            acc = s.energy;
        } else {
            acc.iter_mut().zip(&s.energy).for_each(|(a, b)| *a += b);
        }
    }
    acc.iter_mut().for_each(|v| *v /= d.len() as f64);
    Ok((k, acc))
}

pub fn theory(a: &TheoryArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.seed {
        cfg.theory.seed = s;
    }
    std::fs::create_dir_all(&a.out)?;
    let schedule = NoiseSchedule::default();
    let gauss = gaussian_self_test(&cfg.theory, &schedule)?;
    let gauss_path = a.out.join("gaussian.csv");
    gauss.write_csv(&gauss_path)?;
    println!(
        "gaussian self-test: {}",
        if gauss.pass() { "pass" } else { "FAIL" }
    );
    let mut m = Manifest::new("theory", &cfg.to_canonical()?);
    m.output(&gauss_path)?;
    m.note("gaussian_pass", gauss.pass());
    m.note(
        "printed_bound_holds_everywhere",
        gauss.printed_bound_holds(),
    );
    let mut trajs = Vec::new();
    for p in &a.data {
        m.input(p)?;
        trajs.push(load_trajectory(p)?);
    }
    if trajs.iter().map(Vec::len).sum::<usize>() == 0 {
        return Err(Error::Estimator(
            "theory needs at least one non-empty trajectory".into(),
        ));
    }
    let fig = fig7_analog(&trajs, &cfg.theory, &schedule)?;
    let fisher_path = a.out.join("fisher.csv");
    fig.write_csv(&fisher_path)?;
    m.output(&fisher_path)?;
    let report = fig.report();
    for (k, v) in &report {
        println!("{k}: {v}");
        m.note(k, v.clone());
    }
    m.write(&a.out.join("manifest.json"))
}
