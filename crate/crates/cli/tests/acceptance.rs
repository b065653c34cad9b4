//! Acceptance suite: every criterion runs in sequence and prints one PASS/FAIL line.
//!
//! `FLEXDIFF_ACCEPTANCE=5,8` restricts the run to the listed criteria.

use std::f64::consts::PI;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use flexdiff_cli::analysis::{fig7_analog, gaussian_self_test};
use flexdiff_cli::config::{DataConfig, RunConfig, SampleConfig, TheoryConfig};
use flexdiff_cli::pipeline::{
    normalize_samples, residual_samples, residual_std, train_until, Inference, ResidualDataset,
    TiledForecaster, TrainData,
};
use flexdiff_core::dataio::Dataset;
use flexdiff_core::diffusion::{sample_from, time_grid, EnsembleStats, SampleShape, TimeGrid};
use flexdiff_core::metrics::{autoregressive_rollout, pcc, pull_stats, rfne};
use flexdiff_core::simulator::{
    arakawa_jacobian, init_state, run, SimConfig, SimState, Spectral, Stepper,
};
use flexdiff_core::{ConditioningContext, Field, NoiseSchedule, Result, Task};
use flexdiff_model::optim::LrSchedule;
use flexdiff_model::{
    read_checkpoint, write_checkpoint, FlexConfig, FlexNet, ForwardOptions, Graph, LossKind,
    ParamStore, Tensor, TrainConfig, TrainState, Trainer,
};

type Check = (bool, String);

fn corpus() -> &'static Vec<Vec<Field>> {
    static C: OnceLock<Vec<Vec<Field>>> = OnceLock::new();
    C.get_or_init(|| {
        (1..=3)
            .map(|seed| {
                let cfg = SimConfig {
                    n: 64,
                    init_seed: seed,
                    burn_in: 500,
                    stride: 10,
                    steps: 800,
                    ..SimConfig::default()
                };
                run(&cfg).unwrap().fields().unwrap()
            })
            .collect()
    })
}

fn schedule_identities() -> Result<Check> {
    let s = NoiseSchedule::default();
    let mut vp: f64 = 0.0;
    let mut drift: f64 = 0.0;
    for i in 0..=1000 {
        let t = i as f64 / 1000.0;
        let (a, b) = s.alpha_sigma(t)?;
        vp = vp.max((a * a + b * b - 1.0).abs());
        if t >= s.t_min && t <= s.t_max {
            let (f, g2) = s.drift_coeffs(t)?;
            drift = drift.max((g2 + 2.0 * f).abs());
        }
    }
    let l = s.log_snr(0.5)?;
    Ok((
        vp < 1e-12 && l.abs() < 1e-12 && drift < 1e-10,
        format!("max|a^2+s^2-1| {vp:.1e}, lambda(0.5) {l:.1e}, max|g^2+2f| {drift:.1e}"),
    ))
}

fn ddim_oracle() -> Result<Check> {
    let s = NoiseSchedule::default();
    let shape = SampleShape::scalar_grid(64, 64);
    let ctx = ConditioningContext::super_resolution(Field::zeros(64, 64)?, 1.0, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for steps in [1, 2, 10, 50] {
        let r: Vec<f32> = (0..shape.len())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let z1: Vec<f32> = (0..shape.len())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let rr = r.clone();
        let oracle = move |t: f64, z: &[f32], _: SampleShape, _: &ConditioningContext| {
            let (a, b) = s.alpha_sigma(t)?;
            Ok(z.iter()
                .zip(&rr)
                .map(|(&z, &r)| ((a * z as f64 - r as f64) / b) as f32)
                .collect())
        };
        for grid in [TimeGrid::UniformT, TimeGrid::UniformLogSnr] {
            let ts = time_grid(&s, steps, grid)?;
            let out = sample_from(&oracle, &ctx, shape, z1.clone(), &ts, &s)?;
            let e = out
                .iter()
                .zip(&r)
                .map(|(o, r)| (o - r).abs() as f64)
                .fold(0.0, f64::max);
            worst = worst.max(e);
        }
    }
    Ok((
        worst < 1e-6,
        format!("max abs reconstruction error {worst:.2e} over n_steps 1, 2, 10, 50"),
    ))
}

fn velocity_fisher_identity() -> Result<Check> {
    let cfg = TheoryConfig::default();
    let g = gaussian_self_test(&cfg, &NoiseSchedule::default())?;
    let rows = |name: &'static str| g.rows.iter().filter(move |r| r.check == name);
    let exact = rows("velocity_fisher").map(|r| r.error).fold(0.0, f64::max);
    let mc = rows("velocity_fisher_mc")
        .map(|r| r.error)
        .fold(0.0, f64::max);
    let n = rows("velocity_fisher").count();
    Ok((
        exact < 1e-10 && mc < 0.02 && n == 15 && cfg.mc_samples == 100_000,
        format!(
            "{n} cases: analytic gap {exact:.1e}, Monte Carlo gap {:.2}% at N=1e5",
            100.0 * mc
        ),
    ))
}

fn hessian_identity() -> Result<Check> {
    let g = gaussian_self_test(&TheoryConfig::default(), &NoiseSchedule::default())?;
    let hess: Vec<_> = g
        .rows
        .iter()
        .filter(|r| r.check == "hessian_covariance")
        .collect();
    let err = hess.iter().map(|r| r.error).fold(0.0, f64::max);
    let corrected = g
        .rows
        .iter()
        .filter(|r| r.check == "velocity_gradient_bound")
        .all(|r| r.pass);
    let printed = g.printed_bound_holds();
    Ok((
        hess.len() == 27 && err < 1e-10 && printed && corrected,
        format!(
            "{} cases: identity error {err:.1e}; printed bound holds {printed}, corrected bound holds {corrected}",
            hess.len()
        ),
    ))
}

fn fisher_ordering() -> Result<Check> {
    let trajs = corpus();
    let f = fig7_analog(trajs, &TheoryConfig::default(), &NoiseSchedule::default())?;
    let sr = f.below_raw(&f.sr, 0.5);
    let fc = f.below_raw(&f.fc, 0.5);
    let ratio = f.eigen_ratio();
    let i = f.raw.t_grid.iter().position(|t| *t >= 0.1).unwrap();
    Ok((
        f.snapshots >= 200 && sr && fc && ratio >= 3.0,
        format!(
            "{} snapshots; D_F at t={}: raw {:.3} sr {:.3} fc {:.3}; sr<raw {sr}, fc<raw {fc} for t<=0.5; eigen ratio {ratio:.1}",
            f.snapshots, f.raw.t_grid[i], f.raw.d_f[i], f.sr.d_f[i], f.fc.d_f[i]
        ),
    ))
}

fn drift(series: &[f64]) -> f64 {
    series
        .iter()
        .map(|v| ((v - series[0]) / series[0]).abs())
        .fold(0.0, f64::max)
}

fn simulator_physics() -> Result<Check> {
    let cfg = SimConfig {
        n: 64,
        viscosity: 0.0,
        dt: 1e-3,
        init_seed: 2,
        ..SimConfig::default()
    };
    let mut st = Stepper::new(&cfg)?;
    let mut s = init_state(&cfg)?;
    let (mut e, mut z) = (vec![s.energy], vec![s.enstrophy]);
    for _ in 0..100 {
        s = st.step(&s)?;
        e.push(s.energy);
        z.push(s.enstrophy);
    }
    let (de, dz) = (drift(&e), drift(&z));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut arakawa: f64 = 0.0;
    for _ in 0..5 {
        let psi: Vec<f64> = (0..64 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let om: Vec<f64> = (0..64 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let j = arakawa_jacobian(&psi, &om, 2.0 * PI / 64.0)?;
        let scale = j.iter().map(|v| v.abs()).sum::<f64>();
        for w in [None, Some(&om), Some(&psi)] {
            let sum: f64 = match w {
                None => j.iter().sum(),
                Some(w) => j.iter().zip(w).map(|(a, b)| a * b).sum(),
            };
            arakawa = arakawa.max(sum.abs() / scale);
        }
    }

    let mut decay: f64 = 0.0;
    for k in [1.0, 2.0] {
        let (n, nu, dt) = (64, 0.01, 0.01);
        let h = 2.0 * PI / n as f64;
        let omega: Vec<f64> = (0..n * n).map(|i| (k * (i % n) as f64 * h).sin()).collect();
        let psi = Spectral::new(n).poisson_solve(&omega)?;
        let cfg = SimConfig {
            n,
            viscosity: nu,
            dt,
            ..SimConfig::default()
        };
        let mut st = Stepper::new(&cfg)?;
        let mut s = SimState {
            n,
            omega: omega.clone(),
            psi,
            step: 0,
            energy: 0.0,
            enstrophy: 0.0,
        };
        for _ in 0..50 {
            s = st.step(&s)?;
        }
        let f = (-nu * k * k * 50.0 * dt).exp();
        decay = decay.max(
            s.omega
                .iter()
                .zip(&omega)
                .map(|(a, b)| (a - f * b).abs())
                .fold(0.0, f64::max),
        );
    }
    Ok((
        de < 1e-6 && dz < 1e-6 && arakawa < 1e-10 && decay < 1e-4,
        format!(
            "inviscid drift energy {de:.1e} enstrophy {dz:.1e}; Arakawa sums {arakawa:.1e}; viscous decay error {decay:.1e}"
        ),
    ))
}

fn noise_field(n: usize, rng: &mut ChaCha8Rng) -> Field {
    Field::new(
        n,
        n,
        (0..n * n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

fn gradient_check() -> Result<f64> {
    let n = 16;
    let (net, mut ps) = FlexNet::build::<f64>(&FlexConfig::tiny(n), 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = ConditioningContext::super_resolution(noise_field(n, &mut rng), 2000.0, 4);
    let b = ConditioningContext::forecast(
        noise_field(n, &mut rng),
        noise_field(n, &mut rng),
        2000.0,
        2,
    );
    let z = Tensor::new(
        vec![2, 1, n, n],
        (0..2 * n * n)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    );
    let target: Vec<f64> = (0..2 * n * n)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let loss = |ps: &ParamStore<f64>| {
        let mut g = Graph::<f64>::training(17);
        let y = net
            .forward(
                &mut g,
                ps,
                &[0.3, 0.8],
                z.clone(),
                &[&a, &b],
                &ForwardOptions::default(),
            )
            .unwrap();
        let tv = g.constant(Tensor::new(g.shape(y).to_vec(), target.clone()));
        let d = g.sub(y, tv);
        let sq = g.square(d);
        let l = g.mean_all(sq);
        (g.value(l).data()[0], g, l)
    };
    let (_, g, l) = loss(&ps);
    let grads = g.backward(l);
    let (mut checked, mut worst) = (0, 0.0f64);
    let h = 1e-6;
    while checked < 20 {
        let id = rng.random_range(0..ps.len());
        let k = rng.random_range(0..ps.get(id).numel());
        let analytic: f64 = grads.param(id).map_or(0.0, |t| t.data()[k]);
        if analytic.abs() < 1e-7 {
            continue;
        }
        let orig = ps.get(id).data()[k];
        ps.get_mut(id).data_mut()[k] = orig + h;
        let lp = loss(&ps).0;
        ps.get_mut(id).data_mut()[k] = orig - h;
        let lm = loss(&ps).0;
        ps.get_mut(id).data_mut()[k] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()));
        checked += 1;
    }
    Ok(worst)
}

fn backbone_checks() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut shapes_ok = true;
    let mut tokens_ok = true;
    for (cfg, n) in [
        (FlexConfig::tiny(16), 16),
        (FlexConfig::tiny(32), 32),
        (FlexConfig::tiny(64), 64),
        (FlexConfig::desk(32), 32),
        (FlexConfig::desk(64), 64),
    ] {
        let (net, ps) = FlexNet::build::<f32>(&cfg, 0)?;
        let (a, b) = (
            ConditioningContext::super_resolution(noise_field(n, &mut rng), 1000.0, 4),
            ConditioningContext::forecast(
                noise_field(n, &mut rng),
                noise_field(n, &mut rng),
                1000.0,
                1,
            ),
        );
        let z = Tensor::new(
            vec![2, 1, n, n],
            (0..2 * n * n)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect(),
        );
        let mut g = Graph::inference();
        let y = net.forward(
            &mut g,
            &ps,
            &[0.3, 0.7],
            z,
            &[&a, &b],
            &ForwardOptions::default(),
        )?;
        shapes_ok &= g.shape(y) == [2, 1, n, n];
        let side = n >> (cfg.enc_channels.len() - 1);
        tokens_ok &= net.sequence_length() == side * side + 1;
    }

    let (net, ps) = FlexNet::build::<f32>(&FlexConfig::tiny(16), 7)?;
    let ctxs = [
        ConditioningContext::super_resolution(noise_field(16, &mut rng), 1000.0, 4),
        ConditioningContext::super_resolution(noise_field(16, &mut rng), 4000.0, 4),
        ConditioningContext::forecast(
            noise_field(16, &mut rng),
            noise_field(16, &mut rng),
            1000.0,
            1,
        ),
    ];
    let z: Vec<f32> = (0..3 * 256)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let t = [0.2, 0.5, 0.9];
    let fwd = |t: &[f64], z: Vec<f32>, c: &[&ConditioningContext]| -> Result<Vec<f32>> {
        let mut g = Graph::inference();
        let y = net.forward(
            &mut g,
            &ps,
            t,
            Tensor::new(vec![c.len(), 1, 16, 16], z),
            c,
            &ForwardOptions::default(),
        )?;
        Ok(g.value(y).data().to_vec())
    };
    let joint = fwd(&t, z.clone(), &[&ctxs[0], &ctxs[1], &ctxs[2]])?;
    let mut batch_gap: f32 = 0.0;
    for i in 0..3 {
        let one = fwd(&t[i..=i], z[i * 256..(i + 1) * 256].to_vec(), &[&ctxs[i]])?;
        batch_gap = one
            .iter()
            .zip(&joint[i * 256..])
            .map(|(a, b)| (a - b).abs())
            .fold(batch_gap, f32::max);
    }

    let grad = gradient_check()?;
    let small = FlexConfig::small(256).with_tasks(&[Task::SuperResolution]);
    let count = FlexNet::build::<f32>(&small, 0)?.1.num_scalars() as f64;
    Ok((
        shapes_ok && tokens_ok && grad < 1e-3 && batch_gap < 1e-5 && (count / 50e6 - 1.0).abs() <= 0.10,
        format!(
            "shapes {shapes_ok}, token counts {tokens_ok}, gradient rel. err {grad:.1e}, batch gap {batch_gap:.1e}, small preset {:.1}M params",
            count / 1e6
        ),
    ))
}

/// Tiny model and optimizer settings for the end-to-end runs.
fn e2e_config(task: Task, steps: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.task = task;
    cfg.model.dropout = 0.0;
    cfg.train = TrainConfig {
        loss: LossKind::L1,
        base_lr: 1e-3,
        lr_schedule: LrSchedule::Cosine,
        ema_decay: 0.99,
        batch_size: 8,
        total_steps: steps,
        ..TrainConfig::default()
    };
    cfg
}

struct Trained {
    cfg: RunConfig,
    trainer: Trainer,
    state: TrainState,
    std: f64,
    secs: f64,
}

fn train_on_corpus(task: Task, steps: u64) -> Result<Trained> {
    let cfg = e2e_config(task, steps);
    let mut samples = Vec::new();
    for traj in &corpus()[..2] {
        samples.extend(residual_samples(traj, &cfg.data, task)?);
    }
    let std = residual_std(&samples)?;
    let norm = normalize_samples(&samples, std)?;
    let data = match task {
        Task::SuperResolution => TrainData {
            sr: norm,
            fc: Vec::new(),
        },
        Task::Forecast => TrainData {
            sr: Vec::new(),
            fc: norm,
        },
    };
    let (net, params) = FlexNet::build::<f32>(&cfg.model_config()?, cfg.model.seed)?;
    let trainer = Trainer::new(net, cfg.train.clone(), NoiseSchedule::default())?;
    let mut state = TrainState::new(params, cfg.train.seed);
    let start = Instant::now();
    train_until(
        &trainer,
        &mut state,
        &data,
        cfg.data.patch,
        steps,
        |_, _| Ok(()),
    )?;
    Ok(Trained {
        cfg,
        trainer,
        state,
        std,
        secs: start.elapsed().as_secs_f64(),
    })
}

const SR_STEPS: u64 = 3000;
const FC_STEPS: u64 = 1000;

fn end_to_end_sr() -> Result<Check> {
    let t = train_on_corpus(Task::SuperResolution, SR_STEPS)?;
    let predictor = t.trainer.predictor(&t.state, true);
    let inf = Inference {
        predictor: &predictor,
        data: &t.cfg.data,
        sample: &t.cfg.sample,
        schedule: NoiseSchedule::default(),
        norm_std: t.std,
    };
    let held: Vec<Field> = corpus()[2].iter().step_by(4).take(20).cloned().collect();
    let test = residual_samples(&held, &t.cfg.data, Task::SuperResolution)?;
    let (mut model, mut bicubic) = (0.0, 0.0);
    for (i, s) in test.iter().enumerate() {
        let (pred, _) = inf.field(&s.context, i as u64)?;
        let truth = &held[i].values;
        model += rfne(&pred.values, truth)? / test.len() as f64;
        bicubic += rfne(&s.context.base().values, truth)? / test.len() as f64;
    }
    let ratio = model / bicubic;
    Ok((
        test.len() == 20 && t.cfg.sample.n_steps == 2 && ratio <= 0.9 && t.secs <= 1800.0,
        format!(
            "{} steps in {:.0} s; RFNE model {model:.4} vs bicubic {bicubic:.4} (ratio {ratio:.3}) on 20 held-out snapshots, 2 DDIM steps",
            t.state.step, t.secs
        ),
    ))
}

fn end_to_end_fc() -> Result<Check> {
    let t = train_on_corpus(Task::Forecast, FC_STEPS)?;
    let predictor = t.trainer.predictor(&t.state, true);
    let fc = TiledForecaster {
        inference: Inference {
            predictor: &predictor,
            data: &t.cfg.data,
            sample: &t.cfg.sample,
            schedule: NoiseSchedule::default(),
            norm_std: t.std,
        },
        seed: 0,
    };
    let f = &corpus()[2];
    let starts = [5, 25, 45, 65];
    let (mut model, mut persist) = ([0.0; 5], [0.0; 5]);
    for &s0 in &starts {
        let truth = &f[s0 + 1..=s0 + 5];
        let steps = autoregressive_rollout(&fc, &f[s0 - 1], &f[s0], truth)?;
        for k in 0..5 {
            model[k] += steps[k].pcc / starts.len() as f64;
            persist[k] += pcc(&f[s0].values, &truth[k].values)? / starts.len() as f64;
        }
    }
    let beats = (0..5).all(|k| model[k] > persist[k]);
    Ok((
        beats && model[0] > 0.95,
        format!(
            "{} steps in {:.0} s; PCC model {model:.4?} vs persistence {persist:.4?}",
            t.state.step, t.secs
        ),
    ))
}

fn calibration() -> Result<Check> {
    let (m, n, sigma) = (100, 100_000, 0.5f32);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let center: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        center
            .iter()
            .map(|c| c + sigma * rng.sample::<f32, _>(StandardNormal))
            .collect()
    };
    let truth = draw(&mut rng);
    let stack: Vec<Vec<f32>> = (0..m).map(|_| draw(&mut rng)).collect();
    let ens = EnsembleStats::from_members(stack)?;
    let p = pull_stats(&ens, &truth, 1e-6)?;
    let mut exact = true;
    for c in [2.0f32, 0.5] {
        let mut scaled = ens.clone();
        scaled.std.iter_mut().for_each(|s| *s *= c);
        let q = pull_stats(&scaled, &truth, 1e-6)?;
        exact &= q.pull_std * c as f64 == p.pull_std && q.pull_mean * c as f64 == p.pull_mean;
    }
    Ok((
        p.pull_mean.abs() <= 0.02 && (0.95..=1.05).contains(&p.pull_std) && exact,
        format!(
            "m={m}, {n} pixels: pull mean {:.4}, pull std {:.4}; std scaling exact {exact}",
            p.pull_mean, p.pull_std
        ),
    ))
}

fn determinism() -> Result<Check> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    pool.install(|| {
        let mut cfg = RunConfig::default();
        cfg.data = DataConfig {
            patch: 16,
            tile_stride: 8,
            ..DataConfig::default()
        };
        cfg.train.base_lr = 1e-3;
        cfg.train.total_steps = 50;
        let fields: Vec<Field> = corpus()[0][..12].to_vec();
        let samples = residual_samples(&fields, &cfg.data, Task::SuperResolution)?;
        let std = residual_std(&samples)?;
        let data = TrainData {
            sr: normalize_samples(&samples, std)?,
            fc: Vec::new(),
        };
        let model = cfg.model_config()?;
        let text = cfg.to_canonical()?;
        let fresh = || -> Result<(Trainer, TrainState)> {
            let (net, ps) = FlexNet::build::<f32>(&model, 0)?;
            Ok((Trainer::new(net, cfg.train.clone(), NoiseSchedule::default())?, TrainState::new(ps, 0)))
        };
        let bytes = |st: &TrainState| -> Result<Vec<u8>> {
            let mut v = Vec::new();
            write_checkpoint(&mut v, &text, st)?;
            Ok(v)
        };
        let (tr, mut a) = fresh()?;
        train_until(&tr, &mut a, &data, 16, 50, |_, _| Ok(()))?;
        let (_, mut b) = fresh()?;
        train_until(&tr, &mut b, &data, 16, 50, |_, _| Ok(()))?;
        let train_same = bytes(&a)? == bytes(&b)?;

        let (_, mut c) = fresh()?;
        train_until(&tr, &mut c, &data, 16, 20, |_, _| Ok(()))?;
        let (_, mut c) = read_checkpoint(&mut bytes(&c)?.as_slice(), Some(&text))?;
        train_until(&tr, &mut c, &data, 16, 50, |_, _| Ok(()))?;
        let resume_same = bytes(&c)? == bytes(&a)?;

        let full = bytes(&a)?;
        let ckpt_round = bytes(&read_checkpoint(&mut full.as_slice(), Some(&text))?.1)? == full;

        let predictor = tr.predictor(&a, true);
        let sample = SampleConfig::default();
        let inf = Inference {
            predictor: &predictor,
            data: &cfg.data,
            sample: &sample,
            schedule: NoiseSchedule::default(),
            norm_std: std,
        };
        let ctx = &samples[3].context;
        let sample_same = inf.field(ctx, 5)?.0.values == inf.field(ctx, 5)?.0.values;

        let ds = ResidualDataset::from_samples(&samples, &cfg.data, Task::SuperResolution, std)?;
        let dir = tempfile::tempdir()?;
        ds.save(&dir.path().join("a"))?;
        ResidualDataset::load(&dir.path().join("a"))?.save(&dir.path().join("b"))?;
        let mut ds_round = true;
        for f in ["residual.ds", "base.ds", "target.ds", "dataset.json"] {
            ds_round &= std::fs::read(dir.path().join("a").join(f))? == std::fs::read(dir.path().join("b").join(f))?;
        }
        let mut raw = Vec::new();
        Dataset::load(dir.path().join("a/target.ds"))?.write_to(&mut raw)?;
        ds_round &= raw == std::fs::read(dir.path().join("a/target.ds"))?;

        Ok((
            train_same && resume_same && ckpt_round && sample_same && ds_round,
            format!(
                "training repeat {train_same}, resume 20+30 vs 50 {resume_same}, sampling repeat {sample_same}, checkpoint round trip {ckpt_round}, dataset round trip {ds_round}"
            ),
        ))
    })
}

type Criterion = (u32, &'static str, fn() -> Result<Check>, Option<f64>);

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "schedule identities", schedule_identities, Some(1.0)),
        (2, "DDIM oracle exactness", ddim_oracle, Some(5.0)),
        (
            3,
            "velocity/Fisher identity",
            velocity_fisher_identity,
            Some(30.0),
        ),
        (
            4,
            "Hessian identity and gradient bound",
            hessian_identity,
            Some(1.0),
        ),
        (
            5,
            "residual vs raw Fisher divergence",
            fisher_ordering,
            Some(600.0),
        ),
        (6, "simulator physics", simulator_physics, Some(60.0)),
        (7, "backbone checks", backbone_checks, Some(120.0)),
        (8, "end-to-end super-resolution", end_to_end_sr, None),
        (9, "end-to-end forecasting", end_to_end_fc, None),
        (10, "ensemble calibration", calibration, None),
        (11, "determinism and persistence", determinism, None),
    ];
    let only: Option<Vec<u32>> = std::env::var("FLEXDIFF_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    if only
        .as_ref()
        .is_some_and(|o| o.iter().any(|i| [5, 8, 9].contains(i)))
        || only.is_none()
    {
        let t = Instant::now();
        corpus();
        println!(
            "corpus: {} trajectories of {} snapshots at 64x64 in {:.1} s",
            corpus().len(),
            corpus()[0].len(),
            t.elapsed().as_secs_f64()
        );
    }
    println!();
    let mut failed = Vec::new();
    for (id, name, run, budget) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let secs = start.elapsed().as_secs_f64();
        let (mut pass, mut detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
        if let Some(b) = budget {
            if secs > b {
                pass = false;
                detail.push_str(&format!("; over the {b} s budget"));
            }
        }
        println!(
            "[{}] {id:>2} {name}: {detail} ({secs:.1} s)",
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
    println!(
        "{} criteria passed",
        if only.is_some() { "selected" } else { "all" }
    );
}
