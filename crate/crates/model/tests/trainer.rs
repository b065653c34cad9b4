use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flexdiff_core::dataio::ResidualSample;
use flexdiff_core::{ConditioningContext, Error, Field, NoiseSchedule, Task};
use flexdiff_model::optim::{ema_update, OptimizerKind};
use flexdiff_model::trainer::NoisedItem;
use flexdiff_model::{FlexConfig, FlexNet, GradMode, LossKind, TrainConfig, TrainState, Trainer};

const N: usize = 16;

fn smooth_field(rng: &mut ChaCha8Rng) -> Field {
    let modes: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(1..3) as f64,
                rng.random_range(0..3) as f64,
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..6.3),
            )
        })
        .collect();
    let h = 2.0 * std::f64::consts::PI / N as f64;
    Field::from_fn(N, N, |x, y| {
        modes
            .iter()
            .map(|(kx, ky, a, p)| a * (kx * x as f64 * h + ky * y as f64 * h + p).sin())
            .sum()
    })
    .unwrap()
}

/// SR items: residual = 0.8 * snapshot. FC items: residual = current - previous.
fn toy(task: Task, count: usize, seed: u64) -> Vec<ResidualSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| match task {
            Task::SuperResolution => {
                let u = smooth_field(&mut rng);
                let r = u
                    .with_values(u.values.iter().map(|v| 0.8 * v).collect())
                    .unwrap();
                ResidualSample {
                    residual: r,
                    context: ConditioningContext::super_resolution(u, 1000.0, 4),
                    norm_mean: 0.0,
                    norm_std: 1.0,
                }
            }
            Task::Forecast => {
                let a = smooth_field(&mut rng);
                let b = smooth_field(&mut rng);
                let r = b
                    .with_values(b.values.iter().zip(&a.values).map(|(x, y)| x - y).collect())
                    .unwrap();
                ResidualSample {
                    residual: r,
                    context: ConditioningContext::forecast(a, b, 1000.0, 1),
                    norm_mean: 0.0,
                    norm_std: 1.0,
                }
            }
        })
        .collect()
}

fn trainer(cfg: TrainConfig, model: FlexConfig, seed: u64) -> (Trainer, TrainState) {
    let (net, ps) = FlexNet::build::<f32>(&model, seed).unwrap();
    let state = TrainState::new(ps, cfg.seed);
    (
        Trainer::new(net, cfg, NoiseSchedule::default()).unwrap(),
        state,
    )
}

fn smoke_cfg(loss: LossKind, steps: u64) -> TrainConfig {
    TrainConfig {
        loss,
        base_lr: 1e-3,
        total_steps: steps,
        batch_size: 8,
        ema_decay: 0.99,
        ..TrainConfig::default()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn zero_output_network_has_closed_form_l2_loss() {
    let cfg = TrainConfig {
        loss: LossKind::L2,
        ..TrainConfig::default()
    };
    let (tr, mut st) = trainer(cfg, FlexConfig::tiny(N), 1);
    for id in tr.net.output_ids() {
        st.params
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let data = toy(Task::SuperResolution, 16, 3);
    let batch: Vec<&ResidualSample> = data.iter().collect();
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut diffs = Vec::new();
    let mut expected_all = Vec::new();
    for k in 0..40 {
        let items = tr.noise_items(&mut rng, &batch);
        let eval = tr
            .loss_and_grads(&st.params, std::slice::from_ref(&items), k)
            .unwrap();
        for (item, sample) in eval.items.iter().zip(&data) {
            let (a, sg) = s.alpha_sigma(item.t).unwrap();
            let d = sample.residual.len() as f64;
            let rr: f64 = sample
                .residual
                .values
                .iter()
                .map(|v| (*v as f64).powi(2))
                .sum();
            let expected = (a * a * d + sg * sg * rr) / d;
            diffs.push(item.loss - expected);
            expected_all.push(expected);
        }
    }
    let m = mean(&diffs);
    let sd = (diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt();
    let se = sd / (diffs.len() as f64).sqrt();
    assert!(
        m.abs() < 4.0 * se,
        "mean deviation {m} (se {se}) against {}",
        mean(&expected_all)
    );
}

#[test]
fn zero_learning_rate_step_only_moves_the_ema() {
    let cfg = TrainConfig {
        total_steps: 5,
        ema_decay: 0.9,
        ..TrainConfig::default()
    };
    let (tr, mut st) = trainer(cfg, FlexConfig::tiny(N), 2);
    st.step = 5;
    for id in 0..st.ema.len() {
        st.ema
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let before = st.params.clone();
    let data = toy(Task::SuperResolution, 4, 0);
    let batch: Vec<&ResidualSample> = data.iter().collect();
    let r = tr.train_step(&mut st, &batch).unwrap();
    assert_eq!(r.lr, 0.0);
    for id in 0..before.len() {
        assert_eq!(st.params.get(id), before.get(id));
        for (e, p) in st.ema.get(id).data().iter().zip(before.get(id).data()) {
            assert!((e - 0.1 * p).abs() <= 1e-7 * p.abs().max(1.0));
        }
    }
}

#[test]
fn two_step_multitask_with_zero_lr_keeps_params() {
    let cfg = TrainConfig {
        total_steps: 1,
        grad_mode: GradMode::TwoSteps,
        ..TrainConfig::default()
    };
    let (tr, mut st) = trainer(cfg, FlexConfig::tiny(N), 2);
    st.step = 1;
    let before = st.params.clone();
    let (a, b) = (toy(Task::SuperResolution, 2, 0), toy(Task::Forecast, 2, 1));
    let reports = tr
        .train_step_multitask(
            &mut st,
            &a.iter().collect::<Vec<_>>(),
            &b.iter().collect::<Vec<_>>(),
        )
        .unwrap_or_else(|e| panic!("{e}"));
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r.lr.abs() < 1e-20));
    for id in 0..before.len() {
        let d = st.params.get(id).max_abs_diff(before.get(id));
        assert!(d < 1e-12, "{}", st.params.name(id));
    }
    assert_eq!(st.step, 3);
}

#[test]
fn summed_gradient_of_a_duplicated_batch_is_doubled() {
    let mut model = FlexConfig::tiny(N);
    model.dropout = 0.0;
    let (tr, st) = trainer(TrainConfig::default(), model, 4);
    let data = toy(Task::SuperResolution, 3, 5);
    let batch: Vec<&ResidualSample> = data.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let items: Vec<NoisedItem> = tr.noise_items(&mut rng, &batch);
    let one = tr
        .loss_and_grads(&st.params, std::slice::from_ref(&items), 0)
        .unwrap();
    let two = tr
        .loss_and_grads(&st.params, &[items.clone(), items], 0)
        .unwrap();
    assert!((two.total - 2.0 * one.total).abs() < 1e-6 * one.total.abs());
    for (id, g1) in &one.grads {
        let g2 = &two.grads[id];
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert!(
                (b - 2.0 * a).abs() <= 1e-6 * (1.0 + a.abs()),
                "{}",
                st.params.name(*id)
            );
        }
    }
}

#[test]
fn ema_follows_the_scalar_recurrence() {
    let cfg = TrainConfig {
        base_lr: 1e-3,
        ema_decay: 0.95,
        total_steps: 100,
        ..TrainConfig::default()
    };
    let (tr, mut st) = trainer(cfg, FlexConfig::tiny(N), 5);
    let data = toy(Task::SuperResolution, 4, 1);
    let batch: Vec<&ResidualSample> = data.iter().collect();
    let (id, k) = (3usize, 2usize);
    let mut ema_ref = st.ema.get(id).data()[k] as f64;
    for _ in 0..12 {
        tr.train_step(&mut st, &batch).unwrap();
        ema_ref = 0.95 * ema_ref + 0.05 * st.params.get(id).data()[k] as f64;
    }
    assert!((st.ema.get(id).data()[k] as f64 - ema_ref).abs() < 1e-6);

    let mut e = st.params.zeros_like();
    ema_update(&mut e, &st.params, 0.5);
    assert!((e.get(id).data()[k] - 0.5 * st.params.get(id).data()[k]).abs() < 1e-7);
}

#[test]
fn sampled_times_are_uniform() {
    let (tr, _) = trainer(TrainConfig::default(), FlexConfig::tiny(N), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 100_000;
    let mut ts: Vec<f64> = (0..n).map(|_| tr.sample_time(&mut rng)).collect();
    ts.sort_by(f64::total_cmp);
    let (lo, hi) = (tr.schedule.t_min, tr.schedule.t_max);
    let ks = ts
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let f = (t - lo) / (hi - lo);
            (f - i as f64 / n as f64)
                .abs()
                .max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.01, "KS {ks}");
    assert!(ts[0] >= lo && ts[n - 1] <= hi);
}

#[test]
fn non_finite_loss_is_reported_and_state_kept() {
    let (tr, mut st) = trainer(TrainConfig::default(), FlexConfig::tiny(N), 0);
    let mut data = toy(Task::SuperResolution, 2, 0);
    data[1].residual.values[5] = f32::NAN;
    let before = st.clone();
    let err = tr
        .train_step(&mut st, &data.iter().collect::<Vec<_>>())
        .unwrap_err();
    assert!(matches!(err, Error::Instability { step: 0, .. }), "{err}");
    assert_eq!(st.step, 0);
    assert_eq!(st.rng, before.rng);
    assert!(st
        .params
        .tensors()
        .iter()
        .zip(before.params.tensors())
        .all(|(a, b)| a == b));
}

fn smoke(loss: LossKind, steps: usize) -> (f64, f64) {
    let (tr, mut st) = trainer(smoke_cfg(loss, steps as u64), FlexConfig::tiny(N), 7);
    let data = toy(Task::SuperResolution, 200, 11);
    let mut losses = Vec::new();
    for _ in 0..steps {
        let idx = tr.draw_indices(&mut st, data.len());
        let batch: Vec<&ResidualSample> = idx.iter().map(|&i| &data[i]).collect();
        losses.push(tr.train_step(&mut st, &batch).unwrap().loss);
    }
    (mean(&losses[..25]), mean(&losses[steps - 25..]))
}

#[test]
fn smoke_training_halves_the_loss() {
    for loss in [LossKind::L1, LossKind::L2] {
        let (first, last) = smoke(loss, 500);
        println!("{loss:?}: {first:.4} -> {last:.4}");
        assert!(last <= 0.5 * first, "{loss:?}: {first} -> {last}");
    }
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let (tr, mut st) = trainer(smoke_cfg(LossKind::L1, 10), FlexConfig::tiny(N), 3);
        let data = toy(Task::Forecast, 20, 2);
        (0..10)
            .map(|_| {
                let idx = tr.draw_indices(&mut st, data.len());
                let b: Vec<&ResidualSample> = idx.iter().map(|&i| &data[i]).collect();
                tr.train_step(&mut st, &b).unwrap().loss
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn multitask_smoke_training_reduces_both_losses() {
    for mode in [GradMode::TwoSteps, GradMode::Summed] {
        let cfg = TrainConfig {
            grad_mode: mode,
            multitask: true,
            batch_size: 4,
            ..smoke_cfg(LossKind::L1, 1000)
        };
        let (tr, mut st) = trainer(cfg, FlexConfig::tiny(N), 8);
        let (sr, fc) = (
            toy(Task::SuperResolution, 200, 1),
            toy(Task::Forecast, 200, 2),
        );
        let mut probe_rng = ChaCha8Rng::seed_from_u64(99);
        let probe_sr: Vec<&ResidualSample> = sr[..16].iter().collect();
        let probe_fc: Vec<&ResidualSample> = fc[..16].iter().collect();
        let probe = (
            tr.noise_items(&mut probe_rng, &probe_sr),
            tr.noise_items(&mut probe_rng, &probe_fc),
        );
        let eval = |st: &TrainState| {
            let a = tr
                .loss_and_grads(&st.params, std::slice::from_ref(&probe.0), 0)
                .unwrap()
                .total;
            let b = tr
                .loss_and_grads(&st.params, std::slice::from_ref(&probe.1), 0)
                .unwrap()
                .total;
            (a, b)
        };
        let before = eval(&st);
        let steps = if mode == GradMode::TwoSteps {
            500
        } else {
            1000
        };
        for _ in 0..steps {
            let i = tr.draw_indices(&mut st, 200);
            let j = tr.draw_indices(&mut st, 200);
            let a: Vec<&ResidualSample> = i.iter().map(|&k| &sr[k]).collect();
            let b: Vec<&ResidualSample> = j.iter().map(|&k| &fc[k]).collect();
            tr.train_step_multitask(&mut st, &a, &b).unwrap();
        }
        assert_eq!(st.step, 1000);
        let after = eval(&st);
        println!(
            "{mode:?}: sr {:.4} -> {:.4}, fc {:.4} -> {:.4}",
            before.0, after.0, before.1, after.1
        );
        assert!(
            after.0 <= 0.6 * before.0 && after.1 <= 0.6 * before.1,
            "{mode:?}: {before:?} -> {after:?}"
        );
    }
}

#[test]
fn adamw_also_trains() {
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Adamw,
        ..smoke_cfg(LossKind::L2, 100)
    };
    let (tr, mut st) = trainer(cfg, FlexConfig::tiny(N), 1);
    let data = toy(Task::SuperResolution, 50, 4);
    let batch: Vec<&ResidualSample> = data[..8].iter().collect();
    let first = tr.train_step(&mut st, &batch).unwrap().loss;
    for _ in 0..60 {
        tr.train_step(&mut st, &batch).unwrap();
    }
    assert!(st.loss_stats.last < first);
    assert!(st.is_finite());
}
