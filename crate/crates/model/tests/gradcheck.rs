use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flexdiff_core::{ConditioningContext, Field};
use flexdiff_model::{FlexConfig, FlexNet, ForwardOptions, Graph, ParamStore, Tensor};

fn field(n: usize, rng: &mut ChaCha8Rng) -> Field {
    Field::new(
        n,
        n,
        (0..n * n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

/// Mean squared velocity error on a fixed two-item batch; dropout masks come from a fixed seed.
fn loss(
    net: &FlexNet,
    ps: &ParamStore<f64>,
    z: &Tensor<f64>,
    target: &[f64],
    ctxs: &[&ConditioningContext],
) -> (f64, Graph<f64>, flexdiff_model::Var) {
    let mut g = Graph::<f64>::training(17);
    let y = net
        .forward(
            &mut g,
            ps,
            &[0.3, 0.8],
            z.clone(),
            ctxs,
            &ForwardOptions::default(),
        )
        .unwrap();
    let tv = g.constant(Tensor::new(g.shape(y).to_vec(), target.to_vec()));
    let diff = g.sub(y, tv);
    let sq = g.square(diff);
    let l = g.mean_all(sq);
    (g.value(l).data()[0], g, l)
}

#[test]
fn analytic_gradients_match_central_differences() {
    let n = 16;
    let cfg = FlexConfig::tiny(n);
    let (net, mut ps) = FlexNet::build::<f64>(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = ConditioningContext::super_resolution(field(n, &mut rng), 2000.0, 4);
    let b = ConditioningContext::forecast(field(n, &mut rng), field(n, &mut rng), 2000.0, 2);
    let z = Tensor::new(
        vec![2, 1, n, n],
        (0..2 * n * n)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    );
    let target: Vec<f64> = (0..2 * n * n)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let ctxs = [&a, &b];

    let (_, g, l) = loss(&net, &ps, &z, &target, &ctxs);
    let grads = g.backward(l);
    let h = 1e-6;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < 20 {
        let id = rng.random_range(0..ps.len());
        let k = rng.random_range(0..ps.get(id).numel());
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[k]);
        if analytic.abs() < 1e-7 {
            continue;
        }
        let orig = ps.get(id).data()[k];
        ps.get_mut(id).data_mut()[k] = orig + h;
        let (lp, ..) = loss(&net, &ps, &z, &target, &ctxs);
        ps.get_mut(id).data_mut()[k] = orig - h;
        let (lm, ..) = loss(&net, &ps, &z, &target, &ctxs);
        ps.get_mut(id).data_mut()[k] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        worst = worst.max(rel);
        assert!(
            rel < 1e-3,
            "{} [{k}]: analytic {analytic:e} numeric {numeric:e}",
            ps.name(id)
        );
        checked += 1;
    }
    println!("worst relative error {worst:e}");
}
