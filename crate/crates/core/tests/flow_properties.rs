mod common;

use hierflow::flow::{FlowConfig, FlowStack, LN_2PI};
use hierflow::nalgebra::DMatrix;
use hierflow::nn::Ctx;
use hierflow::tensorad::{Adam, AdamConfig, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(&[rows, cols], data).unwrap()
}

/// Flow with every parameter jittered so the couplings are far from identity.
fn random_flow(dim: usize, cond: usize, seed: u64, jitter: f64) -> (FlowStack, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = FlowConfig {
        hidden: 16,
        ..Default::default()
    };
    let flow = FlowStack::new(cfg, dim, cond, &mut store, &mut rng).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with("log_bound") {
            continue;
        }
        for v in store.value_mut(id).data_mut() {
            *v += jitter * rng.sample::<f64, _>(StandardNormal);
        }
    }
    (flow, store)
}

fn identity_flow(dim: usize, cond: usize) -> (FlowStack, ParamStore) {
    let (flow, mut store) = random_flow(dim, cond, 0, 0.0);
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).contains(".out.") {
            store.value_mut(id).data_mut().fill(0.0);
        }
    }
    (flow, store)
}

#[test]
fn round_trip_over_random_inputs() {
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let (flow, store) = random_flow(5, 3, seed, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let b = random_tensor(&mut rng, 100, 5, 3.0);
        let h = random_tensor(&mut rng, 100, 3, 1.0);
        let (z, _) = flow.forward_values(&store, &b, &h).unwrap();
        let back = flow.inverse_values(&store, &z, &h).unwrap();
        worst = worst.max(back.max_abs_diff(&b));

        let z = random_tensor(&mut rng, 100, 5, 1.0);
        let y = flow.inverse_values(&store, &z, &h).unwrap();
        let (z2, _) = flow.forward_values(&store, &y, &h).unwrap();
        worst = worst.max(z2.max_abs_diff(&z));
    }
    assert!(worst < 1e-9, "worst round-trip error {worst:e}");
}

fn numeric_logdet(flow: &FlowStack, store: &ParamStore, b: &[f64], h: &Tensor) -> f64 {
    let m = b.len();
    let eps = 1e-5;
    let mut jac = DMatrix::zeros(m, m);
    for j in 0..m {
        let mut up = b.to_vec();
        let mut down = b.to_vec();
        up[j] += eps;
        down[j] -= eps;
        let (zu, _) = flow.forward_values(store, &Tensor::new(&[1, m], up).unwrap(), h).unwrap();
        let (zd, _) = flow.forward_values(store, &Tensor::new(&[1, m], down).unwrap(), h).unwrap();
        for i in 0..m {
            jac[(i, j)] = (zu.data()[i] - zd.data()[i]) / (2.0 * eps);
        }
    }
    jac.determinant().abs().ln()
}

#[test]
fn logdet_matches_numeric_jacobian() {
    for m in [2, 4, 6] {
        for seed in 0..5 {
            let (flow, store) = random_flow(m, 2, seed, 0.4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
            let b = random_tensor(&mut rng, 1, m, 1.5);
            let h = random_tensor(&mut rng, 1, 2, 1.0);
            let (_, ld) = flow.forward_values(&store, &b, &h).unwrap();
            let numeric = numeric_logdet(&flow, &store, b.data(), &h);
            assert!(
                (ld[0] - numeric).abs() <= 1e-4 * ld[0].abs() + 1e-8,
                "m={m} seed={seed}: analytic {} numeric {numeric}",
                ld[0]
            );
        }
    }
}

#[test]
fn two_dimensional_density_integrates_to_one() {
    for seed in 0..3 {
        // mild jitter keeps the mass inside the grid
        let (flow, store) = random_flow(2, 2, seed, 0.1);
        let h = Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap();
        let steps = 241;
        let dx = 12.0 / (steps - 1) as f64;
        let mut pts = Vec::with_capacity(steps * steps * 2);
        for i in 0..steps {
            for j in 0..steps {
                pts.push(-6.0 + i as f64 * dx);
                pts.push(-6.0 + j as f64 * dx);
            }
        }
        let count = steps * steps;
        let b = Tensor::new(&[count, 2], pts).unwrap();
        let hs = Tensor::new(&[count, 2], h.data().repeat(count)).unwrap();
        let lp = flow.log_prob_values(&store, &b, &hs).unwrap();
        let mass: f64 = lp.iter().map(|v| v.exp()).sum::<f64>() * dx * dx;
        let gap = lp
            .iter()
            .zip(b.data().chunks(2))
            .map(|(v, x)| (v + 0.5 * (x[0] * x[0] + x[1] * x[1]) + LN_2PI).abs())
            .fold(0.0, f64::max);
        assert!(gap > 0.1, "seed {seed}: flow is too close to the identity");
        assert!((mass - 1.0).abs() < 0.02, "seed {seed}: mass {mass}");
    }
}

/// Asymptotic Kolmogorov distribution tail with the Stephens correction.
fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

#[test]
fn identity_flow_samples_are_standard_normal() {
    let (flow, store) = identity_flow(3, 2);
    let samples = flow.sample(&store, &[0.5, -1.0], 10_000, 17).unwrap();
    let normal = Normal::new(0.0, 1.0).unwrap();
    for j in 0..3 {
        let mut col: Vec<f64> = (0..10_000).map(|i| samples.data()[i * 3 + j]).collect();
        col.sort_by(f64::total_cmp);
        let n = col.len() as f64;
        let d = col
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = normal.cdf(x);
                (f - i as f64 / n).abs().max((i as f64 + 1.0) / n - f)
            })
            .fold(0.0, f64::max);
        let p = ks_p_value(d, col.len());
        assert!(p > 0.01, "coordinate {j}: D = {d}, p = {p}");
    }
}

#[test]
fn identity_flow_log_prob_is_gaussian_anywhere() {
    let (flow, store) = identity_flow(4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = random_tensor(&mut rng, 20, 4, 2.0);
    let h = random_tensor(&mut rng, 20, 1, 1.0);
    let lp = flow.log_prob_values(&store, &b, &h).unwrap();
    for (i, v) in lp.iter().enumerate() {
        let sq: f64 = b.row(i).iter().map(|x| x * x).sum();
        assert!((v - (-0.5 * sq - 2.0 * LN_2PI)).abs() < 1e-12);
    }
}

/// Fits a flow by full-batch maximum likelihood.
fn fit(flow: &FlowStack, store: &mut ParamStore, b: &Tensor, h: &Tensor, steps: usize, lr: f64) {
    let mut adam = Adam::new(AdamConfig {
        lr,
        ..Default::default()
    });
    for _ in 0..steps {
        let tape = Tape::new();
        let grads = {
            let ctx = Ctx::eval(&tape, store);
            let lp = flow.log_prob(&ctx, tape.constant(b.clone()), tape.constant(h.clone())).unwrap();
            tape.backward(lp.mean().neg()).unwrap()
        };
        store.clear_grad();
        grads.accumulate_into(store);
        adam.step(store).unwrap();
    }
}

#[test]
fn trained_flow_recovers_a_correlated_gaussian() {
    let mu = [1.0, -2.0];
    // Σ = L Lᵀ with L = [[1, 0], [0.6, 0.5]]
    let l = [[1.0, 0.0], [0.6, 0.5]];
    let log_det_sigma = 2.0 * (l[0][0] * l[1][1] as f64).ln();
    let entropy = 1.0 + LN_2PI + 0.5 * log_det_sigma;
    let draw = |rng: &mut ChaCha8Rng, count: usize| {
        let mut data = Vec::with_capacity(2 * count);
        for _ in 0..count {
            let e: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            data.push(mu[0] + l[0][0] * e[0]);
            data.push(mu[1] + l[1][0] * e[0] + l[1][1] * e[1]);
        }
        Tensor::new(&[count, 2], data).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let train = draw(&mut rng, 2000);
    let test = draw(&mut rng, 5000);

    let mut store = ParamStore::new();
    let cfg = FlowConfig {
        hidden: 16,
        ..Default::default()
    };
    let flow = FlowStack::new(cfg, 2, 1, &mut store, &mut rng).unwrap();
    let h_train = Tensor::zeros(&[2000, 1]);
    fit(&flow, &mut store, &train, &h_train, 1500, 1e-2);

    let lp = flow.log_prob_values(&store, &test, &Tensor::zeros(&[5000, 1])).unwrap();
    let avg = lp.iter().sum::<f64>() / lp.len() as f64;
    assert!((avg + entropy).abs() < 0.1, "average log_prob {avg}, entropy bound {}", -entropy);
}

#[test]
fn conditioning_changes_the_density() {
    // b ~ N(2h, I) with h in {-1, 1}
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let count = 1000;
    let mut b = Vec::new();
    let mut h = Vec::new();
    for i in 0..count {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        h.push(sign);
        for _ in 0..2 {
            b.push(2.0 * sign + rng.sample::<f64, _>(StandardNormal));
        }
    }
    let b = Tensor::new(&[count, 2], b).unwrap();
    let h = Tensor::new(&[count, 1], h).unwrap();
    let mut store = ParamStore::new();
    let cfg = FlowConfig {
        hidden: 16,
        ..Default::default()
    };
    let flow = FlowStack::new(cfg, 2, 1, &mut store, &mut rng).unwrap();
    fit(&flow, &mut store, &b, &h, 400, 1e-2);

    let point = Tensor::new(&[1, 2], vec![2.0, 2.0]).unwrap();
    let near = flow.log_prob_values(&store, &point, &Tensor::full(&[1, 1], 1.0)).unwrap()[0];
    let far = flow.log_prob_values(&store, &point, &Tensor::full(&[1, 1], -1.0)).unwrap()[0];
    assert!(near > far + 2.0, "log p(b | h=1) = {near}, log p(b | h=-1) = {far}");
}
