//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use hierflow::tensorad::{ParamStore, Tape, Tensor, Var};

/// Central-difference step.
pub const FD_EPS: f64 = 1e-4;

/// `true` when `analytic` and `numeric` agree within `rel` relative error or
/// `abs_floor` absolute error.
pub fn grad_close(analytic: f64, numeric: f64, rel: f64, abs_floor: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= abs_floor || diff <= rel * analytic.abs().max(numeric.abs())
}

/// Numeric gradient of `f` at `x` by central differences, one coordinate at a time.
pub fn numeric_gradient(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Compares tape gradients of a scalar function of several leaf tensors with
/// central differences. Returns the worst (analytic, numeric) mismatch, if any.
pub fn check_leaf_gradients(
    inputs: &[Tensor],
    build: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
) -> Option<(usize, usize, f64, f64)> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = build(&tape, &vars);
    let grads = tape.backward(loss).unwrap();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        let numeric = numeric_gradient(input.data(), FD_EPS, |x| {
            let tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    if j == k {
                        tape.var(Tensor::new(t.shape(), x.to_vec()).unwrap())
                    } else {
                        tape.var(t.clone())
                    }
                })
                .collect();
            build(&tape, &vars).item()
        });
        for (i, (a, n)) in analytic.data().iter().zip(&numeric).enumerate() {
            if !grad_close(*a, *n, 1e-3, 1e-6) {
                return Some((k, i, *a, *n));
            }
        }
    }
    None
}

/// Checks the stored gradients of every parameter in `store` against central
/// differences of `loss`. Returns failures as (name, index, analytic, numeric)
/// and the number of coordinates checked.
pub fn check_param_gradients(
    store: &mut ParamStore,
    mut loss: impl FnMut(&ParamStore) -> f64,
    mut analytic: impl FnMut(&mut ParamStore),
) -> (Vec<(String, usize, f64, f64)>, usize) {
    analytic(store);
    let ids: Vec<_> = store.ids().collect();
    let mut failures = Vec::new();
    let mut checked = 0;
    for id in ids {
        let g = store.grad(id).expect("gradient populated").clone();
        let n = store.value(id).len();
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + FD_EPS;
            let up = loss(store);
            store.value_mut(id).data_mut()[i] = orig - FD_EPS;
            let down = loss(store);
            store.value_mut(id).data_mut()[i] = orig;
            let num = (up - down) / (2.0 * FD_EPS);
            checked += 1;
            if !grad_close(g.data()[i], num, 1e-3, 1e-6) {
                failures.push((store.name(id).to_string(), i, g.data()[i], num));
            }
        }
    }
    (failures, checked)
}
