//! Every primitive's backward rule against central finite differences on
//! random inputs in [-2, 2].

mod common;

use common::check_leaf_gradients;
use hierflow::tensorad::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Fixed random weights so every output coordinate contributes differently.
fn weighted<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Var<'t> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, &y.shape());
    y.mul(tape.constant(w)).unwrap().sum()
}

fn assert_grad(name: &str, shapes: &[&[usize]], build: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        if let Some((k, i, a, n)) = check_leaf_gradients(&inputs, &build) {
            panic!("{name}: input {k} coord {i}: analytic {a} vs numeric {n} (seed {seed})");
        }
    }
}

#[test]
fn add_sub_mul_with_broadcast() {
    assert_grad("add", &[&[3, 4], &[3, 4]], |t, v| weighted(t, v[0].add(v[1]).unwrap(), 1));
    assert_grad("add-bcast", &[&[3, 4], &[4]], |t, v| weighted(t, v[0].add(v[1]).unwrap(), 1));
    assert_grad("sub-bcast", &[&[4], &[2, 4]], |t, v| weighted(t, v[0].sub(v[1]).unwrap(), 2));
    assert_grad("mul", &[&[2, 5], &[2, 5]], |t, v| weighted(t, v[0].mul(v[1]).unwrap(), 3));
    assert_grad("mul-bcast", &[&[2, 3, 2], &[3, 2]], |t, v| weighted(t, v[0].mul(v[1]).unwrap(), 4));
}

#[test]
fn matmul_and_transpose() {
    assert_grad("matmul", &[&[3, 4], &[4, 2]], |t, v| weighted(t, v[0].matmul(v[1]).unwrap(), 5));
    assert_grad("transpose", &[&[3, 4]], |t, v| weighted(t, v[0].transpose().unwrap(), 6));
}

#[test]
fn elementwise_functions() {
    assert_grad("exp", &[&[2, 3]], |t, v| weighted(t, v[0].exp(), 7));
    assert_grad("tanh", &[&[2, 3]], |t, v| weighted(t, v[0].tanh(), 8));
    assert_grad("gelu", &[&[2, 3]], |t, v| weighted(t, v[0].gelu(), 9));
    assert_grad("affine", &[&[2, 3]], |t, v| weighted(t, v[0].affine(-1.7, 0.3), 10));
    // log on a strictly positive transform of the input
    assert_grad("log", &[&[2, 3]], |t, v| weighted(t, v[0].exp().affine(1.0, 0.5).log().unwrap(), 11));
}

#[test]
fn softmax_and_layer_norm() {
    assert_grad("softmax", &[&[3, 5]], |t, v| weighted(t, v[0].softmax(), 12));
    assert_grad("layer_norm", &[&[3, 5]], |t, v| weighted(t, v[0].layer_norm(1e-5), 13));
}

#[test]
fn structural_ops() {
    assert_grad("concat", &[&[2, 3], &[2, 2]], |t, v| weighted(t, Var::concat(&[v[0], v[1]]).unwrap(), 14));
    assert_grad("select", &[&[2, 4]], |t, v| weighted(t, v[0].select(&[3, 0, 0, 2]).unwrap(), 15));
    assert_grad("slice", &[&[2, 4]], |t, v| weighted(t, v[0].slice(1, 2).unwrap(), 16));
    assert_grad("rows", &[&[4, 3]], |t, v| weighted(t, v[0].rows(1, 2).unwrap(), 17));
    assert_grad("reshape", &[&[2, 6]], |t, v| weighted(t, v[0].reshape(&[3, 4]).unwrap(), 18));
}

#[test]
fn reductions() {
    assert_grad("sum", &[&[2, 3]], |_, v| v[0].square().sum());
    assert_grad("mean", &[&[2, 3]], |_, v| v[0].tanh().mean());
    assert_grad("sum_last", &[&[3, 4]], |t, v| weighted(t, v[0].sum_last(), 19));
}

#[test]
fn three_layer_network_matches_finite_differences() {
    // tanh(tanh(x W1 + b1) W2 + b2) W3, mean-squared against a target
    assert_grad(
        "mlp",
        &[&[5, 3], &[3, 6], &[6], &[6, 4], &[4], &[4, 2], &[5, 2]],
        |_, v| {
            let h1 = v[0].matmul(v[1]).unwrap().add(v[2]).unwrap().tanh();
            let h2 = h1.matmul(v[3]).unwrap().add(v[4]).unwrap().tanh();
            let out = h2.matmul(v[5]).unwrap();
            out.sub(v[6]).unwrap().square().mean()
        },
    );
}

#[test]
fn attention_block_matches_finite_differences() {
    assert_grad("attention", &[&[4, 3], &[4, 3], &[4, 3]], |t, v| {
        let scores = v[0].matmul(v[1].transpose().unwrap()).unwrap().scale(0.5);
        let mut mask = vec![0.0; 16];
        for i in 0..4 {
            for j in i + 1..4 {
                mask[i * 4 + j] = f64::NEG_INFINITY;
            }
        }
        let masked = scores.add(t.constant(Tensor::matrix(4, 4, mask).unwrap())).unwrap();
        weighted(t, masked.softmax().matmul(v[2]).unwrap(), 20)
    });
}

#[test]
fn repeated_backward_accumulates_into_params() {
    use hierflow::tensorad::ParamStore;
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::vector(vec![1.0, -2.0]));
    store.zero_grad();
    for _ in 0..2 {
        let tape = Tape::new();
        let x = tape.param(&store, id);
        let loss = x.square().sum();
        tape.backward(loss).unwrap().accumulate_into(&mut store);
    }
    assert_eq!(store.grad(id).unwrap().data(), &[4.0, -8.0]);
}
