mod common;

use std::sync::Arc;

use hierflow::data::{calendar_covariates, generate_synthetic, SyntheticSpec};
use hierflow::flow::FlowConfig;
use hierflow::nn::Ctx;
use hierflow::pipeline::{nll_loss, HierFlowModel, ModelConfig, ScaledPanel, Scaler, WindowBatch};
use hierflow::tensorad::{ParamStore, Tape, Tensor};
use hierflow::transformer::AttentionConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mini(d_model: usize, dropout: f64) -> ModelConfig {
    ModelConfig {
        attention: AttentionConfig {
            d_model,
            n_heads: 2,
            d_ff: 2 * d_model,
            n_enc_layers: 2,
            n_dec_layers: 2,
            dropout,
            ..Default::default()
        },
        flow: FlowConfig {
            n_layers: 4,
            hidden: 8,
            ..Default::default()
        },
    }
}

fn scaled_panel(length: usize, seed: u64) -> (ScaledPanel, Arc<hierflow::HierarchyTree>) {
    let data = generate_synthetic(&SyntheticSpec {
        length,
        seed,
        ..Default::default()
    })
    .unwrap();
    let scaler = Scaler::fit(&data.panel.values).unwrap();
    let cov = calendar_covariates(0, length, 12, length as f64);
    (
        ScaledPanel::new(&data.panel, &cov, &scaler).unwrap(),
        Arc::clone(&data.panel.hierarchy),
    )
}

fn random_inputs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(&[rows, cols], data).unwrap()
}

fn conditions(model: &HierFlowModel, context: &Tensor, inputs: &Tensor) -> Tensor {
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &model.params);
    model.conditions(&ctx, context, inputs).unwrap().value()
}

#[test]
fn decoder_is_causal() {
    let (_, tree) = scaled_panel(32, 0);
    let model = HierFlowModel::new(ModelConfig::default(), tree, 3, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (len, width) = (8, 10);
    let context = random_inputs(&mut rng, 12, width);
    let inputs = random_inputs(&mut rng, len, width);
    let base = conditions(&model, &context, &inputs);
    // input row k carries the observation of step k - 1
    for s in 0..len - 1 {
        let mut perturbed = inputs.clone();
        for v in &mut perturbed.data_mut()[(s + 1) * width..(s + 2) * width] {
            *v += rng.random_range(0.5..3.0);
        }
        let h = conditions(&model, &context, &perturbed);
        for t in 0..=s {
            let diff = h.row(t).iter().zip(base.row(t)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-12, "perturbing step {s} moved h_{t} by {diff:e}");
        }
        let moved = h.row(s + 1).iter().zip(base.row(s + 1)).any(|(a, b)| a != b);
        assert!(moved, "h_{} ignores its own input", s + 1);
    }
}

#[test]
fn teacher_forcing_matches_step_by_step_decoding() {
    let (_, tree) = scaled_panel(32, 0);
    let model = HierFlowModel::new(ModelConfig::default(), tree, 3, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let context = random_inputs(&mut rng, 10, 10);
    let inputs = random_inputs(&mut rng, 6, 10);
    let full = conditions(&model, &context, &inputs);
    assert_eq!(full.shape(), &[6, 32]);

    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &model.params);
    let memory = model.transformer.encode(&ctx, &context).unwrap().value();
    for k in 0..6 {
        let prefix = Tensor::new(&[k + 1, 10], inputs.data()[..(k + 1) * 10].to_vec()).unwrap();
        let h = model
            .transformer
            .decode(&ctx, &prefix, tape.constant(memory.clone()))
            .unwrap()
            .value();
        let diff = h.row(k).iter().zip(full.row(k)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-12, "step {k}: {diff:e}");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let (data, tree) = scaled_panel(40, 1);
    let model = HierFlowModel::new(ModelConfig::default(), tree, 3, 6).unwrap();
    let batch = WindowBatch::new(data.len(), 8, 8, vec![0, 5, 11, 20]).unwrap();
    let tape = Tape::new();
    let grads = {
        let ctx = Ctx::eval(&tape, &model.params);
        tape.backward(nll_loss(&model, &ctx, &data, &batch).unwrap()).unwrap()
    };
    let mut store = model.params.clone();
    store.clear_grad();
    grads.accumulate_into(&mut store);
    for id in store.ids() {
        let g = store.grad(id).expect("gradient");
        assert!(
            g.data().iter().any(|v| *v != 0.0),
            "parameter '{}' has an all-zero gradient",
            store.name(id)
        );
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let (data, tree) = scaled_panel(40, 2);
    let model = HierFlowModel::new(mini(8, 0.0), tree, 3, 7).unwrap();
    let batch = WindowBatch::new(data.len(), 6, 4, vec![0, 13]).unwrap();
    let loss = |store: &ParamStore| {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, store);
        nll_loss(&model, &ctx, &data, &batch).unwrap().item()
    };
    let mut store = model.params.clone();
    let (failures, checked) = common::check_param_gradients(&mut store, loss, |store| {
        let tape = Tape::new();
        let grads = {
            let ctx = Ctx::eval(&tape, store);
            tape.backward(nll_loss(&model, &ctx, &data, &batch).unwrap()).unwrap()
        };
        store.clear_grad();
        grads.accumulate_into(store);
    });
    assert_eq!(checked, model.params.num_scalars());
    assert!(failures.is_empty(), "{} of {checked} mismatches, first {:?}", failures.len(), &failures[..failures.len().min(5)]);
}

#[test]
fn loss_is_repeatable_without_dropout() {
    let (data, tree) = scaled_panel(40, 3);
    let model = HierFlowModel::new(mini(8, 0.0), tree, 3, 8).unwrap();
    let batch = WindowBatch::new(data.len(), 8, 8, vec![2, 9]).unwrap();
    let eval = || {
        let tape = Tape::new();
        let ctx = Ctx::train(&tape, &model.params, 0.0, ChaCha8Rng::seed_from_u64(0));
        nll_loss(&model, &ctx, &data, &batch).unwrap().item()
    };
    assert_eq!(eval(), eval());
}
