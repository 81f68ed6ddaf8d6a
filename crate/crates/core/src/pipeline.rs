//! Training and Monte Carlo inference for the transformer + flow model.
//!
//! Every series is standardized with statistics from the training range. The
//! decoder sees all `n` scaled series plus covariates from the previous step;
//! the flow models the scaled bottom-level vector. Forecast paths are built by
//! sampling bottom vectors, undoing the scaling, aggregating with `S` and
//! feeding each path's own values back into the decoder.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use log::{debug, info, warn};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{calendar_covariates, CovariateSource};
use crate::error::{Error, Result};
use crate::flow::{standard_normal, FlowConfig, FlowStack};
use crate::hierarchy::{HierarchyTree, PanelSeries};
use crate::nn::Ctx;
use crate::reconcile::{
    seasonal_naive, seasonal_naive_residuals, Baseline, ForecastEnsemble, LinearReconciler, SamplePaths,
};
use crate::tensorad::{Adam, AdamConfig, ParamRecord, ParamStore, Tape, Tensor, Var};
use crate::transformer::{AttentionConfig, Transformer};

/// Per-series standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Fits column means and population standard deviations. Constant
    /// columns get `std = 1`.
    pub fn fit(values: &DMatrix<f64>) -> Result<Self> {
        let t = values.nrows();
        if t == 0 {
            return Err(Error::Data("cannot fit a scaler on zero rows".into()));
        }
        let mut mean = Vec::with_capacity(values.ncols());
        let mut std = Vec::with_capacity(values.ncols());
        for (j, col) in values.column_iter().enumerate() {
            let mu = col.iter().sum::<f64>() / t as f64;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / t as f64;
            let mut sd = var.sqrt();
            if !(sd > 1e-12 * (1.0 + mu.abs())) {
                warn!("series {j} is constant over the training range; using std = 1");
                sd = 1.0;
            }
            mean.push(mu);
            std.push(sd);
        }
        Ok(Self { mean, std })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, values: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(values.nrows(), values.ncols(), |i, j| (values[(i, j)] - self.mean[j]) / self.std[j])
    }

    pub fn invert(&self, values: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(values.nrows(), values.ncols(), |i, j| values[(i, j)] * self.std[j] + self.mean[j])
    }

    /// Scales a row whose columns start at column `offset` of the fitted data.
    fn apply_row(&self, row: &[f64], offset: usize) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, v)| (v - self.mean[offset + j]) / self.std[offset + j])
            .collect()
    }

    fn invert_row(&self, row: &[f64], offset: usize) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, v)| v * self.std[offset + j] + self.mean[offset + j])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub context_length: usize,
    pub prediction_length: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub sample_count: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            context_length: 8,
            prediction_length: 8,
            epochs: 40,
            batch_size: 16,
            adam: AdamConfig::default(),
            sample_count: 200,
            seed: 0,
            patience: 10,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_length == 0 || self.prediction_length == 0 || self.sample_count == 0 {
            return Err(Error::Config(
                "context_length, prediction_length and sample_count must be at least 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config("Adam needs lr > 0, betas in [0, 1) and eps > 0".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub attention: AttentionConfig,
    pub flow: FlowConfig,
}

/// Transformer and flow sharing one parameter store.
#[derive(Debug, Clone)]
pub struct HierFlowModel {
    pub config: ModelConfig,
    pub transformer: Transformer,
    pub flow: FlowStack,
    pub params: ParamStore,
    pub tree: Arc<HierarchyTree>,
}

impl HierFlowModel {
    pub fn new(config: ModelConfig, tree: Arc<HierarchyTree>, n_covariates: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let transformer = Transformer::new(config.attention.clone(), tree.n(), n_covariates, &mut params, &mut rng)?;
        let flow = FlowStack::new(
            config.flow.clone(),
            tree.m(),
            transformer.condition_dim(),
            &mut params,
            &mut rng,
        )?;
        Ok(Self {
            config,
            transformer,
            flow,
            params,
            tree,
        })
    }

    pub fn n_covariates(&self) -> usize {
        self.transformer.n_covariates()
    }

    /// Decoder conditions `[L, d_model]` for teacher-forced decoder inputs.
    pub fn conditions<'t>(&self, ctx: &Ctx<'t>, context: &Tensor, decoder_inputs: &Tensor) -> Result<Var<'t>> {
        let memory = self.transformer.encode(ctx, context)?;
        self.transformer.decode(ctx, decoder_inputs, memory)
    }
}

/// A panel after scaling, stored as rows `concat(y_t, x_t)`.
#[derive(Debug, Clone)]
pub struct ScaledPanel {
    pub rows: Vec<Vec<f64>>,
    pub n: usize,
    pub r: usize,
}

impl ScaledPanel {
    pub fn new(panel: &PanelSeries, covariates: &DMatrix<f64>, scaler: &Scaler) -> Result<Self> {
        let n = panel.hierarchy.n();
        if scaler.width() != n {
            return Err(Error::dim("scaler width", n, scaler.width()));
        }
        if covariates.nrows() != panel.len() {
            return Err(Error::dim("covariate rows", panel.len(), covariates.nrows()));
        }
        let rows = (0..panel.len())
            .map(|t| {
                let mut row = scaler.apply_row(&panel.row(t), 0);
                row.extend(covariates.row(t).iter());
                row
            })
            .collect();
        Ok(Self {
            rows,
            n,
            r: panel.hierarchy.r(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn block(&self, start: usize, len: usize) -> Result<Tensor> {
        Tensor::from_rows(&self.rows[start..start + len])
    }

    fn bottom_block(&self, start: usize, len: usize) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = self.rows[start..start + len]
            .iter()
            .map(|row| row[self.r..self.n].to_vec())
            .collect();
        Tensor::from_rows(&rows)
    }
}

/// Context/target windows identified by their first context row.
///
/// Window `s` uses rows `s..s+C` as encoder context, rows `s+C-1..s+C+L-1`
/// as decoder inputs and the bottom part of rows `s+C..s+C+L` as targets.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub context_length: usize,
    pub prediction_length: usize,
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn new(series_len: usize, context_length: usize, prediction_length: usize, starts: Vec<usize>) -> Result<Self> {
        if context_length == 0 || prediction_length == 0 {
            return Err(Error::Config("window lengths must be positive".into()));
        }
        if let Some(&s) = starts.iter().find(|&&s| s + context_length + prediction_length > series_len) {
            return Err(Error::Data(format!(
                "window starting at {s} needs {} rows, series has {series_len}",
                s + context_length + prediction_length
            )));
        }
        Ok(Self {
            context_length,
            prediction_length,
            starts,
        })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }
}

/// Mean over windows and target steps of `−log p(b_t | h_t)`.
pub fn nll_loss<'t>(model: &HierFlowModel, ctx: &Ctx<'t>, data: &ScaledPanel, batch: &WindowBatch) -> Result<Var<'t>> {
    if batch.is_empty() {
        return Err(Error::Data("empty window batch".into()));
    }
    let (c, l) = (batch.context_length, batch.prediction_length);
    let mut total: Option<Var<'t>> = None;
    for &s in &batch.starts {
        let context = data.block(s, c)?;
        let inputs = data.block(s + c - 1, l)?;
        let target = ctx.constant(data.bottom_block(s + c, l)?);
        let h = model.conditions(ctx, &context, &inputs)?;
        let lp = model.flow.log_prob(ctx, target, h)?.sum();
        total = Some(match total {
            Some(acc) => acc.add(lp)?,
            None => lp,
        });
    }
    let loss = total.expect("non-empty batch").scale(-1.0 / (batch.len() * l) as f64);
    if !loss.item().is_finite() {
        return Err(Error::NonFinite("negative log-likelihood".into()));
    }
    Ok(loss)
}

/// Evaluation-mode loss as a number.
pub fn nll_value(model: &HierFlowModel, data: &ScaledPanel, batch: &WindowBatch) -> Result<f64> {
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &model.params);
    Ok(nll_loss(model, &ctx, data, batch)?.item())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub split: &'static str,
    pub nll: f64,
}

pub fn write_training_log<W: std::io::Write>(log: &[LogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "split", "nll"])?;
    for row in log {
        w.write_record([row.epoch.to_string(), row.split.to_string(), row.nll.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub const CHECKPOINT_FORMAT: &str = "HIERFLOW-CKPT-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub nodes: Vec<String>,
    pub edges: Vec<(String, String)>,
    pub covariates: CovariateSource,
    pub n_covariates: usize,
    pub scaler: Scaler,
    /// Epoch whose parameters were kept (0 = initialization).
    pub best_epoch: usize,
    pub params: BTreeMap<String, ParamRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown checkpoint format '{}'", ckpt.format)));
        }
        Ok(ckpt)
    }

    /// Rebuilds the model with the stored parameters.
    pub fn restore(&self) -> Result<TrainedModel> {
        let tree = Arc::new(HierarchyTree::from_edges(&self.edges)?);
        if tree.ids() != self.nodes.as_slice() {
            return Err(Error::Checkpoint("stored node order does not match the stored edges".into()));
        }
        let mut model = HierFlowModel::new(self.model.clone(), tree, self.n_covariates, self.train.seed)?;
        model.params.load_records(&self.params)?;
        Ok(TrainedModel {
            model,
            scaler: self.scaler.clone(),
            covariates: self.covariates,
            context_length: self.train.context_length,
        })
    }
}

/// A model ready for forecasting.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: HierFlowModel,
    pub scaler: Scaler,
    pub covariates: CovariateSource,
    pub context_length: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trained: TrainedModel,
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

fn global_norm_clip(store: &mut ParamStore, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = store
        .ids()
        .filter_map(|id| store.grad(id))
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        store.scale_grad(max_norm / norm);
    }
}

/// Covariates the model sees for panel rows `0..len`.
fn model_covariates(source: &CovariateSource, panel: &PanelSeries) -> DMatrix<f64> {
    match *source {
        CovariateSource::Calendar { period, scale } => calendar_covariates(0, panel.len(), period, scale),
        CovariateSource::External => panel.covariates.clone(),
    }
}

/// Fits the model by maximum likelihood with early stopping on the last
/// `prediction_length` steps.
pub fn train(
    panel: &PanelSeries,
    covariates: CovariateSource,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (c, l) = (config.context_length, config.prediction_length);
    let t = panel.len();
    if t < c + 2 * l {
        return Err(Error::Data(format!(
            "insufficient data: {t} steps, need at least context {c} + 2 × prediction {l} (training and validation windows)"
        )));
    }
    let split = t - l;
    let scaler = Scaler::fit(&panel.values.rows(0, split).into_owned())?;
    let cov = model_covariates(&covariates, panel);
    let data = ScaledPanel::new(panel, &cov, &scaler)?;
    let mut model = HierFlowModel::new(model_config.clone(), Arc::clone(&panel.hierarchy), cov.ncols(), config.seed)?;

    let mut starts: Vec<usize> = (0..=split - c - l).collect();
    let valid = WindowBatch::new(t, c, l, vec![t - l - c])?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(config.adam);
    let dropout = model.config.attention.dropout;

    let mut log = Vec::new();
    let mut best = nll_value(&model, &data, &valid)?;
    let mut best_params = model.params.clone();
    let mut best_epoch = 0;
    log.push(LogRow {
        epoch: 0,
        split: "valid",
        nll: best,
    });
    info!("{} windows of {c}+{l} steps, {} parameters", starts.len(), model.params.num_scalars());

    for epoch in 1..=config.epochs {
        starts.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in starts.chunks(config.batch_size) {
            let batch = WindowBatch::new(t, c, l, chunk.to_vec())?;
            let tape = Tape::new();
            let ctx = Ctx::train(&tape, &model.params, dropout, ChaCha8Rng::seed_from_u64(rng.random()));
            let loss = nll_loss(&model, &ctx, &data, &batch)
                .map_err(|e| Error::NonFinite(format!("training diverged at epoch {epoch}: {e}")))?;
            sum += loss.item() * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            model.params.clear_grad();
            grads.accumulate_into(&mut model.params);
            global_norm_clip(&mut model.params, config.clip_norm);
            adam.step(&mut model.params)?;
        }
        let train_nll = sum / starts.len() as f64;
        let valid_nll = nll_value(&model, &data, &valid)
            .map_err(|e| Error::NonFinite(format!("validation failed at epoch {epoch}: {e}")))?;
        debug!("epoch {epoch}: train {train_nll:.5} valid {valid_nll:.5}");
        log.push(LogRow {
            epoch,
            split: "train",
            nll: train_nll,
        });
        log.push(LogRow {
            epoch,
            split: "valid",
            nll: valid_nll,
        });
        if valid_nll < best {
            best = valid_nll;
            best_params = model.params.clone();
            best_epoch = epoch;
        } else if config.patience > 0 && epoch - best_epoch >= config.patience {
            info!("early stop at epoch {epoch}; best epoch {best_epoch} (valid nll {best:.5})");
            break;
        }
    }
    model.params = best_params;
    model.params.clear_grad();

    let checkpoint = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        model: model_config.clone(),
        train: config.clone(),
        nodes: panel.hierarchy.ids().to_vec(),
        edges: panel.hierarchy.edges(),
        covariates,
        n_covariates: cov.ncols(),
        scaler: scaler.clone(),
        best_epoch,
        params: model.params.to_records(),
    };
    Ok(TrainOutcome {
        trained: TrainedModel {
            model,
            scaler,
            covariates,
            context_length: c,
        },
        checkpoint,
        log,
    })
}

impl TrainedModel {
    /// Samples `sample_count` coherent paths for the `horizon` steps after
    /// `history`.
    ///
    /// `future_covariates` must hold at least `horizon − 1` rows when the
    /// model uses external covariates; calendar covariates are generated.
    pub fn forecast(
        &self,
        history: &PanelSeries,
        future_covariates: Option<&DMatrix<f64>>,
        horizon: usize,
        sample_count: usize,
        seed: u64,
        timestamps: Vec<String>,
    ) -> Result<ForecastEnsemble> {
        let model = &self.model;
        let tree = &model.tree;
        if history.hierarchy.ids() != tree.ids() {
            return Err(Error::Checkpoint("panel hierarchy does not match the checkpoint".into()));
        }
        if horizon == 0 || sample_count == 0 {
            return Err(Error::Config("horizon and sample_count must be at least 1".into()));
        }
        let c = self.context_length;
        let t = history.len();
        if t < c {
            return Err(Error::Data(format!("forecast needs {c} observed steps, panel has {t}")));
        }
        if timestamps.len() != horizon {
            return Err(Error::dim("forecast timestamps", horizon, timestamps.len()));
        }
        let hist_cov = model_covariates(&self.covariates, history);
        let future = match (self.covariates, future_covariates) {
            (CovariateSource::Calendar { period, scale }, _) => calendar_covariates(t, horizon, period, scale),
            (CovariateSource::External, Some(f)) if f.nrows() + 1 >= horizon => f.clone(),
            (CovariateSource::External, Some(f)) => {
                return Err(Error::Data(format!(
                    "missing future covariates: need {} rows, got {}",
                    horizon - 1,
                    f.nrows()
                )))
            }
            (CovariateSource::External, None) if horizon == 1 => DMatrix::zeros(0, hist_cov.ncols()),
            (CovariateSource::External, None) => {
                return Err(Error::Data("missing future covariates for the forecast horizon".into()))
            }
        };
        if hist_cov.ncols() != model.n_covariates() || future.ncols() != model.n_covariates() {
            return Err(Error::dim("covariate width", model.n_covariates(), hist_cov.ncols()));
        }
        let recent = history.slice(t - c, t);
        let data = ScaledPanel::new(&recent, &hist_cov.rows(t - c, c).into_owned(), &self.scaler)?;
        let memory = {
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape, &model.params);
            model.transformer.encode(&ctx, &data.block(0, c)?)?.value()
        };
        let first_input = data.rows[c - 1].clone();

        let (n, r, m) = (tree.n(), tree.r(), tree.m());
        let paths: Vec<Vec<f64>> = (0..sample_count)
            .into_par_iter()
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(s as u64);
                let mut inputs = vec![first_input.clone()];
                let mut path = Vec::with_capacity(horizon * n);
                for k in 0..horizon {
                    let tape = Tape::new();
                    let ctx = Ctx::eval(&tape, &model.params);
                    let mem = tape.constant(memory.clone());
                    let h = model.transformer.decode(&ctx, &Tensor::from_rows(&inputs)?, mem)?.rows(k, 1)?;
                    let z = tape.constant(standard_normal(&mut rng, 1, m));
                    let b_scaled = model.flow.inverse(&ctx, z, h)?.value();
                    let b = self.scaler.invert_row(b_scaled.data(), r);
                    let y = tree.aggregate(&b)?;
                    if k + 1 < horizon {
                        let mut next = self.scaler.apply_row(&y, 0);
                        next.extend(future.row(k).iter());
                        inputs.push(next);
                    }
                    path.extend(y);
                }
                Ok(path)
            })
            .collect::<Result<_>>()?;

        let mut out = SamplePaths::zeros(sample_count, horizon, n);
        for (s, p) in paths.into_iter().enumerate() {
            out.data[s * horizon * n..(s + 1) * horizon * n].copy_from_slice(&p);
        }
        Ok(ForecastEnsemble {
            paths: out,
            hierarchy: Arc::clone(tree),
            timestamps,
        })
    }
}

/// Seasonal-naive base forecasts for every node, reconciled by a closed-form
/// method, as a single-path ensemble. `mint-shr` weights come from in-sample
/// seasonal-naive residuals.
pub fn baseline_forecast(
    history: &PanelSeries,
    method: Baseline,
    period: usize,
    horizon: usize,
    timestamps: Vec<String>,
) -> Result<ForecastEnsemble> {
    let tree = &history.hierarchy;
    let rows: Vec<Vec<f64>> = (0..history.len()).map(|t| history.row(t)).collect();
    let base = seasonal_naive(&rows, period, horizon)?;
    let residuals = match method {
        Baseline::MintShr => Some(seasonal_naive_residuals(&history.values, period)?),
        _ => None,
    };
    let reconciler = LinearReconciler::new(method, tree, residuals.as_ref())?;
    let mut paths = SamplePaths::zeros(1, horizon, tree.n());
    for (k, y) in base.iter().enumerate() {
        paths.get_mut(0, k).copy_from_slice(y);
    }
    reconciler.apply_paths(&paths, Arc::clone(tree), timestamps)
}
