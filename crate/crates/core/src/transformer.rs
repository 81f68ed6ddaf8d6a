//! Encoder-decoder transformer producing one condition vector per forecast step.
//!
//! One parameter set serves every series in the hierarchy: each time step is
//! embedded from the concatenation of all `n` series values and the step's
//! covariates. The encoder reads the context window; the decoder reads the
//! previous-step observations of the prediction window under a causal mask
//! and cross-attends to the encoder memory. The decoder's `d_model`-wide
//! output at step `t` is the condition `h_t` handed to the flow.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear};
use crate::tensorad::{ParamStore, Tensor, Var};

/// Attention and layer-stack hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub dropout: f64,
    /// Layer norm before each sublayer (true) or after the residual sum.
    pub pre_norm: bool,
    /// Adds a `d_model → n` linear read-out for diagnostics.
    pub readout: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            dropout: 0.1,
            pre_norm: true,
            readout: false,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Value used for masked (future) attention logits.
pub const MASK_SENTINEL: f64 = f64::NEG_INFINITY;

/// `L × L` additive mask: zero on and below the diagonal, the sentinel above.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = MASK_SENTINEL;
        }
    }
    Tensor::new(&[len, len], data).unwrap()
}

/// Fixed sinusoidal encodings for positions `start..start + len`.
pub fn positional_encoding(start: usize, len: usize, d_model: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d_model);
    for pos in start..start + len {
        for i in 0..d_model {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
            let angle = pos as f64 * freq;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[len, d_model], data).unwrap()
}

/// Scaled dot-product attention `softmax(Q Kᵀ / sqrt(d) + mask) V`.
pub fn attention<'t>(
    ctx: &Ctx<'t>,
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    mask: Option<&Tensor>,
) -> Result<Var<'t>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || ks[0] != vs[0] || qs[1] != ks[1] {
        return Err(Error::Shape {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let d = qs[1] as f64;
    let mut scores = q.matmul(k.transpose()?)?.scale(1.0 / d.sqrt());
    if let Some(mask) = mask {
        if mask.shape() != [qs[0], ks[0]] {
            return Err(Error::Shape {
                op: "attention mask",
                lhs: mask.shape().to_vec(),
                rhs: vec![qs[0], ks[0]],
            });
        }
        scores = scores.add(ctx.constant(mask.clone()))?;
    }
    let out = scores.softmax().matmul(v)?;
    if !out.value().is_finite() {
        return Err(Error::NonFinite("attention output".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct MultiHead {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHead {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            // a key bias shifts every logit of a row equally, so softmax ignores it
            k: Linear::new(store, &format!("{name}.k"), d, d, false, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng),
            heads: cfg.n_heads,
        }
    }

    fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        query: Var<'t>,
        kv: Var<'t>,
        mask: Option<&Tensor>,
    ) -> Result<Var<'t>> {
        let q = self.q.forward(ctx, query)?;
        let k = self.k.forward(ctx, kv)?;
        let v = self.v.forward(ctx, kv)?;
        let d_head = q.shape()[1] / self.heads;
        let outs = (0..self.heads)
            .map(|h| {
                let s = h * d_head;
                attention(ctx, q.slice(s, d_head)?, k.slice(s, d_head)?, v.slice(s, d_head)?, mask)
            })
            .collect::<Result<Vec<_>>>()?;
        self.o.forward(ctx, Var::concat(&outs)?)
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), cfg.d_model, cfg.d_ff, true, rng),
            down: Linear::new(store, &format!("{name}.down"), cfg.d_ff, cfg.d_model, true, rng),
        }
    }

    fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.up.forward(ctx, x)?.gelu();
        self.down.forward(ctx, h)
    }
}

/// Residual wrapper honouring the pre/post-norm choice.
fn residual<'t>(
    ctx: &Ctx<'t>,
    pre_norm: bool,
    norm: &LayerNorm,
    x: Var<'t>,
    sublayer: impl FnOnce(Var<'t>) -> Result<Var<'t>>,
) -> Result<Var<'t>> {
    if pre_norm {
        let y = sublayer(norm.forward(ctx, x)?)?;
        x.add(ctx.dropout(y)?)
    } else {
        let y = sublayer(x)?;
        norm.forward(ctx, x.add(ctx.dropout(y)?)?)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHead,
    norm2: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: MultiHead,
    norm2: LayerNorm,
    cross_attn: MultiHead,
    norm3: LayerNorm,
    ff: FeedForward,
}

/// The model. Parameters live in an external [`ParamStore`] under `transformer.`.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: AttentionConfig,
    n_series: usize,
    n_covariates: usize,
    enc_embed: Linear,
    enc_layers: Vec<EncoderLayer>,
    enc_norm: Option<LayerNorm>,
    dec_embed: Linear,
    dec_layers: Vec<DecoderLayer>,
    dec_norm: Option<LayerNorm>,
    readout: Option<Linear>,
}

impl Transformer {
    pub const PREFIX: &'static str = "transformer";

    pub fn new<R: Rng>(
        config: AttentionConfig,
        n_series: usize,
        n_covariates: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let p = Self::PREFIX;
        let d = config.d_model;
        let input = n_series + n_covariates;
        let enc_embed = Linear::new(store, &format!("{p}.enc.embed"), input, d, false, rng);
        let enc_layers = (0..config.n_enc_layers)
            .map(|i| {
                let name = format!("{p}.enc.{i}");
                EncoderLayer {
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
                    attn: MultiHead::new(store, &format!("{name}.attn"), &config, rng),
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
                    ff: FeedForward::new(store, &format!("{name}.ff"), &config, rng),
                }
            })
            .collect();
        let enc_norm = config
            .pre_norm
            .then(|| LayerNorm::new(store, &format!("{p}.enc.norm"), d));
        let dec_embed = Linear::new(store, &format!("{p}.dec.embed"), input, d, false, rng);
        let dec_layers = (0..config.n_dec_layers)
            .map(|i| {
                let name = format!("{p}.dec.{i}");
                DecoderLayer {
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
                    self_attn: MultiHead::new(store, &format!("{name}.self_attn"), &config, rng),
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
                    cross_attn: MultiHead::new(store, &format!("{name}.cross_attn"), &config, rng),
                    norm3: LayerNorm::new(store, &format!("{name}.norm3"), d),
                    ff: FeedForward::new(store, &format!("{name}.ff"), &config, rng),
                }
            })
            .collect();
        let dec_norm = config
            .pre_norm
            .then(|| LayerNorm::new(store, &format!("{p}.dec.norm"), d));
        let readout = config
            .readout
            .then(|| Linear::new(store, &format!("{p}.readout"), d, n_series, true, rng));
        Ok(Self {
            config,
            n_series,
            n_covariates,
            enc_embed,
            enc_layers,
            enc_norm,
            dec_embed,
            dec_layers,
            dec_norm,
            readout,
        })
    }

    pub fn n_series(&self) -> usize {
        self.n_series
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    /// Width of each condition vector.
    pub fn condition_dim(&self) -> usize {
        self.config.d_model
    }

    fn check_inputs(&self, x: &Tensor, what: &str) -> Result<()> {
        let want = self.n_series + self.n_covariates;
        if x.shape().len() != 2 || x.shape()[1] != want {
            return Err(Error::dim(what, format!("[L, {want}]"), format!("{:?}", x.shape())));
        }
        Ok(())
    }

    /// Rows `concat(y_t, x_t)` for a block of steps.
    pub fn stack_inputs(values: &[Vec<f64>], covariates: &[Vec<f64>]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = values
            .iter()
            .zip(covariates)
            .map(|(y, x)| y.iter().chain(x).copied().collect())
            .collect();
        Tensor::from_rows(&rows)
    }

    fn embed_with<'t>(
        &self,
        ctx: &Ctx<'t>,
        layer: &Linear,
        inputs: &Tensor,
        start_pos: usize,
    ) -> Result<Var<'t>> {
        let len = inputs.shape()[0];
        let x = layer.forward(ctx, ctx.constant(inputs.clone()))?;
        x.add(ctx.constant(positional_encoding(start_pos, len, self.config.d_model)))
    }

    /// Encoder-side embedding of `[L, n + c]` rows at positions `start_pos..`.
    pub fn embed<'t>(&self, ctx: &Ctx<'t>, inputs: &Tensor, start_pos: usize) -> Result<Var<'t>> {
        self.check_inputs(inputs, "embed")?;
        self.embed_with(ctx, &self.enc_embed, inputs, start_pos)
    }

    /// Encodes `[C, n + c]` context rows into a `[C, d_model]` memory.
    pub fn encode<'t>(&self, ctx: &Ctx<'t>, context: &Tensor) -> Result<Var<'t>> {
        self.check_inputs(context, "encode")?;
        if context.shape()[0] == 0 {
            return Err(Error::Data("empty encoder context".into()));
        }
        let mut x = ctx.dropout(self.embed_with(ctx, &self.enc_embed, context, 0)?)?;
        let pre = self.config.pre_norm;
        for layer in &self.enc_layers {
            x = residual(ctx, pre, &layer.norm1, x, |h| layer.attn.forward(ctx, h, h, None))?;
            x = residual(ctx, pre, &layer.norm2, x, |h| layer.ff.forward(ctx, h))?;
        }
        match &self.enc_norm {
            Some(norm) => norm.forward(ctx, x),
            None => Ok(x),
        }
    }

    /// Decodes `[L, n + c]` previous-step inputs against `memory`, returning
    /// `[L, d_model]` conditions. Row `t` only sees input rows `0..=t`.
    pub fn decode<'t>(&self, ctx: &Ctx<'t>, inputs: &Tensor, memory: Var<'t>) -> Result<Var<'t>> {
        self.check_inputs(inputs, "decode")?;
        let len = inputs.shape()[0];
        if len == 0 {
            return Err(Error::Data("empty decoder input".into()));
        }
        let start = memory.shape()[0];
        let mask = causal_mask(len);
        let mut x = ctx.dropout(self.embed_with(ctx, &self.dec_embed, inputs, start)?)?;
        let pre = self.config.pre_norm;
        for layer in &self.dec_layers {
            x = residual(ctx, pre, &layer.norm1, x, |h| {
                layer.self_attn.forward(ctx, h, h, Some(&mask))
            })?;
            x = residual(ctx, pre, &layer.norm2, x, |h| {
                layer.cross_attn.forward(ctx, h, memory, None)
            })?;
            x = residual(ctx, pre, &layer.norm3, x, |h| layer.ff.forward(ctx, h))?;
        }
        match &self.dec_norm {
            Some(norm) => norm.forward(ctx, x),
            None => Ok(x),
        }
    }

    /// Diagnostic `n`-wide projection of decoder conditions.
    pub fn read_out<'t>(&self, ctx: &Ctx<'t>, h: Var<'t>) -> Result<Option<Var<'t>>> {
        self.readout.as_ref().map(|r| r.forward(ctx, h)).transpose()
    }
}
