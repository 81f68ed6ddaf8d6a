//! Small building blocks shared by the transformer and the flow.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensorad::{ParamId, ParamStore, Tape, Tensor, Var};

/// Everything a forward pass needs besides its inputs.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub store: &'t ParamStore,
    /// Dropout rate and generator; `None` in evaluation mode.
    dropout: Option<(f64, RefCell<ChaCha8Rng>)>,
}

impl<'t> Ctx<'t> {
    pub fn eval(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self {
            tape,
            store,
            dropout: None,
        }
    }

    pub fn train(tape: &'t Tape, store: &'t ParamStore, rate: f64, rng: ChaCha8Rng) -> Self {
        Self {
            tape,
            store,
            dropout: (rate > 0.0).then(|| (rate, RefCell::new(rng))),
        }
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        self.tape.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Inverted dropout; identity in evaluation mode.
    pub fn dropout(&self, x: Var<'t>) -> Result<Var<'t>> {
        let Some((rate, rng)) = &self.dropout else {
            return Ok(x);
        };
        let shape = x.shape();
        let keep = 1.0 - rate;
        let mut rng = rng.borrow_mut();
        let mask = (0..shape.iter().product::<usize>())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        x.mul(self.tape.constant(Tensor::new(&shape, mask)?))
    }
}

/// `x W (+ b)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_weight(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self { weight, bias }
    }

    /// Like [`Linear::new`] with weights shrunk by `gain`.
    pub fn scaled<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let layer = Self::new(store, name, fan_in, fan_out, true, rng);
        store
            .value_mut(layer.weight)
            .data_mut()
            .iter_mut()
            .for_each(|w| *w *= gain);
        layer
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(ctx.param(self.weight))?;
        match self.bias {
            Some(b) => y.add(ctx.param(b)),
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(Self::EPS)
            .mul(ctx.param(self.gain))?
            .add(ctx.param(self.shift))
    }
}
