//! Conditional RealNVP density over the bottom-level series.
//!
//! Each coupling layer permutes its input, keeps the first `d` coordinates
//! and maps the rest as `x₂ ⊙ exp(s) + t`, with `s` and `t` computed from
//! `concat(x₁, h)`. The stack runs data → latent in [`FlowStack::forward`]
//! and latent → data in [`FlowStack::inverse`]; the latent is standard normal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::tensorad::{ParamId, ParamStore, Tensor, Var};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub n_layers: usize,
    pub hidden: usize,
    /// Initial value of the learnable bound on `|s|`.
    pub scale_bound: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            hidden: 64,
            scale_bound: 2.0,
        }
    }
}

/// Two-layer tanh network.
#[derive(Debug, Clone)]
struct CouplingNet {
    hidden: Linear,
    out: Linear,
}

impl CouplingNet {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, inp: usize, hid: usize, out: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), inp, hid, true, rng),
            // small output layer: the stack starts close to the identity
            out: Linear::scaled(store, &format!("{name}.out"), hid, out, 0.1, rng),
        }
    }

    fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.hidden.forward(ctx, x)?.tanh();
        self.out.forward(ctx, h)
    }
}

#[derive(Debug, Clone)]
pub struct CouplingLayer {
    /// Applied to the input before splitting: `x_perm[i] = x[perm[i]]`.
    pub permutation: Vec<usize>,
    /// Number of pass-through coordinates.
    pub split: usize,
    s_net: CouplingNet,
    t_net: CouplingNet,
    log_bound: ParamId,
}

/// Scale and shift for the transformed block.
struct Affine<'t> {
    kept: Var<'t>,
    rest: Var<'t>,
    scale: Var<'t>,
    shift: Var<'t>,
}

impl CouplingLayer {
    fn conditioner<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, h: Var<'t>) -> Result<Affine<'t>> {
        let m = self.permutation.len();
        let xp = x.select(&self.permutation)?;
        let rest = xp.slice(self.split, m - self.split)?;
        let (kept, input) = if self.split == 0 {
            (rest, h)
        } else {
            let kept = xp.slice(0, self.split)?;
            (kept, Var::concat(&[kept, h])?)
        };
        let bound = ctx.param(self.log_bound).exp();
        let scale = self.s_net.forward(ctx, input)?.tanh().mul(bound)?;
        let shift = self.t_net.forward(ctx, input)?;
        Ok(Affine {
            kept,
            rest,
            scale,
            shift,
        })
    }

    /// `(y, log|det|)` per row.
    fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, h: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let a = self.conditioner(ctx, x, h)?;
        let moved = a.rest.mul(a.scale.exp())?.add(a.shift)?;
        let y = if self.split == 0 {
            moved
        } else {
            Var::concat(&[a.kept, moved])?
        };
        Ok((y, a.scale.sum_last()))
    }

    fn inverse<'t>(&self, ctx: &Ctx<'t>, y: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let m = self.permutation.len();
        // y is in permuted order; the kept block is unchanged so the
        // conditioner can be evaluated directly on it.
        let kept = y.slice(0, self.split)?;
        let moved = y.slice(self.split, m - self.split)?;
        let input = if self.split == 0 { h } else { Var::concat(&[kept, h])? };
        let bound = ctx.param(self.log_bound).exp();
        let scale = self.s_net.forward(ctx, input)?.tanh().mul(bound)?;
        let shift = self.t_net.forward(ctx, input)?;
        let rest = moved.sub(shift)?.mul(scale.neg().exp())?;
        let xp = if self.split == 0 { rest } else { Var::concat(&[kept, rest])? };
        let mut inv = vec![0; m];
        for (i, &p) in self.permutation.iter().enumerate() {
            inv[p] = i;
        }
        xp.select(&inv)
    }
}

/// `K` conditional coupling layers over `R^m` with a standard normal base.
#[derive(Debug, Clone)]
pub struct FlowStack {
    pub config: FlowConfig,
    pub layers: Vec<CouplingLayer>,
    dim: usize,
    cond_dim: usize,
}

impl FlowStack {
    pub const PREFIX: &'static str = "flow";

    /// Split `⌊m/2⌋`, identity permutation on even layers and reversal on odd
    /// ones. For `m = 1` every layer is a conditional affine map of the scalar.
    pub fn new<R: Rng>(
        config: FlowConfig,
        dim: usize,
        cond_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("flow dimension must be positive".into()));
        }
        if config.n_layers == 0 || config.hidden == 0 || !(config.scale_bound > 0.0) {
            return Err(Error::Config(
                "flow needs n_layers > 0, hidden > 0 and a positive scale bound".into(),
            ));
        }
        let split = dim / 2;
        let layers = (0..config.n_layers)
            .map(|k| {
                let name = format!("{}.{k}", Self::PREFIX);
                let permutation: Vec<usize> = if k % 2 == 0 {
                    (0..dim).collect()
                } else {
                    (0..dim).rev().collect()
                };
                let inp = split + cond_dim;
                let out = dim - split;
                CouplingLayer {
                    permutation,
                    split,
                    s_net: CouplingNet::new(store, &format!("{name}.s"), inp, config.hidden, out, rng),
                    t_net: CouplingNet::new(store, &format!("{name}.t"), inp, config.hidden, out, rng),
                    log_bound: store.add(
                        format!("{name}.log_bound"),
                        Tensor::full(&[out], config.scale_bound.ln()),
                    ),
                }
            })
            .collect();
        Ok(Self {
            config,
            layers,
            dim,
            cond_dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn check<'t>(&self, x: Var<'t>, h: Var<'t>) -> Result<()> {
        let (xs, hs) = (x.shape(), h.shape());
        if xs.len() != 2 || xs[1] != self.dim {
            return Err(Error::dim("flow input", format!("[B, {}]", self.dim), format!("{xs:?}")));
        }
        if hs.len() != 2 || hs[1] != self.cond_dim || hs[0] != xs[0] {
            return Err(Error::dim(
                "flow condition",
                format!("[{}, {}]", xs[0], self.cond_dim),
                format!("{hs:?}"),
            ));
        }
        Ok(())
    }

    /// Data → latent. Returns `z` (`[B, m]`) and `log|det ∂z/∂b|` (`[B]`).
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, b: Var<'t>, h: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        self.check(b, h)?;
        let mut x = b;
        let mut logdet: Option<Var<'t>> = None;
        for layer in &self.layers {
            let (y, ld) = layer.forward(ctx, x, h)?;
            x = y;
            logdet = Some(match logdet {
                Some(acc) => acc.add(ld)?,
                None => ld,
            });
        }
        if !x.value().is_finite() {
            return Err(Error::NonFinite("flow forward transform".into()));
        }
        Ok((x, logdet.expect("at least one layer")))
    }

    /// Latent → data, undoing the layers in reverse order.
    pub fn inverse<'t>(&self, ctx: &Ctx<'t>, z: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
        self.check(z, h)?;
        let mut y = z;
        for layer in self.layers.iter().rev() {
            y = layer.inverse(ctx, y, h)?;
        }
        if !y.value().is_finite() {
            return Err(Error::NonFinite("flow inverse transform".into()));
        }
        Ok(y)
    }

    /// `log p(b | h)` per row (`[B]`).
    pub fn log_prob<'t>(&self, ctx: &Ctx<'t>, b: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let (z, logdet) = self.forward(ctx, b, h)?;
        let base = z
            .square()
            .sum_last()
            .affine(-0.5, -0.5 * self.dim as f64 * LN_2PI);
        base.add(logdet)
    }

    /// `count` draws from `p(· | h)` for a single condition vector.
    pub fn sample(&self, store: &ParamStore, h: &[f64], count: usize, seed: u64) -> Result<Tensor> {
        if count == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = standard_normal(&mut rng, count, self.dim);
        let hs = Tensor::new(&[count, self.cond_dim], h.repeat(count))?;
        self.inverse_values(store, &z, &hs)
    }

    /// Evaluation-mode inverse on plain tensors.
    pub fn inverse_values(&self, store: &ParamStore, z: &Tensor, h: &Tensor) -> Result<Tensor> {
        let tape = crate::tensorad::Tape::new();
        let ctx = Ctx::eval(&tape, store);
        Ok(self.inverse(&ctx, tape.constant(z.clone()), tape.constant(h.clone()))?.value())
    }

    /// Evaluation-mode forward on plain tensors.
    pub fn forward_values(&self, store: &ParamStore, b: &Tensor, h: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let tape = crate::tensorad::Tape::new();
        let ctx = Ctx::eval(&tape, store);
        let (z, ld) = self.forward(&ctx, tape.constant(b.clone()), tape.constant(h.clone()))?;
        Ok((z.value(), ld.value().into_data()))
    }

    /// Evaluation-mode log density on plain tensors.
    pub fn log_prob_values(&self, store: &ParamStore, b: &Tensor, h: &Tensor) -> Result<Vec<f64>> {
        let tape = crate::tensorad::Tape::new();
        let ctx = Ctx::eval(&tape, store);
        Ok(self
            .log_prob(&ctx, tape.constant(b.clone()), tape.constant(h.clone()))?
            .value()
            .into_data())
    }
}

/// `[rows, cols]` of independent standard normal draws.
pub fn standard_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(&[rows, cols], data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorad::Tape;

    fn build(dim: usize, cond: usize, layers: usize, seed: u64) -> (FlowStack, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = FlowConfig {
            n_layers: layers,
            hidden: 8,
            scale_bound: 2.0,
        };
        let flow = FlowStack::new(cfg, dim, cond, &mut store, &mut rng).unwrap();
        (flow, store)
    }

    /// Zero every coupling network so each layer is a pure permutation.
    fn zero_nets(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.name(id).contains(".out.") {
                store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn rand_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect())
            .unwrap()
    }

    #[test]
    fn identity_coupling_permutes() {
        let (flow, mut store) = build(4, 3, 1, 1);
        zero_nets(&mut store);
        let b = Tensor::matrix(1, 4, vec![1., 2., 3., 4.]).unwrap();
        let h = rand_rows(1, 3, 2);
        let (z, ld) = flow.forward_values(&store, &b, &h).unwrap();
        assert_eq!(z.data(), &[1., 2., 3., 4.]);
        assert_eq!(ld, vec![0.0]);

        // a reversing layer: output is the permuted input and inverts back
        let (flow, mut store) = build(4, 3, 2, 1);
        zero_nets(&mut store);
        let single = FlowStack {
            layers: vec![flow.layers[1].clone()],
            ..flow.clone()
        };
        let (z, ld) = single.forward_values(&store, &b, &h).unwrap();
        assert_eq!(z.data(), &[4., 3., 2., 1.]);
        assert_eq!(ld, vec![0.0]);
        let back = single.inverse_values(&store, &z, &h).unwrap();
        assert_eq!(back.data(), &[1., 2., 3., 4.]);
        let origin = single.inverse_values(&store, &Tensor::zeros(&[1, 4]), &h).unwrap();
        assert_eq!(origin.data(), &[0.; 4]);
    }

    #[test]
    fn constant_scale_gives_constant_logdet() {
        let (flow, mut store) = build(2, 1, 1, 3);
        zero_nets(&mut store);
        // s = bound * tanh(bias): make the output bias produce a known constant
        let bias = store.find("flow.0.s.out.bias").unwrap();
        store.value_mut(bias).data_mut()[0] = 0.5;
        let c = 2.0 * 0.5f64.tanh();
        let (_, ld) = flow
            .forward_values(&store, &rand_rows(3, 2, 4), &rand_rows(3, 1, 5))
            .unwrap();
        for v in ld {
            assert!((v - c).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_flow_log_prob_is_standard_normal() {
        let (flow, mut store) = build(3, 2, 2, 6);
        zero_nets(&mut store);
        let h = rand_rows(2, 2, 7);
        let lp = flow.log_prob_values(&store, &Tensor::zeros(&[2, 3]), &h).unwrap();
        let expect = 3.0 * (1.0 / (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((lp[0] - expect).abs() < 1e-12);
        let b = rand_rows(2, 3, 8);
        let lp = flow.log_prob_values(&store, &b, &h).unwrap();
        for r in 0..2 {
            let sq: f64 = b.row(r).iter().map(|v| v * v).sum();
            assert!((lp[r] - (-0.5 * sq + expect)).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_random_networks() {
        for dim in [1, 2, 3, 5] {
            let (flow, store) = build(dim, 4, 4, dim as u64);
            let b = rand_rows(50, dim, 9);
            let h = rand_rows(50, 4, 10);
            let (z, _) = flow.forward_values(&store, &b, &h).unwrap();
            let back = flow.inverse_values(&store, &z, &h).unwrap();
            assert!(back.max_abs_diff(&b) < 1e-9, "dim {dim}");
        }
    }

    #[test]
    fn sampling_is_seeded_and_shaped() {
        let (flow, store) = build(4, 3, 4, 11);
        let h = [0.1, -0.2, 0.3];
        let a = flow.sample(&store, &h, 5, 42).unwrap();
        let b = flow.sample(&store, &h, 5, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[5, 4]);
        assert_eq!(flow.sample(&store, &h, 1, 1).unwrap().shape(), &[1, 4]);
        assert!(flow.sample(&store, &h, 0, 1).is_err());
        assert_ne!(a, flow.sample(&store, &h, 5, 43).unwrap());
    }

    #[test]
    fn dimension_errors() {
        let (flow, store) = build(4, 3, 2, 12);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let b = tape.var(Tensor::zeros(&[2, 3]));
        let h = tape.var(Tensor::zeros(&[2, 3]));
        assert!(flow.forward(&ctx, b, h).is_err());
        let b = tape.var(Tensor::zeros(&[2, 4]));
        let h = tape.var(Tensor::zeros(&[1, 3]));
        assert!(flow.log_prob(&ctx, b, h).is_err());
    }

    #[test]
    fn every_coordinate_is_transformed_across_two_layers() {
        for dim in 2..8 {
            let (flow, _) = build(dim, 1, 2, 0);
            let mut touched = vec![false; dim];
            for layer in &flow.layers {
                for &p in &layer.permutation[layer.split..] {
                    touched[p] = true;
                }
            }
            assert!(touched.iter().all(|&t| t), "dim {dim}");
        }
    }
}
