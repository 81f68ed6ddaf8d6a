//! Reverse-mode differentiation over dense tensors.
//!
//! Every primitive appends a node to the [`Tape`]; nodes only reference
//! earlier nodes, so the tape is already in topological order and
//! [`Tape::backward`] simply walks it in reverse.

use std::cell::RefCell;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Gelu(usize),
    Softmax(usize),
    Concat(Vec<usize>),
    Select(usize, Vec<usize>),
    Rows(usize, usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Affine(usize, f64),
    LayerNorm { input: usize, inv_std: Vec<f64> },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Result of a backward pass: one gradient slot per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient with respect to `var`, zeros if it did not influence the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = var.shape();
        match &self.grads[var.id] {
            Some(g) => Tensor::new(&shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Adds every parameter leaf's gradient into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(node, pid) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.accumulate_grad(pid, g);
            } else {
                store.accumulate_grad(pid, &[]);
            }
        }
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Leading-batch broadcast: equal shapes, or the smaller shape is a proper
/// suffix of the larger. Returns true when `b` is the broadcast operand.
fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Option<bool>> {
    if a == b {
        return Ok(None);
    }
    if b.len() < a.len() && a.ends_with(b) {
        return Ok(Some(true));
    }
    if a.len() < b.len() && b.ends_with(a) {
        return Ok(Some(false));
    }
    Err(shape_err(op, a, b))
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        self.push_node(Node {
            value,
            op,
            param: None,
        })
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf. Its gradient is available through [`Gradients::wrt`].
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// A constant leaf (same as [`Tape::var`]; named for readability).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// A leaf bound to a stored parameter.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push_node(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            param: Some(id),
        })
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(shape_err("backward", &nodes[loss.id].value.shape().to_vec(), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
            slot.get_or_insert_with(|| vec![0.0; len])
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    for (k, s) in [(*a, 1.0), (*b, sign)] {
                        let len = nodes[k].value.len();
                        let slot = acc(&mut grads[k], len);
                        for (i, gi) in g.iter().enumerate() {
                            slot[i % len] += s * gi;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    let (la, lb) = (va.len(), vb.len());
                    {
                        let slot = acc(&mut grads[*a], la);
                        for (i, gi) in g.iter().enumerate() {
                            slot[i % la] += gi * vb[i % lb];
                        }
                    }
                    let slot = acc(&mut grads[*b], lb);
                    for (i, gi) in g.iter().enumerate() {
                        slot[i % lb] += gi * va[i % la];
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (n, k) = (va.shape()[0], va.shape()[1]);
                    let p = vb.shape()[1];
                    let (da, db) = (va.data(), vb.data());
                    {
                        // dA = G Bᵀ
                        let slot = acc(&mut grads[*a], n * k);
                        for i in 0..n {
                            for j in 0..k {
                                let mut s = 0.0;
                                for c in 0..p {
                                    s += g[i * p + c] * db[j * p + c];
                                }
                                slot[i * k + j] += s;
                            }
                        }
                    }
                    // dB = Aᵀ G
                    let slot = acc(&mut grads[*b], k * p);
                    for i in 0..n {
                        for j in 0..k {
                            let aij = da[i * k + j];
                            if aij == 0.0 {
                                continue;
                            }
                            for c in 0..p {
                                slot[j * p + c] += aij * g[i * p + c];
                            }
                        }
                    }
                }
                Op::Exp(a) => {
                    let slot = acc(&mut grads[*a], out.len());
                    for (i, (gi, yi)) in g.iter().zip(out.data()).enumerate() {
                        slot[i] += gi * yi;
                    }
                }
                Op::Log(a) => {
                    let x = nodes[*a].value.data();
                    let slot = acc(&mut grads[*a], out.len());
                    for i in 0..x.len() {
                        slot[i] += g[i] / x[i];
                    }
                }
                Op::Tanh(a) => {
                    let slot = acc(&mut grads[*a], out.len());
                    for (i, (gi, yi)) in g.iter().zip(out.data()).enumerate() {
                        slot[i] += gi * (1.0 - yi * yi);
                    }
                }
                Op::Gelu(a) => {
                    let x = nodes[*a].value.data();
                    let slot = acc(&mut grads[*a], out.len());
                    for i in 0..x.len() {
                        slot[i] += g[i] * gelu_grad(x[i]);
                    }
                }
                Op::Softmax(a) => {
                    let k = out.last_dim();
                    let y = out.data();
                    let slot = acc(&mut grads[*a], out.len());
                    for r in 0..out.outer() {
                        let row = r * k..(r + 1) * k;
                        let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                        for i in row {
                            slot[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
                Op::Concat(parts) => {
                    let total = out.last_dim();
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p].value.last_dim();
                        let len = nodes[p].value.len();
                        let slot = acc(&mut grads[p], len);
                        for r in 0..out.outer() {
                            for c in 0..w {
                                slot[r * w + c] += g[r * total + offset + c];
                            }
                        }
                        offset += w;
                    }
                }
                Op::Select(a, idx) => {
                    let src = &nodes[*a].value;
                    let w = src.last_dim();
                    let slot = acc(&mut grads[*a], src.len());
                    let k = idx.len();
                    for r in 0..out.outer() {
                        for (c, &j) in idx.iter().enumerate() {
                            slot[r * w + j] += g[r * k + c];
                        }
                    }
                }
                Op::Rows(a, start) => {
                    let src = &nodes[*a].value;
                    let w = src.last_dim();
                    let slot = acc(&mut grads[*a], src.len());
                    for (i, gi) in g.iter().enumerate() {
                        slot[start * w + i] += gi;
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (out.shape()[0], out.shape()[1]);
                    let slot = acc(&mut grads[*a], out.len());
                    for i in 0..r {
                        for j in 0..c {
                            slot[j * r + i] += g[i * c + j];
                        }
                    }
                }
                Op::Sum(a) | Op::Mean(a) => {
                    let len = nodes[*a].value.len();
                    let scale = if matches!(node.op, Op::Mean(_)) { 1.0 / len as f64 } else { 1.0 };
                    let slot = acc(&mut grads[*a], len);
                    for s in slot.iter_mut() {
                        *s += g[0] * scale;
                    }
                }
                Op::SumLast(a) => {
                    let src = &nodes[*a].value;
                    let w = src.last_dim();
                    let slot = acc(&mut grads[*a], src.len());
                    for (i, s) in slot.iter_mut().enumerate() {
                        *s += g[i / w];
                    }
                }
                Op::Affine(a, scale) => {
                    let slot = acc(&mut grads[*a], out.len());
                    for (s, gi) in slot.iter_mut().zip(&g) {
                        *s += scale * gi;
                    }
                }
                Op::LayerNorm { input, inv_std } => {
                    // y = (x - mean) * inv_std  per row
                    let k = out.last_dim();
                    let y = out.data();
                    let slot = acc(&mut grads[*input], out.len());
                    for r in 0..out.outer() {
                        let row = r * k..(r + 1) * k;
                        let gm: f64 = g[row.clone()].iter().sum::<f64>() / k as f64;
                        let gy: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / k as f64;
                        for i in row {
                            slot[i] += inv_std[r] * (g[i] - gm - y[i] * gy);
                        }
                    }
                }
                Op::Reshape(a) => {
                    let slot = acc(&mut grads[*a], out.len());
                    for (s, gi) in slot.iter_mut().zip(&g) {
                        *s += gi;
                    }
                }
            }
            grads[id] = Some(g);
        }

        let params = nodes
            .iter()
            .enumerate()
            .take(loss.id + 1)
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        let mut grads = grads;
        grads.resize(nodes.len(), None);
        Ok(Gradients { grads, params })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    /// Scalar value; first element for non-scalars.
    pub fn item(&self) -> f64 {
        self.tape.value_of(self.id).item()
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = {
            let x = self.tape.value_of(self.id);
            Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).unwrap()
        };
        self.tape.push(out, op)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let out = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            let (la, lb) = (a.len(), b.len());
            match broadcast(name, a.shape(), b.shape())? {
                None | Some(true) => {
                    let data = (0..la).map(|i| f(a.data()[i], b.data()[i % lb])).collect();
                    Tensor::new(a.shape(), data)?
                }
                Some(false) => {
                    let data = (0..lb).map(|i| f(a.data()[i % la], b.data()[i])).collect();
                    Tensor::new(b.shape(), data)?
                }
            }
        };
        Ok(self.tape.push(out, op))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// `[n, k] × [k, p] → [n, p]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err("matmul", a.shape(), b.shape()));
            }
            let (n, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let (da, db) = (a.data(), b.data());
            let mut c = vec![0.0; n * p];
            for i in 0..n {
                for j in 0..k {
                    let aij = da[i * k + j];
                    if aij == 0.0 {
                        continue;
                    }
                    let brow = &db[j * p..(j + 1) * p];
                    let crow = &mut c[i * p..(i + 1) * p];
                    for (cc, bb) in crow.iter_mut().zip(brow) {
                        *cc += aij * bb;
                    }
                }
            }
            Tensor::new(&[n, p], c)?
        };
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id)))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&self) -> Result<Var<'t>> {
        {
            let x = self.tape.value_of(self.id);
            if let Some(v) = x.data().iter().find(|&&v| !(v > 0.0)) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {v}"),
                });
            }
        }
        Ok(self.unary(Op::Log(self.id), f64::ln))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), gelu)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&self, scale: f64, shift: f64) -> Var<'t> {
        self.unary(Op::Affine(self.id, scale), |v| scale * v + shift)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    pub fn neg(&self) -> Var<'t> {
        self.affine(-1.0, 0.0)
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(*self).expect("same shape")
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t> {
        let out = {
            let x = self.tape.value_of(self.id);
            let k = x.last_dim();
            let mut y = x.data().to_vec();
            for row in y.chunks_mut(k.max(1)) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            Tensor::new(x.shape(), y).unwrap()
        };
        self.tape.push(out, Op::Softmax(self.id))
    }

    /// Normalizes each row over the last axis to zero mean and unit variance.
    pub fn layer_norm(&self, eps: f64) -> Var<'t> {
        let (out, inv_std) = {
            let x = self.tape.value_of(self.id);
            let k = x.last_dim();
            let mut y = x.data().to_vec();
            let mut inv = Vec::with_capacity(x.outer());
            for row in y.chunks_mut(k) {
                let mean = row.iter().sum::<f64>() / k as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
                let is = 1.0 / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * is;
                }
                inv.push(is);
            }
            (Tensor::new(x.shape(), y).unwrap(), inv)
        };
        self.tape.push(
            out,
            Op::LayerNorm {
                input: self.id,
                inv_std,
            },
        )
    }

    /// Concatenates along the last axis; all leading dimensions must agree.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts[0].tape;
        let out = {
            let vals: Vec<_> = parts.iter().map(|p| tape.value_of(p.id)).collect();
            let lead = &vals[0].shape()[..vals[0].shape().len() - 1];
            for v in &vals[1..] {
                let s = v.shape();
                if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                    return Err(shape_err("concat", vals[0].shape(), s));
                }
            }
            let total: usize = vals.iter().map(|v| v.last_dim()).sum();
            let outer = vals[0].outer();
            let mut data = Vec::with_capacity(outer * total);
            for r in 0..outer {
                for v in &vals {
                    data.extend_from_slice(v.row(r));
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::new(&shape, data)?
        };
        Ok(tape.push(out, Op::Concat(parts.iter().map(|p| p.id).collect())))
    }

    /// Gathers columns of the last axis (any order, repeats allowed).
    pub fn select(&self, idx: &[usize]) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value_of(self.id);
            let w = x.last_dim();
            if let Some(&bad) = idx.iter().find(|&&j| j >= w) {
                return Err(shape_err("select", x.shape(), &[bad]));
            }
            let mut data = Vec::with_capacity(x.outer() * idx.len());
            for r in 0..x.outer() {
                let row = x.row(r);
                data.extend(idx.iter().map(|&j| row[j]));
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = idx.len();
            Tensor::new(&shape, data)?
        };
        Ok(self.tape.push(out, Op::Select(self.id, idx.to_vec())))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.select(&idx)
    }

    /// Rows `[start, start + len)` of a 2-D tensor.
    pub fn rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value_of(self.id);
            if x.shape().len() != 2 || start + len > x.shape()[0] {
                return Err(shape_err("rows", x.shape(), &[start, len]));
            }
            let w = x.shape()[1];
            Tensor::new(&[len, w], x.data()[start * w..(start + len) * w].to_vec())?
        };
        Ok(self.tape.push(out, Op::Rows(self.id, start)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value_of(self.id);
            if x.shape().len() != 2 {
                return Err(shape_err("transpose", x.shape(), &[]));
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let d = x.data();
            let mut t = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    t[j * r + i] = d[i * c + j];
                }
            }
            Tensor::new(&[c, r], t)?
        };
        Ok(self.tape.push(out, Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.tape.value_of(self.id).reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id)))
    }

    /// Sum of all elements (scalar).
    pub fn sum(&self) -> Var<'t> {
        let s = self.tape.value_of(self.id).data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    /// Mean of all elements (scalar).
    pub fn mean(&self) -> Var<'t> {
        let x = self.tape.value_of(self.id);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        drop(x);
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&self) -> Var<'t> {
        let out = {
            let x = self.tape.value_of(self.id);
            let w = x.last_dim();
            let data: Vec<f64> = x.data().chunks(w.max(1)).map(|c| c.iter().sum()).collect();
            let shape = &x.shape()[..x.shape().len().saturating_sub(1)];
            Tensor::new(shape, data).unwrap()
        };
        self.tape.push(out, Op::SumLast(self.id))
    }
}
