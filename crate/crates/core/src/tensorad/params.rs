use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors and their gradient accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
}

/// Serialized form of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.grads.push(None);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-style normal initialisation for a `[fan_in, fan_out]` weight.
    pub fn add_weight<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(&[fan_in, fan_out], data).unwrap())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Resets every gradient to zeros (present, not missing).
    pub fn zero_grad(&mut self) {
        for (g, v) in self.grads.iter_mut().zip(&self.values) {
            *g = Some(Tensor::zeros(v.shape()));
        }
    }

    /// Drops every gradient.
    pub fn clear_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Adds `g` (row-major, or empty for "no contribution") into the accumulator.
    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let value = &self.values[id.0];
        let slot = self.grads[id.0].get_or_insert_with(|| Tensor::zeros(value.shape()));
        for (s, x) in slot.data_mut().iter_mut().zip(g) {
            *s += x;
        }
    }

    /// Scales every present gradient.
    pub fn scale_grad(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn to_records(&self) -> BTreeMap<String, ParamRecord> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| {
                (
                    n.clone(),
                    ParamRecord {
                        shape: v.shape().to_vec(),
                        values: v.data().to_vec(),
                    },
                )
            })
            .collect()
    }

    /// Overwrites every parameter from `records`; names and shapes must match exactly.
    pub fn load_records(&mut self, records: &BTreeMap<String, ParamRecord>) -> Result<()> {
        if records.len() != self.names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, checkpoint has {}",
                self.names.len(),
                records.len()
            )));
        }
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let rec = records
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))?;
            if rec.shape != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    rec.shape,
                    value.shape()
                )));
            }
            *value = Tensor::new(&rec.shape, rec.values.clone())?;
        }
        self.clear_grad();
        Ok(())
    }
}
