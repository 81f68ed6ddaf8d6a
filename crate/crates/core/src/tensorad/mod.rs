//! Dense tensors with tape-based reverse-mode differentiation, the Adam
//! optimiser, and a parameter store that serializes to checkpoints.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamRecord, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
