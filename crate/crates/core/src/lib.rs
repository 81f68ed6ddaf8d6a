//! Coherent probabilistic forecasting for hierarchical time series.
//!
//! An encoder-decoder transformer summarises the history of every series in
//! the hierarchy into a per-step condition vector. A conditional RealNVP flow
//! turns that condition into a joint density over the bottom-level series,
//! and samples from it are summed through the aggregation matrix so every
//! forecast path is coherent by construction.

pub mod data;
pub mod config;
pub mod error;
pub mod flow;
pub mod hierarchy;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod reconcile;
pub mod tensorad;
pub mod transformer;

pub use error::{Error, ErrorKind, Result};
pub use hierarchy::{HierarchyTree, PanelSeries};
pub use nalgebra;
