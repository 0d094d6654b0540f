//! Tape-based reverse-mode differentiation and the Adam optimiser.
//!
//! Every trainable quantity lives in a [`ParamStore`]. A forward pass records onto a
//! fresh [`Tape`]; [`Tape::backward`] returns gradients keyed by [`ParamId`], which
//! [`Adam::step`] applies to the subset of ids being trained.

mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use kernels::{dot, squared_distance};
pub use optim::{Adam, AdamConfig};
pub use params::{xavier_uniform, ParamId, ParamStore, Parameter};
pub use tape::{stable_sigmoid, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("non-finite gradient for parameter {param} ({name}) at flat index {index}")]
    NonFinite { param: u32, name: String, index: usize },
    #[error("invalid optimiser configuration: {0}")]
    Config(String),
}
