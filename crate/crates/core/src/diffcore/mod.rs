//! Minimal reverse-mode differentiable array substrate: just the operations
//! the encoders, predictors and losses need, plus Adam and a finite-difference
//! gradient checker.

mod adam;
mod gradcheck;
mod graph;
mod init;
mod params;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{grad_check, relative_error, GradCheckEntry, GradCheckOptions, GradCheckReport};
pub use graph::{softmax, softmax_in_place, Axis, Gradients, Graph, Var};
pub use init::kaiming_uniform;
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        dim: String,
        expected: usize,
        found: usize,
    },
    #[error("{op}: expected rank {expected}, found {found}")]
    Rank {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("{0}")]
    Invalid(String),
}
