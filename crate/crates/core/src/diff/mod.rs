//! A small reverse-mode differentiation kernel.
//!
//! A [`Graph`] records one forward pass over [`Tensor`] values. Trainable
//! leaves live in a [`ParamStore`] so they survive across graphs.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{finite_difference_check, GradCheck};
pub use graph::{Graph, NodeId};
pub use params::{ParamStore, Parameter};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DiffError {
    #[error("rank {0} exceeds the supported maximum of 3")]
    Rank(usize),
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("expected a one-element tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}: softmax over an empty axis")]
    EmptyAxis(&'static str),
    #[error("divisor must be positive, got {0}")]
    NonPositiveDivisor(f64),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("backward called before any forward op was recorded")]
    NoForward,
    #[error("loss builder is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
}
