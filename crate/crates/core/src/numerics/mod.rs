//! Differentiable computation substrate.
//!
//! Dense `f64` tensors, a define-by-run reverse-mode graph, named parameter
//! collections, a central-difference gradient oracle, Adam/SGD, and a
//! seeded ChaCha8 generator. Everything above this module builds its
//! forward and backward passes from these pieces.

mod graph;
mod optim;
mod params;
mod rng;
mod tensor;

pub use graph::{CustomOp, Graph, NodeGrads, NonFiniteSite, Var};
pub use optim::{OptimizerKind, OptimizerState};
pub use params::{
    compare_gradients, compare_gradients_with_floor, evaluate, evaluate_with_gradients, finite_difference_gradient,
    gradient_check, Bound, GradientCheck, GradientComparison, Gradients, ModelParams, Parameter, GRADCHECK_FLOOR,
    GRADCHECK_STEP,
};
pub use rng::{sample_standard_normal, RngState, SeededRng, RNG_ALGORITHM};
pub use tensor::Tensor;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
}
