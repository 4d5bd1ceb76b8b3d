//! Tensors, reverse-mode differentiation, and optimization.
//!
//! Everything trains and serves in 64-bit floats; 32-bit floats exist only at
//! the wire boundary. The differentiation machinery is a tensor-level tape
//! over a fixed primitive set (linear, layernorm, elementwise, reductions,
//! softmax cross-entropy, mse, adaptive renormalization, reparameterized
//! gaussian sampling); model code composes those primitives and never
//! hand-writes a backward pass.

pub(crate) mod kernels;
mod optim;
mod rng;
mod store;
mod tape;
mod tensor;

pub use optim::{AdamW, AdamWConfig, PolySchedule};
pub use rng::SeedRng;
pub use store::{ParamBinder, ParamStore};
pub use tape::{tape_allocations, Context, Eval, Gradients, NoTapeGuard, NodeId, Tape};
pub(crate) use tape::fwd_adain;
pub use tensor::Tensor;

/// Failures raised by tensor construction, tape operations, and the optimizer.
#[derive(Debug, Clone, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("normalization over dimension {dim} is degenerate (need >= 2)")]
    DegenerateNorm { dim: usize },
    #[error("adaptive renormalization: content std {sigma:.3e} is below the {min:.0e} floor")]
    DegenerateStats { sigma: f64, min: f64 },
    #[error("backward needs a scalar loss node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("parameter {name:?} missing from store")]
    MissingParam { name: String },
    #[error("parameter {name:?} has shape {got:?}, expected {want:?}")]
    ParamShape { name: String, got: Vec<usize>, want: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Shorthand used by op implementations to reject bad shapes.
pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(NumericsError::Shape { op, detail: detail.into() })
}
