//! Dense tensors, reverse-mode differentiation and optimizers.

mod conv;
mod graph;
mod optim;
mod tensor;

pub use conv::{conv2d_backward, conv2d_forward, ConvGeom};
pub use graph::{Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use tensor::{Real, Tensor};

use thiserror::Error;

/// Default variance guard for batch normalization.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurrogateKind {
    Rectangular,
}

/// Backward window used by `Graph::custom_grad`: gradient 1 on the closed
/// interval `[lower, upper]`, 0 outside.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    pub lower: f64,
    pub upper: f64,
}

impl SurrogateSpec {
    pub fn rectangular(lower: f64, upper: f64) -> Result<Self, NumericsError> {
        if !(lower < upper) {
            return Err(NumericsError::InvalidParameter(format!(
                "surrogate window needs lower < upper, got [{lower}, {upper}]"
            )));
        }
        Ok(Self { kind: SurrogateKind::Rectangular, lower, upper })
    }

    /// Window `[0, d_cap]` of the integer fire function.
    pub fn for_cap(d_cap: u32) -> Self {
        Self { kind: SurrogateKind::Rectangular, lower: 0.0, upper: d_cap as f64 }
    }

    pub fn passes(&self, input: f64) -> bool {
        input >= self.lower && input <= self.upper
    }
}
