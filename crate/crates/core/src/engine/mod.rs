//! Training loops, the three inference executors and their equivalence check.

mod data;
mod equiv;
mod exec;
mod net;
mod train;

use thiserror::Error;

use crate::arch::ArchError;
use crate::neuron::NeuronError;
use crate::numerics::NumericsError;

pub use data::*;
pub use equiv::*;
pub use exec::*;
pub use net::*;
pub use train::*;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Neuron(#[from] NeuronError),
    #[error("loss became non-finite at step {step} ({loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("event queue of {node} overflowed: peak {peak} events, capacity {capacity}")]
    QueueOverflow { node: String, peak: usize, capacity: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("equivalence check failed: {0}")]
    Mismatch(String),
}

/// Which executor runs a compiled network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExecutionMode {
    Integer,
    SyncExpanded,
    AsyncEvent,
}

impl ExecutionMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "integer" => Some(Self::Integer),
            "sync" | "sync_expanded" => Some(Self::SyncExpanded),
            "async" | "async_event" => Some(Self::AsyncEvent),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Integer => "integer",
            Self::SyncExpanded => "sync",
            Self::AsyncEvent => "async",
        }
    }
}
