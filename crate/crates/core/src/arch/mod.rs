//! Spiking conv and transformer blocks, and model assembly.

mod model;
mod params;
mod spec;

pub use model::{
    build_model, Attention, BnStat, Block, ChannelMixer, ConvBn, ForwardCtx, Head, Model, SepConv, SnSite,
};
pub use params::{Bound, ParamEntry, ParamKind, ParamStore};
pub use spec::{BlockKind, BlockSpec, ModelSpec};

use thiserror::Error;

use crate::neuron::NeuronError;
use crate::numerics::NumericsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArchError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Neuron(#[from] NeuronError),
}

#[cfg(test)]
mod tests;
