//! Masked image modeling with spike sparse convolution.

mod mask;
mod pretrain;
mod sparse;

pub use mask::{make_mask, MaskPlan, SparsityMap};
pub use pretrain::*;
pub use sparse::*;

use thiserror::Error;

use crate::arch::ArchError;
use crate::numerics::NumericsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MimError {
    #[error("image {h}x{w} is not divisible into {p}x{p} patches")]
    Indivisible { h: usize, w: usize, p: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
