//! Minimal f64 tensor engine with hand-written forward and backward passes.

pub mod conv;
pub mod grad_check;
pub mod group_norm;
pub mod loss;
pub mod mish;
pub mod optim;
mod tensor;

use thiserror::Error;

pub use conv::{
    conv2d_backward, conv2d_forward, conv_output_extent, transp_conv2d_backward, transp_conv2d_forward,
    transp_output_extent, Conv2dParams, ConvGrads,
};
pub use grad_check::{grad_check, GradCheckConfig, GradCheckReport};
pub use group_norm::{groupnorm_backward, groupnorm_forward, GroupNormCache, GroupNormGrads, GroupNormParams};
pub use loss::smooth_l1;
pub use mish::{mish_backward, mish_forward};
pub use optim::{optimizer_step, OptimizerKind, OptimizerState, RangerConfig, StepDecay};
pub use tensor::Tensor4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: [usize; 4], right: [usize; 4] },
    #[error("{groups} groups do not divide {channels} channels")]
    GroupMismatch { groups: usize, channels: usize },
}
