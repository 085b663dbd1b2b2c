//! Colon-nuclei instance segmentation toolkit: lizard-format NPY I/O,
//! panoptic-quality and count-regression metrics, and a from-scratch
//! MGTUNet (Mish, GroupNorm, transposed convolution) with verified gradients.

pub mod dataset;
pub mod labels;
pub mod metrics;
pub mod mgtunet;
pub mod nn;
pub mod npy;
pub mod synthetic;
