//! MGTUNet: a UNet-style encoder/decoder built from Mish, GroupNorm and
//! transposed-convolution blocks.
//!
//! Encoder: four stages of `ConvBlock -> ConvPool`. A ConvBlock is two
//! `conv3x3(s=1,p=1) -> Mish -> GN` units, a ConvPool one such unit with
//! stride 2. Each ConvPool doubles the channel count, so with base width `w`
//! the stages run at `w, 2w, 4w, 8w` channels and the bottleneck holds `16w`.
//!
//! Decoder: four `TranspConvBlock`s (`transp-conv 2x2 s=2 -> GN`), each
//! optionally concatenated with the output of the matching encoder ConvBlock,
//! two ConvBlocks and a final 1x1 convolution to `C + 1` channels (index 0 is
//! background).

mod check;
mod decode;
mod network;
mod train;
mod weights;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::LabelError;
use crate::nn::NnError;

pub use check::{full_suite, network_grad_check, NetCase, NETWORK_CASES, NETWORK_TOL_FACTOR};
pub use decode::{argmax_classes, connected_components, decode_instances, images_to_tensor, targets_from_labels, DEFAULT_MIN_SIZE};
pub use network::{Network, Tape};
pub use train::{train, TrainConfig, TrainError, TrainOutcome};
pub use weights::{load_weights, save_weights, WeightRecord, WeightStore, WEIGHT_FORMAT_VERSION, WEIGHT_MAGIC};

/// Spatial downsampling factor between input and bottleneck.
pub const DOWNSAMPLE: usize = 16;

#[derive(Debug, Error)]
pub enum MgtError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("weight file: {0}")]
    VersionMismatch(String),
    #[error("weight path mismatch: expected {expected:?}, found {found:?}")]
    PathMismatch { expected: String, found: String },
    #[error("weight file truncated or malformed: {0}")]
    Parse(String),
}

/// Where the decoder's two ConvBlocks sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderLayout {
    /// Both after the fourth TranspConvBlock.
    Stacked,
    /// One after each of the last two TranspConvBlocks.
    Interleaved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Channels of the first ConvBlock.
    pub base_width: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    pub group_count: usize,
    pub skip_connections: bool,
    pub layout: DecoderLayout,
    /// Input (height, width); both must be multiples of 16.
    pub input_extent: (usize, usize),
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            num_classes: 6,
            input_channels: 3,
            group_count: 8,
            skip_connections: true,
            layout: DecoderLayout::Stacked,
            input_extent: (256, 256),
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn output_channels(&self) -> usize {
        self.num_classes + 1
    }

    pub fn validate(&self) -> Result<(), MgtError> {
        let (h, w) = self.input_extent;
        if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(MgtError::Config(format!(
                "input extent {h}x{w} must be a positive multiple of {DOWNSAMPLE}"
            )));
        }
        if self.group_count == 0 || self.base_width < self.group_count {
            return Err(MgtError::Config(format!(
                "base width {} must be at least the group count {}",
                self.base_width, self.group_count
            )));
        }
        if self.base_width % self.group_count != 0 {
            return Err(MgtError::Config(format!(
                "group count {} must divide base width {}",
                self.group_count, self.base_width
            )));
        }
        if self.input_channels == 0 || self.num_classes == 0 {
            return Err(MgtError::Config("input channels and classes must be positive".into()));
        }
        Ok(())
    }

    /// Module census in forward order.
    pub fn block_specs(&self) -> Vec<BlockSpec> {
        let w = self.base_width;
        let mut specs = Vec::new();
        let mut channels = self.input_channels;
        for stage in 0..4 {
            let width = w << stage;
            specs.push(BlockSpec::new(BlockKind::ConvBlock, channels, width));
            specs.push(BlockSpec::new(BlockKind::ConvPool, width, 2 * width));
            channels = 2 * width;
        }
        for stage in (0..4).rev() {
            let width = w << stage;
            specs.push(BlockSpec::new(BlockKind::TranspConvBlock, channels, width));
            channels = if self.skip_connections { 2 * width } else { width };
            let block_here = match self.layout {
                DecoderLayout::Stacked => stage == 0,
                DecoderLayout::Interleaved => stage <= 1,
            };
            if block_here {
                let blocks = match self.layout {
                    DecoderLayout::Stacked => 2,
                    DecoderLayout::Interleaved => 1,
                };
                for _ in 0..blocks {
                    specs.push(BlockSpec::new(BlockKind::ConvBlock, channels, width));
                    channels = width;
                }
            }
        }
        specs.push(BlockSpec::new(BlockKind::FinalConv, channels, self.output_channels()));
        specs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    ConvBlock,
    ConvPool,
    TranspConvBlock,
    FinalConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind,
            in_channels,
            out_channels,
        }
    }

    /// Trainable scalars in this block.
    pub fn param_count(&self) -> usize {
        let (i, o) = (self.in_channels, self.out_channels);
        let conv = |cin: usize, k: usize| o * cin * k * k + o;
        let norm = 2 * o;
        match self.kind {
            BlockKind::ConvBlock => conv(i, 3) + norm + conv(o, 3) + norm,
            BlockKind::ConvPool => conv(i, 3) + norm,
            BlockKind::TranspConvBlock => conv(i, 2) + norm,
            BlockKind::FinalConv => conv(i, 1),
        }
    }
}
