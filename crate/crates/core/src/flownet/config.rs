use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel widths of one block's hourglass module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockWidths {
    /// Output channels of the first stride-2 stem convolution.
    pub stem_channels: usize,
    /// Width of the residual trunk at 1/4 of the block resolution.
    pub group_channels: usize,
    /// Output channels of the two transposed convolutions.
    pub deconv_channels: [usize; 2],
}

impl BlockWidths {
    pub const fn uniform(channels: usize) -> Self {
        Self {
            stem_channels: channels,
            group_channels: channels,
            deconv_channels: [channels, channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `x * sigmoid(x)`.
    Silu,
}

/// Architecture hyperparameters of the three-scale flow network.
///
/// Default widths (parameter count 5,089,686):
///
/// | block    | stem | trunk | deconv  | trunk groups             |
/// |----------|------|-------|---------|--------------------------|
/// | base     | 32   | 128   | 64, 32  | IB k7, IB k5, 3x3, 3x3   |
/// | refine 1 | 32   | 103   | 50, 25  | 3x3, 3x3, 3x3, 3x3       |
/// | refine 2 | 32   | 103   | 50, 25  | 3x3, 3x3, 3x3, 3x3       |
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub base: BlockWidths,
    pub refine: [BlockWidths; 2],
    /// Channel expansion inside the inverted-bottleneck groups.
    pub expansion_rate: usize,
    /// Kernel sizes of the two inverted-bottleneck groups of the base block.
    pub base_kernel_sizes: [usize; 2],
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        let refine = BlockWidths {
            stem_channels: 32,
            group_channels: 103,
            deconv_channels: [50, 25],
        };
        Self {
            base: BlockWidths {
                stem_channels: 32,
                group_channels: 128,
                deconv_channels: [64, 32],
            },
            refine: [refine, refine],
            expansion_rate: 2,
            base_kernel_sizes: [7, 5],
            activation: Activation::Silu,
        }
    }
}

impl NetConfig {
    /// Every block uses `channels` everywhere; handy for tests and small runs.
    pub fn uniform(base: usize, refine: usize) -> Self {
        Self {
            base: BlockWidths::uniform(base),
            refine: [BlockWidths::uniform(refine); 2],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = std::iter::once(&self.base).chain(self.refine.iter());
        for b in blocks {
            if b.stem_channels == 0 || b.group_channels == 0 || b.deconv_channels.contains(&0) {
                return Err(Error::Config(format!("zero channel width in {b:?}")));
            }
        }
        if self.expansion_rate != 2 {
            return Err(Error::Config(format!(
                "expansion_rate is fixed at 2, got {}",
                self.expansion_rate
            )));
        }
        if self.base_kernel_sizes.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("base kernel sizes must be odd".into()));
        }
        Ok(())
    }
}

/// Spatial scales of the base block and the two refinement blocks, relative to the input.
pub const BLOCK_SCALES: [f64; 3] = [0.25, 0.5, 1.0];

/// Inputs are padded so both sides are multiples of this.
pub const PAD_MULTIPLE: usize = 32;

/// Input channels of a base module: two RGB frames and the time-step plane.
pub const BASE_INPUT_CHANNELS: usize = 7;
/// Input channels of a refinement module: two RGB frames, two prior flows and the prior mask.
pub const REFINE_INPUT_CHANNELS: usize = 11;
/// Output channels of every module: two flows and one mask logit.
pub const MODULE_OUTPUT_CHANNELS: usize = 5;
