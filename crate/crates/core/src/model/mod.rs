//! Conditioning encoders, VQ generators and window discriminators.

mod discriminator;
mod generator;

pub use discriminator::{DiscriminatorConfig, DiscriminatorOutput, MultiScaleDiscriminator, DISC_FEATURE_LAYERS};
pub use generator::{
    nearest_index_map, Generator, ModelConfig, MotionEncoder, VisualEncoder, VqGenerator, MIN_MOTION_FRAMES,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Feature width of the precomputed visual windows.
pub const VISUAL_DIM: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionRepr {
    Keypoints2d,
    Smpl,
}

impl MotionRepr {
    pub fn channels(self) -> usize {
        match self {
            MotionRepr::Keypoints2d => 34,
            MotionRepr::Smpl => 75,
        }
    }
}

/// Per-frame pose channels, `[C_m, T_m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub channels: Array2<f64>,
    pub frame_rate: f64,
    pub representation: MotionRepr,
}

impl MotionSequence {
    pub fn frames(&self) -> usize {
        self.channels.ncols()
    }
}

/// Per-window visual features, `[1024, T_v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatureSequence {
    pub features: Array2<f64>,
}

impl VisualFeatureSequence {
    pub fn zeros(windows: usize) -> Self {
        Self {
            features: Array2::zeros((VISUAL_DIM, windows)),
        }
    }

    pub fn windows(&self) -> usize {
        self.features.ncols()
    }
}

/// Scales `c` down by `div`, keeping at least one channel.
pub(crate) fn width(c: usize, div: usize) -> usize {
    (c / div.max(1)).max(1)
}
