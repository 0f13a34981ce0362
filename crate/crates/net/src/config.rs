use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    Instance,
}

/// Fixed per-pixel map applied to the normalized echoes before the first
/// convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputTransform {
    Identity,
    /// `ln(x + LOG_OFFSET)`; turns exponential decay into a line.
    Log,
    /// Identity channels followed by log channels.
    Both,
}

pub const LOG_OFFSET: f32 = 0.05;

impl InputTransform {
    pub fn channel_factor(&self) -> usize {
        match self {
            InputTransform::Both => 2,
            _ => 1,
        }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        let log = |v: &f32| (v.max(0.0) + LOG_OFFSET).ln();
        match self {
            InputTransform::Identity => x.to_vec(),
            InputTransform::Log => x.iter().map(log).collect(),
            InputTransform::Both => x.iter().copied().chain(x.iter().map(log)).collect(),
        }
    }
}

/// Architecture of the slice-wise encoder-decoder.
///
/// Output channel 0 is S0 on the normalized intensity scale, channel 1 is
/// R2* in 1/ms. Each channel is `softplus(z) * output_scale[c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of pooling scales.
    pub depth: usize,
    /// Feature channels at full resolution; doubled at each scale.
    pub base_width: usize,
    pub activation: Activation,
    pub output_activation: OutputActivation,
    pub norm: Normalization,
    pub input_transform: InputTransform,
    pub output_scale: Vec<f32>,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 10,
            out_channels: 2,
            depth: 3,
            base_width: 32,
            activation: Activation::Relu,
            output_activation: OutputActivation::Softplus,
            norm: Normalization::None,
            input_transform: InputTransform::Identity,
            output_scale: vec![1.0, 0.05],
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(NetError::Config("depth must be >= 1".into()));
        }
        if self.base_width < 4 {
            return Err(NetError::Config("base_width must be >= 4".into()));
        }
        if self.in_channels < 1 || self.out_channels < 1 {
            return Err(NetError::Config("channel counts must be >= 1".into()));
        }
        if self.output_scale.len() != self.out_channels {
            return Err(NetError::Config(format!(
                "output_scale needs {} entries, found {}",
                self.out_channels,
                self.output_scale.len()
            )));
        }
        if self.output_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(NetError::Config("output_scale entries must be > 0".into()));
        }
        Ok(())
    }

    /// Channels at scale `level` (0 = full resolution, `depth` = bottleneck).
    pub fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial sizes must be multiples of this; inputs are padded to it.
    pub fn stride_multiple(&self) -> usize {
        1 << self.depth
    }
}
