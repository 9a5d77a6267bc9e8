use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frozen image backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    /// Dilated 50-layer residual network; conv1..layer3, stride 8, the
    /// layer2 and layer3 outputs concatenated (512 + 1024 channels).
    ResNet50,
    /// Three strided 3×3 convolutions (16, 32, 32 channels) with the last two
    /// stages concatenated at stride 8. Desk-scale runs and tests.
    Tiny,
}

impl BackboneVariant {
    pub fn out_channels(self) -> usize {
        match self {
            BackboneVariant::ResNet50 => 512 + 1024,
            BackboneVariant::Tiny => 32 + 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneVariant,
    /// Channel width `C` of the reduced features, support vector and click vector.
    pub feature_channels: usize,
    /// Square spatial sizes of the parallel query-path scales; `n = len()`.
    pub query_bins: Vec<usize>,
    /// Halving stages in the support encoder.
    pub pooling_depth: usize,
    /// First-level width of the support U-Net; doubles at each pooling stage.
    pub support_base_channels: usize,
    pub input_patch: usize,
    pub click_disk_radius: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneVariant::ResNet50,
            feature_channels: 256,
            query_bins: vec![60, 30, 15, 8],
            pooling_depth: 3,
            support_base_channels: 64,
            input_patch: 512,
            click_disk_radius: 5,
        }
    }
}

/// Spatial stride of backbone features relative to the input.
pub const FEATURE_STRIDE: usize = 8;

impl ModelConfig {
    /// Small configuration for tests and desk-scale experiments.
    pub fn tiny(feature_channels: usize, query_bins: Vec<usize>, input_patch: usize) -> Self {
        Self {
            backbone: BackboneVariant::Tiny,
            feature_channels,
            query_bins,
            pooling_depth: 3,
            support_base_channels: 16,
            input_patch,
            click_disk_radius: 3,
        }
    }

    pub fn num_query_scales(&self) -> usize {
        self.query_bins.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_channels == 0 || self.support_base_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.pooling_depth != 3 {
            return Err(Error::Config(format!(
                "pooling_depth must be 3 (8x encoder reduction), got {}",
                self.pooling_depth
            )));
        }
        if self.query_bins.is_empty() || self.query_bins.contains(&0) {
            return Err(Error::Config("need at least one positive query scale".into()));
        }
        if self.input_patch == 0 || self.input_patch % (1 << self.pooling_depth) != 0 {
            return Err(Error::Config(format!(
                "input_patch {} must be a positive multiple of {}",
                self.input_patch,
                1 << self.pooling_depth
            )));
        }
        Ok(())
    }
}
