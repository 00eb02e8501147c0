//! Model hyperparameters, serialized as the sidecar JSON next to each
//! checkpoint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One input branch of the joint embedding: raw scene features (IMG),
/// depthwise cross-correlation against pooled target features (CC), or
/// broadcast subtraction of pooled target features (DIFF).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmbedFeature {
    #[serde(rename = "IMG")]
    Img,
    #[serde(rename = "CC")]
    Cc,
    #[serde(rename = "DIFF")]
    Diff,
}

/// Network shape. The JSON field names are the on-disk sidecar contract;
/// loading rejects configs that fail [`ModelConfig::validate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output channels of each backbone block.
    pub backbone_channels: Vec<usize>,
    /// Total spatial downsampling; a power of two, one 2x2 max pool per
    /// factor of 2, applied in the leading blocks.
    pub backbone_stride: usize,
    /// Enabled embedding branches, fused in fixed IMG, CC, DIFF order.
    pub embed_features: Vec<EmbedFeature>,
    /// Feature width N out of the backbone and the fusion conv; equals the
    /// last backbone channel count and must be even (branches emit N/2).
    pub feature_dim: usize,
    /// Number of target template views T supplied per query.
    pub num_target_views: usize,
    /// Anchor box scales in pixels.
    pub anchor_scales: Vec<f64>,
    /// Anchor aspect ratios (width/height = ratio).
    pub anchor_ratios: Vec<f64>,
    /// Spatial extent of the correlation kernel built from target features:
    /// 1 pools targets to N x 1 x 1 (channelwise scaling); odd k > 1 pools
    /// to N x k x k instead.
    pub cc_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_channels: vec![16, 32, 64, 64],
            backbone_stride: 8,
            embed_features: vec![EmbedFeature::Cc, EmbedFeature::Diff],
            feature_dim: 64,
            num_target_views: 2,
            anchor_scales: vec![16.0, 32.0, 64.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            cc_kernel: 1,
        }
    }
}

impl ModelConfig {
    /// Anchors per feature cell.
    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    /// Number of leading backbone blocks followed by a 2x2 max pool.
    pub fn num_pools(&self) -> usize {
        self.backbone_stride.trailing_zeros() as usize
    }

    pub fn has(&self, f: EmbedFeature) -> bool {
        self.embed_features.contains(&f)
    }

    /// Channels entering the fusion conv: N/2 per correlation/subtraction
    /// branch plus N for the raw passthrough.
    pub fn fusion_input_channels(&self) -> usize {
        let half = self.feature_dim / 2;
        let mut c = 0;
        if self.has(EmbedFeature::Img) {
            c += self.feature_dim;
        }
        if self.has(EmbedFeature::Cc) {
            c += half;
        }
        if self.has(EmbedFeature::Diff) {
            c += half;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.is_empty() {
            return Err(Error::config("backbone_channels must not be empty"));
        }
        if self.backbone_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("backbone channel counts must be positive"));
        }
        if self.backbone_stride == 0 || !self.backbone_stride.is_power_of_two() {
            return Err(Error::config(format!(
                "backbone_stride must be a power of two, got {}",
                self.backbone_stride
            )));
        }
        if self.num_pools() > self.backbone_channels.len() {
            return Err(Error::config(format!(
                "backbone_stride {} needs {} pooling blocks but only {} blocks exist",
                self.backbone_stride,
                self.num_pools(),
                self.backbone_channels.len()
            )));
        }
        if self.embed_features.is_empty() {
            return Err(Error::config("embed_features must not be empty"));
        }
        let mut seen = self.embed_features.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.embed_features.len() {
            return Err(Error::config("embed_features contains duplicates"));
        }
        if self.feature_dim != *self.backbone_channels.last().expect("nonempty") {
            return Err(Error::config(format!(
                "feature_dim {} must equal the last backbone channel count {}",
                self.feature_dim,
                self.backbone_channels.last().expect("nonempty")
            )));
        }
        if self.feature_dim % 2 != 0 {
            return Err(Error::config(format!(
                "feature_dim must be even, got {}",
                self.feature_dim
            )));
        }
        if self.num_target_views == 0 {
            return Err(Error::config("num_target_views must be at least 1"));
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return Err(Error::config("need at least one anchor scale and ratio"));
        }
        if self
            .anchor_scales
            .iter()
            .chain(&self.anchor_ratios)
            .any(|&v| !(v > 0.0) || !v.is_finite())
        {
            return Err(Error::config("anchor scales and ratios must be positive finite"));
        }
        if self.cc_kernel == 0 || self.cc_kernel % 2 == 0 {
            return Err(Error::config(format!(
                "cc_kernel must be odd so correlation preserves extent, got {}",
                self.cc_kernel
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.anchors_per_cell(), 9);
        assert_eq!(c.num_pools(), 3);
        assert_eq!(c.fusion_input_channels(), 64);
    }

    #[test]
    fn fusion_width_with_all_branches() {
        let c = ModelConfig {
            embed_features: vec![EmbedFeature::Img, EmbedFeature::Cc, EmbedFeature::Diff],
            ..ModelConfig::default()
        };
        assert_eq!(c.fusion_input_channels(), 128);
    }

    #[test]
    fn sidecar_json_round_trips_with_exact_keys() {
        let c = ModelConfig::default();
        let json = serde_json::to_string_pretty(&c).unwrap();
        for key in [
            "backbone_channels",
            "backbone_stride",
            "embed_features",
            "feature_dim",
            "num_target_views",
            "anchor_scales",
            "anchor_ratios",
            "cc_kernel",
        ] {
            assert!(json.contains(&format!("\"{key}\"")), "missing {key}");
        }
        assert!(json.contains("\"CC\"") && json.contains("\"DIFF\""));
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig {
            feature_dim: 63,
            backbone_channels: vec![16, 63],
            ..ModelConfig::default()
        };
        c.backbone_stride = 2;
        assert!(c.validate().is_err()); // odd feature_dim

        let c = ModelConfig {
            backbone_stride: 12,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err()); // not a power of two

        let c = ModelConfig {
            backbone_stride: 32,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err()); // more pools than blocks

        let c = ModelConfig {
            embed_features: vec![],
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());

        let c = ModelConfig {
            embed_features: vec![EmbedFeature::Cc, EmbedFeature::Cc],
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());

        let c = ModelConfig {
            cc_kernel: 2,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());

        let c = ModelConfig {
            feature_dim: 32,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err()); // feature_dim != last channel
    }
}
