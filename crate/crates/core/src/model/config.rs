use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 4 frames × 9 bands in, 16 lead-time frames out.
    #[default]
    Default,
    /// 11 channels in, 1 channel out.
    #[serde(rename = "paper-literal")]
    ElevenToOne,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Preset::Default),
            "paper-literal" => Ok(Preset::ElevenToOne),
            other => Err(Error::config(format!(
                "unknown preset `{other}` (expected default or paper-literal)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Depthwise-separable stages with CBAM on every skip.
    #[default]
    SmaAt,
    /// Same topology with standard 3×3 convolutions and no attention; for size comparison.
    BaselineUnet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Encoder widths. The last stage is the bottleneck and runs at half its
    /// nominal width so the first decoder concat sees `2 × widths[3]`.
    pub stage_widths: [usize; 5],
    pub depth_multiplier: usize,
    pub cbam_reduction: usize,
    pub spatial_kernel: usize,
    pub preset: Preset,
    pub architecture: Architecture,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 36,
            out_channels: 16,
            stage_widths: [64, 128, 256, 512, 1024],
            depth_multiplier: 2,
            cbam_reduction: 16,
            spatial_kernel: 7,
            preset: Preset::Default,
            architecture: Architecture::SmaAt,
        }
    }
}

/// Spatial dims are padded to a multiple of this before the four poolings.
pub const SPATIAL_MULTIPLE: usize = 16;

impl ModelConfig {
    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Default => ModelConfig::default(),
            Preset::ElevenToOne => ModelConfig {
                in_channels: 11,
                out_channels: 1,
                preset,
                ..ModelConfig::default()
            },
        }
    }

    /// The standard-convolution comparison network with the same widths.
    pub fn baseline_reference(&self) -> Self {
        ModelConfig {
            architecture: Architecture::BaselineUnet,
            ..self.clone()
        }
    }

    /// Keeps `self`'s channel counts and preset but takes the architecture
    /// knobs (widths, multiplier, attention settings) from `other`.
    pub fn with_widths_of(self, other: &ModelConfig) -> Self {
        ModelConfig {
            stage_widths: other.stage_widths,
            depth_multiplier: other.depth_multiplier,
            cbam_reduction: other.cbam_reduction,
            spatial_kernel: other.spatial_kernel,
            architecture: other.architecture,
            ..self
        }
    }

    /// Channel widths actually produced by the five encoder stages.
    pub fn encoder_channels(&self) -> [usize; 5] {
        let w = self.stage_widths;
        [w[0], w[1], w[2], w[3], w[4] / 2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("in_channels and out_channels must be positive"));
        }
        if self.preset == Preset::ElevenToOne && (self.in_channels, self.out_channels) != (11, 1) {
            return Err(Error::config(
                "preset paper-literal requires in_channels = 11 and out_channels = 1",
            ));
        }
        let w = self.stage_widths;
        if w[0] == 0 || w.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::config(format!(
                "stage widths must be positive and strictly increasing, got {w:?}"
            )));
        }
        if w[4] % 2 != 0 {
            return Err(Error::config(format!("bottleneck width {} must be even", w[4])));
        }
        if self.depth_multiplier == 0 {
            return Err(Error::config("depth_multiplier must be positive"));
        }
        if self.architecture == Architecture::SmaAt {
            if self.cbam_reduction == 0 {
                return Err(Error::config("cbam_reduction must be positive"));
            }
            for c in self.encoder_channels() {
                if c % self.cbam_reduction != 0 {
                    return Err(Error::config(format!(
                        "cbam_reduction {} must divide stage width {c}",
                        self.cbam_reduction
                    )));
                }
            }
            if self.spatial_kernel % 2 == 0 {
                return Err(Error::config("spatial_kernel must be odd"));
            }
        }
        Ok(())
    }
}
