use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu6,
    HSwish,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// Plain `k x k` convolution.
    Conv,
    /// Depthwise `k x k` followed by a pointwise projection.
    DepthwiseSeparable,
    /// Inverted residual: pointwise expansion, depthwise, optional
    /// squeeze-and-excitation, pointwise projection.
    SeBottleneck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub kernel: usize,
    /// Expansion width (bottleneck only; equal to the input width means no
    /// expansion convolution).
    pub expand: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Defaults to `kernel / 2`.
    #[serde(default)]
    pub padding: Option<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub se: bool,
}

impl BlockSpec {
    pub fn padding(&self) -> usize {
        self.padding.unwrap_or(self.kernel / 2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalConvSpec {
    pub out_channels: usize,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Profile {
    #[serde(rename = "mobilenetv3-large")]
    MobileNetV3Large,
    #[serde(rename = "mobilenetv3-small")]
    MobileNetV3Small,
    #[serde(rename = "desk-small")]
    DeskSmall,
}

impl Profile {
    pub const ALL: [Profile; 3] = [Profile::MobileNetV3Large, Profile::MobileNetV3Small, Profile::DeskSmall];

    pub fn name(self) -> &'static str {
        match self {
            Profile::MobileNetV3Large => "mobilenetv3-large",
            Profile::MobileNetV3Small => "mobilenetv3-small",
            Profile::DeskSmall => "desk-small",
        }
    }

    pub fn config(self) -> ArchConfig {
        match self {
            Profile::MobileNetV3Large => ArchConfig::mobilenet_v3_large(),
            Profile::MobileNetV3Small => ArchConfig::mobilenet_v3_small(),
            Profile::DeskSmall => ArchConfig::desk_small(),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Profile::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| ModelError::UnknownProfile(s.to_string()))
    }
}

/// Layer-by-layer description of the backbone and heads. Drives both the
/// forward pass and the analytic cost model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub profile: Profile,
    /// `(height, width)` of the network input.
    pub input_size: [usize; 2],
    pub stem: StemSpec,
    pub blocks: Vec<BlockSpec>,
    #[serde(default)]
    pub final_conv: Option<FinalConvSpec>,
    /// Convolutions are bias-free and followed by batch normalisation.
    pub batch_norm: bool,
    pub se_reduction: usize,
    /// Squeeze widths are rounded to a multiple of this (1 = no rounding).
    pub se_divisor: usize,
    pub latent_dim: usize,
    /// Every head MLP gets one hidden layer of width `latent_dim` with
    /// h-swish; otherwise each head is a single linear map.
    pub head_hidden_layer: bool,
    pub mha_heads: usize,
    pub mha_embed: usize,
    pub attention_dropout: f64,
}

fn bneck(kernel: usize, expand: usize, out: usize, se: bool, act: Activation, stride: usize) -> BlockSpec {
    BlockSpec {
        kind: BlockKind::SeBottleneck,
        kernel,
        expand,
        out_channels: out,
        stride,
        padding: None,
        activation: act,
        se,
    }
}

const RE: Activation = Activation::Relu6;
const HS: Activation = Activation::HSwish;

impl ArchConfig {
    /// MobileNetV3-Large at 224 x 224, outdoor latent width.
    pub fn mobilenet_v3_large() -> Self {
        Self {
            profile: Profile::MobileNetV3Large,
            input_size: [224, 224],
            stem: StemSpec { out_channels: 16, kernel: 3, stride: 2, activation: HS },
            blocks: vec![
                bneck(3, 16, 16, false, RE, 1),
                bneck(3, 64, 24, false, RE, 2),
                bneck(3, 72, 24, false, RE, 1),
                bneck(5, 72, 40, true, RE, 2),
                bneck(5, 120, 40, true, RE, 1),
                bneck(5, 120, 40, true, RE, 1),
                bneck(3, 240, 80, false, HS, 2),
                bneck(3, 200, 80, false, HS, 1),
                bneck(3, 184, 80, false, HS, 1),
                bneck(3, 184, 80, false, HS, 1),
                bneck(3, 480, 112, true, HS, 1),
                bneck(3, 672, 112, true, HS, 1),
                bneck(5, 672, 160, true, HS, 2),
                bneck(5, 960, 160, true, HS, 1),
                bneck(5, 960, 160, true, HS, 1),
            ],
            final_conv: Some(FinalConvSpec { out_channels: 960, activation: HS }),
            batch_norm: true,
            se_reduction: 4,
            se_divisor: 8,
            latent_dim: 256,
            head_hidden_layer: false,
            mha_heads: 7,
            mha_embed: 49,
            attention_dropout: 0.0025,
        }
    }

    /// MobileNetV3-Small at 224 x 224, outdoor latent width.
    pub fn mobilenet_v3_small() -> Self {
        Self {
            profile: Profile::MobileNetV3Small,
            input_size: [224, 224],
            stem: StemSpec { out_channels: 16, kernel: 3, stride: 2, activation: HS },
            blocks: vec![
                bneck(3, 16, 16, true, RE, 2),
                bneck(3, 72, 24, false, RE, 2),
                bneck(3, 88, 24, false, RE, 1),
                bneck(5, 96, 40, true, HS, 2),
                bneck(5, 240, 40, true, HS, 1),
                bneck(5, 240, 40, true, HS, 1),
                bneck(5, 120, 48, true, HS, 1),
                bneck(5, 144, 48, true, HS, 1),
                bneck(5, 288, 96, true, HS, 2),
                bneck(5, 576, 96, true, HS, 1),
                bneck(5, 576, 96, true, HS, 1),
            ],
            final_conv: Some(FinalConvSpec { out_channels: 576, activation: HS }),
            batch_norm: true,
            se_reduction: 4,
            se_divisor: 8,
            latent_dim: 256,
            head_hidden_layer: false,
            mha_heads: 7,
            mha_embed: 49,
            attention_dropout: 0.0025,
        }
    }

    /// Four squeeze-and-excitation bottlenecks on a 64 x 64 input ending in
    /// a 64 x 7 x 7 feature map, so the attention head keeps a width of 49.
    pub fn desk_small() -> Self {
        let mut b3 = bneck(3, 64, 32, true, RE, 2);
        b3.padding = Some(0);
        Self {
            profile: Profile::DeskSmall,
            input_size: [64, 64],
            stem: StemSpec { out_channels: 16, kernel: 3, stride: 2, activation: HS },
            blocks: vec![
                bneck(3, 32, 16, true, RE, 2),
                b3,
                bneck(3, 96, 48, true, HS, 1),
                bneck(3, 128, 64, true, HS, 1),
            ],
            final_conv: None,
            batch_norm: false,
            se_reduction: 4,
            se_divisor: 1,
            latent_dim: 32,
            head_hidden_layer: true,
            mha_heads: 7,
            mha_embed: 49,
            attention_dropout: 0.0025,
        }
    }

    /// Squeeze width for an SE block over `channels`.
    pub fn se_squeeze(&self, channels: usize) -> usize {
        make_divisible(channels / self.se_reduction.max(1), self.se_divisor.max(1))
    }
}

/// Rounds to the nearest multiple of `divisor` without dropping more than
/// 10% below `value`.
pub fn make_divisible(value: usize, divisor: usize) -> usize {
    if divisor <= 1 {
        return value.max(1);
    }
    let rounded = ((value + divisor / 2) / divisor * divisor).max(divisor);
    if (rounded as f64) < 0.9 * value as f64 {
        rounded + divisor
    } else {
        rounded
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn make_divisible_matches_reference_rounding() {
        assert_eq!(make_divisible(72 / 4, 8), 24);
        assert_eq!(make_divisible(120 / 4, 8), 32);
        assert_eq!(make_divisible(16 / 4, 8), 8);
        assert_eq!(make_divisible(960 / 4, 8), 240);
        assert_eq!(make_divisible(96 / 4, 8), 24);
        assert_eq!(make_divisible(10, 1), 10);
    }

    #[test]
    fn profile_names_round_trip() {
        for p in Profile::ALL {
            assert_eq!(p.name().parse::<Profile>().unwrap(), p);
        }
        assert!("resnet".parse::<Profile>().is_err());
    }

    #[test]
    fn config_serialises() {
        let c = ArchConfig::desk_small();
        let s = serde_json::to_string(&c).unwrap();
        let back: ArchConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
