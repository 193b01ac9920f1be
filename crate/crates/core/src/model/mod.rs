//! The pose regressor: MobileNetV3-style backbone, latent encoders, a
//! translation head and an attention rotation head.

mod checkpoint;
mod config;
mod network;
mod params;
mod plan;

pub use checkpoint::{Checkpoint, LossScales, FORMAT_TAG};
pub use config::{make_divisible, Activation, ArchConfig, BlockKind, BlockSpec, FinalConvSpec, Profile, StemSpec};
pub use network::{ForwardOutput, Inference, Mode, Network};
pub use params::{BoundParams, ModelParams};
pub use plan::{ArchPlan, AttentionPlan, BlockPlan, ConvUnit, HeadPlan, Init, MlpPlan, ParamSpec, SeUnit, Stage};

use thiserror::Error;

use crate::autodiff::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown profile {0:?} (expected mobilenetv3-large, mobilenetv3-small or desk-small)")]
    UnknownProfile(String),
    #[error("layer {layer}: {reason}")]
    Config { layer: String, reason: String },
    #[error("input shape {got:?} does not match the configured {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name} has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
