//! Dense `f64` tensors and a reverse-mode tape over the operation set the
//! pose regressor needs.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_at, relative_error};
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: kernel {weight:?} does not fit input {input:?} (stride {stride}, padding {padding})")]
    KernelDoesNotFit {
        op: &'static str,
        input: Vec<usize>,
        weight: Vec<usize>,
        stride: usize,
        padding: usize,
    },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("batch statistics need at least 2 samples, got {n}")]
    BatchTooSmall { n: usize },
    #[error("vector norm {norm:e} is too small to normalise")]
    DegenerateNorm { norm: f64 },
    #[error("embedding width {embed} is not divisible by {heads} heads")]
    HeadsDoNotDivide { embed: usize, heads: usize },
}
