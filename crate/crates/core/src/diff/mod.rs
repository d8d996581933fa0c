//! Dense `f64` tensors, a reverse-mode tape, Adam, and the checkpoint container.

mod adam;
mod checkpoint;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, Adam, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS};
pub use checkpoint::{TensorArchive, MAGIC};
pub use graph::{Axis, Conv2dSpec, Elementwise, Gradients, Graph, Resample, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got {got}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("avg_down2 needs even dimensions, got {h}x{w}")]
    OddDimensions { h: usize, w: usize },
    #[error("texture coordinate ({u}, {v}) outside [0, 1] at a covered pixel")]
    CoordOutOfRange { u: f64, v: f64 },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
