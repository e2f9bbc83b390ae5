//! Quantization-aware training with learnable per-layer weight bitwidths for
//! U-Net segmentation, plus an integer-only inference runtime for the
//! exported models.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod loss;
pub mod model;
pub mod ops;
pub mod pack;
pub mod quant;
pub mod runtime;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Gradients, Tape, Var};
pub use loss::LossBreakdown;
pub use model::{LayerKind, QuantLayer, QuantUNet, UNetConfig};
pub use quant::{ActQuantState, QuantMeta, QuantParams};
pub use runtime::{IntModel, SizeReport};
pub use tensor::{Precision, Scalar, Tensor};
pub use trainer::{EpochMetrics, FitResult, TrainConfig};
