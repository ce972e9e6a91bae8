//! Numeric core: dense tensors, reverse-mode autodiff, convolution and dense
//! layers, losses, the Adam optimiser and the named-tensor checkpoint format.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the precision for callers that do not care.

pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use checkpoint::{NamedTensors, CHECKPOINT_MAGIC};
pub use conv::ConvGeom;
pub use error::{CoreError, Result};
pub use graph::{Gradients, Graph, Var};
pub use layers::{Conv, Dense, PRelu};
pub use optim::{Adam, Precision, TrainConfig};
pub use params::{ParamId, ParamKind, ParamSet};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamSet32 = ParamSet<f32>;
pub type ParamSet64 = ParamSet<f64>;
