//! Dense tensors, tape-based reverse-mode differentiation, Adam, and the
//! convolutional building blocks used by the dynamics and segmentation models.

pub mod checkpoint;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_gradcheck, GradCheckConfig, GradCheckReport};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use kernels::roi::Roi;
pub use nn::{Backbone, BackboneSpec, Mode, NormKind, NormSpec};
pub use optim::{cosine_lr, AdamConfig, Param, ParameterSet};
pub use tensor::Tensor;
