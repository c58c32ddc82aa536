//! Minimal reverse-mode automatic differentiation over dense tensors.

mod adam;
mod gradcheck;
mod graph;
pub mod ops;
mod param;
mod scalar;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, Moments};
pub use gradcheck::{gradcheck, relative_error, GradcheckConfig, GradcheckReport, ParamCheck};
pub use graph::{BatchStats, Gradients, Graph, Mode, NodeId, Op};
pub use ops::{Activation, BatchNormConfig, RunningStats};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;
