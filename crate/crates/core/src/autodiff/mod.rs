//! Reverse-mode differentiation engine, Adam optimiser and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod graph;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use conv::ConvGeom;
pub use graph::{Conv2dConfig, Graph, GruWeights, Var};
pub use tensor::{ParamId, ParamSet, Tensor};
