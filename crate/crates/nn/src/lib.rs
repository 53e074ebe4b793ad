//! Minimal reverse-mode automatic differentiation over dense row-major
//! tensors, plus the handful of layers the duotts models are built from.

mod float;
pub mod gradcheck;
mod graph;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use float::Float;
pub use graph::{rope_apply, CustomOp, Gradients, Graph, Lookup, Var};
pub use optim::Adam;
pub use params::{read_checkpoint, write_checkpoint, write_params, Checkpoint, CheckpointError, ParamId, Params};
pub use tensor::{gemm_into, matmul, Tensor};
