//! Small reverse-mode engine for the U-Net style networks: convolutions,
//! batch norm, ReLU, pooling, skip concatenation and Adam.

mod adam;
mod graph;
pub mod ops;
mod scalar;
mod tensor;

pub use adam::{adam_step, adam_step_net, OptimState, PLATEAU_FACTOR, PLATEAU_PATIENCE};
pub use graph::{attach_bridge, build_backbone, Gradients, Layer, NetworkGraph, Node, NodeId, Param, Skip, Trace};
pub use ops::{BnState, Mode};
pub use scalar::Scalar;
pub use tensor::Tensor;
