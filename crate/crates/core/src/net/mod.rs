//! Differentiable operation set and the UNet heteroencoder.

pub mod graph;
pub mod ops;
pub mod unet;

pub use graph::{Graph, NodeId};
pub use unet::{
    flat_param_grads, read_checkpoint, unet_forward, unet_forward_lite, write_checkpoint,
    BlockShape, BnParams, CheckpointMeta, ConvParams, Mode, NetworkConfig, NetworkParams,
    UnetForward, UpsampleMode,
};
