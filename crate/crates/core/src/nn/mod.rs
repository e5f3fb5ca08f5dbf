//! Differentiable layers and the five-layer embedding network built from them.

pub mod conv;
pub mod fc;
pub mod l2norm;
pub mod network;
pub mod pool;
pub mod relu;

pub use conv::{conv2d_backward, conv2d_forward, output_extent, ConvGrads};
pub use fc::{fc_backward, fc_forward, FcGrads};
pub use l2norm::{l2_normalize, l2_normalize_backward};
pub use network::{
    init_params, ActivationPattern, ArchitectureConfig, Embedding, ForwardCache, LayerShapes, Network, NetworkParams,
    ParamGroup,
};
pub use pool::{maxpool_backward, maxpool_forward, PoolIndices};
pub use relu::{relu, relu_backward};
