//! Forward and backward passes for the network's layer kinds: 3D convolution,
//! rectifier, 2x2x2 max-pooling, transposed convolution and two-class softmax.

mod activation;
mod conv;
mod pool;

pub use activation::{
    nll, relu_backward, relu_forward, softmax_forward, softmax_nll_backward, LOG_FLOOR,
};
pub use conv::{
    conv3d_backward, conv3d_backward_input, conv3d_backward_params, conv3d_forward,
    deconv3d_backward, deconv3d_forward, ConvGrads, ConvSpec, DeconvGrads, DeconvSpec, Geometry,
    Triple,
};
pub use pool::{maxpool3d_backward, maxpool3d_forward, PoolRecord};
