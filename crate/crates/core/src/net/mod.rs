//! The deeply supervised 3D fully convolutional network.
//!
//! Mainstream: six convolutions (ReLU after each) with 2x2x2 max-pools after
//! conv1 and conv3, two stride-2 transposed convolutions back to input
//! resolution, then a 1x1x1 two-class scoring layer and softmax. Branch heads
//! tap hidden convolutions, upsample them to input resolution and score them
//! the same way; their losses enter the objective with weights `eta_d`.

mod checkpoint;
mod config;
mod model;
mod params;

pub use checkpoint::{
    config_digest, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC,
    VERSION,
};
pub use config::{ArchitectureConfig, ConvLayerConfig, LayerKind, TOTAL_LAYERS};
pub use model::{
    argmax_labels, backward, conv_activations, forward, loss_aux, loss_main, loss_total, Eta,
    LossBreakdown, ProbMap,
};
pub use params::{
    build_network, build_network_with_init, build_network_with_sigma, BranchParams, ConvParams, Init,
    NetworkParams, INIT_SIGMA,
};
