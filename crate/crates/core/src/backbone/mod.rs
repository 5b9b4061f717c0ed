//! Sparse ResNet encoder and its convolution kernels.

pub mod conv;
mod network;

pub use conv::{
    conv_grid, dense_conv2d, dilate_mask, max_pool_grid, relu_in_place, sparse_conv2d, sparse_max_pool, ConvMode,
    ConvSpec, FeatureGrid,
};
pub use network::{
    conv_slots, init_random, parameter_shapes, store_is_quantized, Arch, Backbone,
    BackboneConfig, BackboneOutput, ConvSlot, ExecMode, BN_EPS,
};
