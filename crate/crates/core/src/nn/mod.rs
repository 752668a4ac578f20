//! Minimal dense-tensor kernels and the seeded parameter store.

pub mod kernels;
pub mod layers;
pub mod params;
pub mod rng;
pub mod tensor;

pub use kernels::{
    batch_norm_inference, bilinear_sample, conv3d, conv3d_restricted, layer_norm, linear, relu,
    softmax, softmax_f64, NORM_EPS,
};
pub use layers::{BatchNormParams, Conv3dParams, LayerNormParams, Linear};
pub use params::{seeded_init, seeded_uniform, Init, ParamSpec, ParameterStore, Registry};
pub use rng::SplitMix64;
pub use tensor::{FeatureMap, FeatureVolume, Tensor};
