//! Differentiable tensor kernels. Every op records itself on a [`Tape`](crate::autograd::Tape)
//! and rejects non-finite outputs.

pub mod activation;
pub mod conv;
pub mod elementwise;
pub mod norm;
pub mod resample;

pub use activation::{activation, gelu, sigmoid, silu, Activation};
pub use conv::{conv2d, conv_out_size, ConvParams};
pub use elementwise::{
    add, concat_batch, concat_channels, droppath, elementwise, global_avg_pool, mul, mul_channel, scale,
    slice_batch, slice_channels, split_pair, sum_all, Binary,
};
pub use norm::{normalize, NormKind, NormParams, DEFAULT_EPS, DEFAULT_MOMENTUM};
pub use resample::{bilinear, maxpool2, resample, Resample};
