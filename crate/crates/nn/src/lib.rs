//! Small CPU tensor kernels for convolutional networks in double precision.
//!
//! Layers are stateless with respect to autodiff: `forward` returns the
//! output and the caller keeps whatever the matching `backward` needs
//! (usually the layer input). Parameter gradients are accumulated into a
//! caller-owned [`ConvParams`] buffer so that frozen networks can be
//! back-propagated through without touching their weights.

mod activation;
mod adam;
mod conv;
mod error;
mod gemm;
mod norm;
mod tensor;

pub use activation::{
    dropout_backward, dropout_forward, global_avg_pool, global_avg_pool_backward, leaky_relu,
    leaky_relu_backward, relu, relu_backward, tanh, tanh_backward, DropoutMask,
};
pub use adam::{Adam, AdamConfig};
pub use conv::{Conv2d, ConvGeom, ConvParams, ConvTranspose2d};
pub use error::NnError;
pub use gemm::gemm;
pub use norm::{instance_norm, instance_norm_backward, InstanceNormCache, INSTANCE_NORM_EPS};
pub use tensor::{Shape, Tensor};

pub type Result<T> = std::result::Result<T, NnError>;
