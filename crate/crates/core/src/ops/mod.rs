//! Numerical kernels on [`Tensor`](crate::tensor::Tensor)s. Each forward
//! kernel has a matching backward used by the autograd tape.

pub mod conv;
pub mod deform;
pub mod norm;
pub mod resample;

pub use conv::{conv2d, conv2d_backward, ConvSpec};
pub use deform::{bilinear, deform_conv2d, deform_conv2d_backward};
pub use resample::{pixel_shuffle, upsample2x};
