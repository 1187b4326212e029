//! The closed set of differentiable tensor operations the architecture needs.

pub mod conv;
pub mod matmul;
pub mod pointwise;

pub use conv::{
    conv2d, conv2d_backward, conv2d_direct, conv_transpose2d, conv_transpose2d_backward,
    conv_transpose2d_direct, ConvParams,
};
pub use pointwise::{
    elementwise_add, l2norm_scale, l2norm_scale_backward, maxpool2d, maxpool2d_backward, relu,
    relu_backward, softmax_rows,
};
