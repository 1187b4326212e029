//! MDSSD: a multi-scale deconvolutional single-shot detector built from
//! scratch — hand-written convolution kernels, reverse-mode autodiff, fusion
//! blocks that merge upsampled deep feature maps with shallow ones, multibox
//! training, and size-stratified evaluation on a synthetic small-object
//! dataset.

pub mod autograd;
pub mod error;
pub mod ops;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
