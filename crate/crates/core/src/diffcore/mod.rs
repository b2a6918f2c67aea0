//! Dense `f64` tensors with tape-based reverse-mode differentiation for the
//! operator set used by the network: convolution, pooling, bilinear
//! upsampling, affine maps, activations, softmax, and the training losses.

mod archive;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use archive::TensorArchive;
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Activation, Graph, Penalty, Var};
pub use tensor::Tensor;
