//! Dense tensors and reverse-mode differentiation.
//!
//! Every operation used by the training loss is recorded on a [`Tape`] with
//! an analytic adjoint. Operations are coarse (a whole convolution, a whole
//! splat, a whole compositing pass) so the tape stays short and the hot loops
//! live in plain slices.

mod gradcheck;
mod linear;
mod ops;
mod tape;
mod tensor;
mod volume;

pub use gradcheck::{finite_difference_check, finite_difference_check_with, GradCheckOptions, GradCheckReport};
pub use linear::Activation;
pub use ops::{sigmoid, softplus};
pub use tape::{Adjoint, Gradients, Tape, Var};
pub use tensor::Tensor;
pub use volume::Dims3;
