//! Differentiable building blocks with explicit forward/backward kernels.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod matrix;
pub mod rng;
pub mod sgd;

pub use gradcheck::{finite_difference_check, relative_error, run_suite, CaseReport, SuiteReport};
pub use layers::{
    apply_dropout, dropout_backward, grad_reverse, relu, relu_backward, sample_dropout_mask,
    DenseGrads, DenseLayer, DropoutMask,
};
pub use loss::{sigmoid, sigmoid_bce, softmax_cross_entropy};
pub use matrix::Matrix;
pub use rng::Rng;
pub use sgd::SgdState;
