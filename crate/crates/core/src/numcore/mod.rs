//! Dense `f64` tensors, the handful of forward ops the model needs, their
//! hand-written backward passes, and a finite-difference gradient checker.

mod gradcheck;
pub mod ops;
mod params;
pub mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_report, relative_error, GradCheckReport};
pub use ops::{
    cross_entropy, gelu, gelu_grad, linear, linear_backward, matmul, matmul_nt, matmul_tn,
    rms_norm, rms_norm_backward, softmax, softmax_backward_slice, softmax_rows, softmax_slice,
};
pub use params::Params;
pub use rng::{seeded, SeededRng, INIT_STD};
pub use tensor::Tensor;
