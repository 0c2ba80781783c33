//! Dense tensors, elementwise nonlinearities and the finite-difference
//! gradient oracle used to check every hand-written vector-Jacobian product.

mod gradcheck;
mod linalg;
mod ops;
mod tensor;
pub mod tns;

pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error, Dual, FD_STEP};
pub use linalg::matmul;
pub(crate) use linalg::{gemm, gemm_nt, gemm_tn};
pub use ops::{
    gelu, gelu_grad_scalar, gelu_scalar, l2_normalize, sigmoid, softmax, softmax_slice, tanh,
    L2_EPS,
};
pub use tensor::{Dtype, Real, Tensor};
