//! Minimal dense tensor engine: GEMM-backed layers with explicit
//! reverse-mode backward passes.

mod layers;
mod params;
mod scalar;
mod tensor;

pub use layers::*;
pub use params::{Init, ParamId, ParamLayout, ParamSet, ParamSpec};
pub use scalar::{fast_exp_f32, matmul, matmul_views, Mat, Scalar, View};
pub use tensor::Tensor;
