//! A small reverse-mode tensor engine.
//!
//! Values live on a [`Tape`]; each operation is a whole-tensor kernel with a
//! hand-written backward rule. The engine is generic over [`Scalar`] so the
//! same model code runs in `f32` for training and `f64` for gradient checks.

mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckReport, FALLBACK_STEPS, FD_STEP, REL_ERROR_FLOOR};
pub use scalar::{gemm, Scalar};
pub use tape::{
    hash_uniform, sigmoid, BatchStats, Gradients, NormMode, SparseMatrix, Tape, Var, BATCH_NORM_EPS,
    PROB_CLAMP,
};
pub use tensor::Tensor;
