//! Dense matrix math with reverse-mode gradients.

mod gradcheck;
mod matrix;
pub mod ops;
mod tape;

pub use gradcheck::{central_difference, grad_check, max_relative_error, DEFAULT_STEP};
pub use matrix::Matrix;
pub use ops::{
    concat_cols, cosine_sim, gelu, layer_norm_row, mat_mul, row_l2_normalize, row_softmax,
    Activation, Cosine, Normalized,
};
pub use tape::{DiffValue, Gradients, Tape};
