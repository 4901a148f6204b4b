//! Minimal dense linear algebra and calculus utilities shared by every other
//! module.

pub mod gradcheck;
pub mod matrix;
pub mod prob;
pub mod svd;

pub use gradcheck::grad_check;
pub use matrix::Matrix;
pub use prob::{clamped_neg_cosine, kl_divergence, softmax, softmax_unchecked, ProbVector};
pub use svd::{jacobi_svd, reconstruction_error, truncated_svd};
