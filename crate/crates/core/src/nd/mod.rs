//! Dense matrices, reverse-mode differentiation and a finite-difference oracle.

mod gradcheck;
mod matrix;
mod rng;
mod tape;

pub use gradcheck::{grad_check, grad_check_terms, GradCheckReport};
pub use matrix::Matrix;
pub use rng::RngStream;
pub use tape::{cosine_sim, Gradients, Tape, Var};

/// Clamp used for logs, divisions and norms.
pub const EPS: f64 = 1e-12;
