//! Deterministic numerical kernel: dense matrices, feed-forward networks
//! with reverse-mode gradients, AdamW, seeded RNG streams, and column
//! standardization. Everything downstream trains through this module.

mod adamw;
mod linalg;
mod matrix;
mod mlp;
mod rng;
mod scaler;
mod stats;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use linalg::{solve_spd, solve_spd_ridge, weighted_least_squares, RidgeSolve};
pub use matrix::Matrix;
pub use mlp::{
    finite_diff_gradient, gradient_rel_error, Activation, MlpCache, MlpGradients, MlpModel,
};
pub use rng::Rng;
pub use scaler::{ScalarScaler, SdConvention, Standardizer};
pub use stats::{max_abs_offdiagonal, mean, pearson_correlation, sample_sd};
