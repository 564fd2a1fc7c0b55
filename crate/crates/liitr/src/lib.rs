//! Locally interpretable individualized treatment rules.
//!
//! This crate builds subject-specific treatment recommendations out of an
//! opaque outcome model. The pipeline has four stages: train a flexible
//! regression model on observed `(covariates, treatment, outcome)` rows,
//! learn a latent representation of the covariates with a β-VAE, generate
//! realistic perturbed samples around a subject of interest in latent
//! space, then fit a mixture of linear experts with a hard-gating network
//! over those samples. The selected expert's coefficients give a local,
//! human-readable treatment rule for that subject.
//!
//! Module map:
//!
//! - [`numkit`] — dense matrices, feed-forward nets with reverse-mode
//!   gradients, AdamW, seeded RNG streams, column standardization.
//! - [`simgen`] — synthetic benchmark generator with known region-wise
//!   ground truth coefficients and optimal treatments.
//! - [`blackbox`] — the flexible outcome model and the treatment rule it
//!   induces directly.
//! - [`vaegen`] — β-VAE training and per-subject latent perturbation.
//! - [`moe`] — mixture-of-linear-experts surrogate with entropy-penalized
//!   likelihood and straight-through hard gating.
//! - [`baselines`] — LIME-style local surrogate and one-stage linear
//!   Q-learning comparators.
//! - [`eval`] — coefficient bias tables, proportion of optimally treated
//!   subjects, propensity estimation, and the IPW value function.
//! - [`pipeline`] — end-to-end benchmark cell runner shared by the CLI
//!   and the acceptance suite.
//! - [`io`] — dataset CSV and explanation JSON-lines codecs.

pub mod baselines;
pub mod blackbox;
pub mod error;
pub mod eval;
pub mod io;
pub mod moe;
pub mod numkit;
pub mod pipeline;
pub mod simgen;
pub mod vaegen;

pub use error::{Error, Result};
