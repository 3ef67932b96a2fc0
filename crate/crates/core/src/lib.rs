//! Debiasing imputed stochastic gradients under missing covariates.
//!
//! Covariates go missing under a known (or estimated) per-column intensity
//! `lambda_j(v) = p_j * q_j(v)`; training proceeds on imputed data. Plain
//! imputed gradients carry an O(|p|) bias. This crate removes the leading
//! bias orders by Richardson extrapolation across artificially *more* masked
//! copies of the same rows: a thinning step rescales the missingness
//! intensity by known factors, the same imputation rule is applied once at
//! the most-masked level and shared downward, and a weighted combination of
//! the per-level gradients cancels bias terms order by order.
//!
//! The crate is organised around two strategy registries:
//! imputation rules ([`imputation`]) and gradient estimators
//! ([`estimators`]), both selected by name at runtime. [`bias_oracle`]
//! computes exact (enumerated) gradient biases for small missingness
//! supports and is the reference every estimator is tested against.

pub mod bias_oracle;
pub mod data;
pub mod error;
pub mod estimators;
pub mod glm;
pub mod imputation;
pub mod mech_estimation;
pub mod mechanisms;
pub mod numerics;
pub mod preprocess;
pub mod richardson;
pub mod rng;
pub mod sgd;
pub mod synth;
pub mod verification;

pub use error::{Error, Result};
