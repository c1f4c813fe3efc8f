//! Cluster-weighted functional linear regression.
//!
//! Paired curves `(X_i, Y_i)` are smoothed onto finite bases and clustered in
//! coefficient space by a mixture whose components combine a low-dimensional
//! Gaussian subspace model for the predictor with a Gaussian linear regression
//! of the response on the predictor.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod cli;
pub mod covariance;
pub mod em;
pub mod error;
pub mod matrix_serde;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
