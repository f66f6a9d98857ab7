//! Nonparametric estimation of labor-market matching functions, latent matching
//! efficiency, matching elasticities and the mismatch index, with a Monte Carlo harness
//! for Cobb-Douglas misspecification bias.
//!
//! The pipeline is
//!
//! 1. [`data`]: load a `(market_id, period, hires, unemployed, vacancies)` panel,
//!    scale it to mean one and pick the normalization base point;
//! 2. [`estimator`]: recover the efficiency series from the kernel-estimated
//!    conditional distribution of hires;
//! 3. [`elasticity`]: fit the quadratic surrogate and compute elasticities;
//! 4. [`mismatch`]: solve the planner's allocation problem each period;
//! 5. [`diagnostics`] and [`simulation`] for checks against known truth.

pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod elasticity;
pub mod error;
pub mod estimator;
pub mod linalg;
pub mod mismatch;
pub mod simulation;

pub use error::{Error, Result};
