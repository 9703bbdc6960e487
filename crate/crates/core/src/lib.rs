//! Estimators and population formulas for the two-construct reflexive path
//! model: X loads on a latent ξ, Y loads on a latent η, and the only link
//! between the blocks runs through cov(ξ, η).
//!
//! The crate is `no_std` with `alloc`. File formats, the command-line tool
//! and parallel simulation live in the `reflexive` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod envelope;
pub mod error;
pub mod fit;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod optim;
pub mod rrr;
pub mod sem;
pub mod sim;

pub use envelope::{
    envelope_weights_mle, pca_weights, select_dimensions, serr_estimate, simpls_weights, unit_weights, CompositeWeights,
    DimensionSelection, EnvelopeOptions, WeightMethod,
};
pub use error::{Error, Result};
pub use fit::{fit_dataset, fit_moments, Dimensions, Estimator, FitResult, FitSettings};
pub use model::{
    bias_factor, check_identifiability, convert_constraints, joint_covariance, population_reg_variances, sigma2_from_h,
    signal_strengths, ConstraintMode, IdentifiabilityReport, JointCov, KnownZeros, PathParams,
};
pub use moments::{compute_moments, Dataset, SampleMoments};
pub use rrr::{estimate_cor_regression, fit_rank1, population_cor_regression, Rank1Fit};
pub use sem::{fit_sem, sem_implied_reg_correlation, sem_structured_cov, SemFit, SemOptions, SemParameterization};
pub use sim::{generate_dataset, reproduce_figure, run_grid, ErrorStructure, SimConfig, SimResult, SimRow};
