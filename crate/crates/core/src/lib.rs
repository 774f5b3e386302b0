//! Tempered likelihood-informed subspaces (α-LIS) for Bayesian inverse problems.
//!
//! The numerical core is generic over the scalar type `T: Scalar` (`f32` or
//! `f64`); the aliases at the bottom of this file fix `T = f64`, which every
//! experiment uses.

pub mod bip;
pub mod emulator;
pub mod error;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod output_opt;
pub mod problems;
pub mod reduction;
pub mod rng;
pub mod samplers;
pub mod subspace;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Real = f64;
pub type Matrix = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;

pub type InverseProblem64 = bip::InverseProblem<f64>;
pub type ReducedSpace64 = bip::ReducedSpace<f64>;
pub type WhitenTransform64 = bip::WhitenTransform<f64>;
pub type GaussianConditional64 = bip::GaussianConditional<f64>;
pub type TemperedEnsemble64 = samplers::TemperedEnsemble<f64>;
pub type McmcChain64 = samplers::McmcChain<f64>;
pub type DiagnosticMatrix64 = reduction::DiagnosticMatrix<f64>;
pub type ObjectiveContext64 = output_opt::ObjectiveContext<f64>;
pub type GaussianPosterior64 = problems::GaussianPosterior<f64>;
pub type RffModel64 = emulator::RffModel<f64>;
