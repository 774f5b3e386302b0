//! Benchmark inverse problems and closed-form Gaussian posteriors.

mod darcy;
mod linear;
mod linexp;
mod lorenz;

pub use darcy::{darcy_forward, make_darcy_problem, DarcyForward, DarcyProblem, DarcySpec};
pub use linear::{
    linear_posterior, linear_reduced_posterior, linear_tempered_posterior, make_linear_problem,
    LinearProblem, LinearProblemSpec,
};
pub use linexp::{linexp_forward, linexp_jacobian, make_linexp_problem, LinexpForward};
pub use lorenz::{
    lorenz96_forward, lorenz96_from, lorenz_estimate_gamma, lorenz_true_forcing, make_lorenz_problem,
    rk4_step, LorenzForward, LorenzPrior, LorenzProblem, LorenzSpec,
};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::RngCore;

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::rng;
use crate::Scalar;

/// Gaussian distribution `N(mean, cov)` with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianPosterior<T: Scalar> {
    pub mean: DVector<T>,
    pub cov: DMatrix<T>,
    chol: Cholesky<T, Dyn>,
}

impl<T: Scalar> GaussianPosterior<T> {
    pub fn new(mean: DVector<T>, cov: DMatrix<T>) -> Result<Self> {
        check_dim("Gaussian covariance", mean.len(), cov.nrows())?;
        let cov = linalg::symmetrize(&cov);
        let chol = cov
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("Gaussian covariance"))?;
        Ok(Self { mean, cov, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `d x n` matrix of independent draws.
    pub fn sample(&self, n: usize, rng: &mut dyn RngCore) -> DMatrix<T> {
        let z = rng::normal_matrix::<T>(self.dim(), n, rng);
        let mut xs = self.chol.l() * z;
        for mut c in xs.column_iter_mut() {
            c += &self.mean;
        }
        xs
    }

    /// Unnormalized log density.
    pub fn log_density(&self, x: &DVector<T>) -> T {
        -T::of(0.5) * linalg::inv_quad(&self.chol, &(x - &self.mean))
    }

    pub fn cholesky(&self) -> &Cholesky<T, Dyn> {
        &self.chol
    }
}
