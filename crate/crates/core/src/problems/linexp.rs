use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use super::linear::{decaying_prior, random_operator, LinearProblem, LinearProblemSpec};
use crate::bip::{ForwardModel, InverseProblem};
use crate::error::{check_dim, Result};
use crate::rng;
use crate::Scalar;

const STREAM_DATA: u64 = 0x4c_4e45_5850_0002;

/// `G(x) = A exp(x)` with the exponential taken entrywise.
#[derive(Debug, Clone)]
pub struct LinexpForward<T: Scalar> {
    pub a: DMatrix<T>,
}

/// Non-finite entries from overflow are passed through for the caller to reject.
pub fn linexp_forward<T: Scalar>(a: &DMatrix<T>, x: &DVector<T>) -> Result<DVector<T>> {
    check_dim("linexp input", a.ncols(), x.len())?;
    Ok(a * x.map(|v| v.exp()))
}

/// `dG/dx = A diag(exp(x))`
pub fn linexp_jacobian<T: Scalar>(a: &DMatrix<T>, x: &DVector<T>) -> Result<DMatrix<T>> {
    check_dim("linexp input", a.ncols(), x.len())?;
    let mut j = a.clone();
    for (k, mut col) in j.column_iter_mut().enumerate() {
        col *= x[k].exp();
    }
    Ok(j)
}

impl<T: Scalar> ForwardModel<T> for LinexpForward<T> {
    fn input_dim(&self) -> usize {
        self.a.ncols()
    }

    fn output_dim(&self) -> usize {
        self.a.nrows()
    }

    fn evaluate(&self, x: &DVector<T>, _rng: &mut dyn RngCore) -> Result<DVector<T>> {
        linexp_forward(&self.a, x)
    }

    fn jacobian(&self, x: &DVector<T>) -> Result<DMatrix<T>> {
        linexp_jacobian(&self.a, x)
    }
}

/// Linear-exponential problem with the same operator, prior and noise as the
/// linear problem of the same spec.
pub fn make_linexp_problem<T: Scalar>(spec: &LinearProblemSpec) -> Result<LinearProblem<T>> {
    let a = random_operator::<T>(spec.d_x, spec.d_y, spec.seed)?;
    let gamma0 = decaying_prior::<T>(spec.d_x, spec.gamma0_scale);
    let mut r = rng::stream(spec.seed, STREAM_DATA);
    let (x_true, noise_scale) = if spec.out_of_distribution {
        (DVector::from_element(spec.d_x, T::of(10.0)), T::of(10.0))
    } else {
        let l = gamma0.map(|v| v.sqrt());
        (l * rng::normal_vector::<T>(spec.d_x, &mut r), T::one())
    };
    let y = linexp_forward(&a, &x_true)? + rng::normal_vector::<T>(spec.d_y, &mut r) * noise_scale;
    let problem = InverseProblem::new(
        Arc::new(LinexpForward { a: a.clone() }),
        DMatrix::identity(spec.d_y, spec.d_y),
        gamma0,
        DVector::zeros(spec.d_x),
        y,
    )?;
    Ok(LinearProblem { problem, a, x_true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn zero_input_sums_columns() {
        let a = dmatrix![1.0, 2.0; 3.0, 4.0];
        assert_eq!(linexp_forward(&a, &dvector![0.0, 0.0]).unwrap(), dvector![3.0, 7.0]);
    }

    #[test]
    fn scalar_value() {
        let y = linexp_forward(&dmatrix![2.0], &dvector![3.0f64.ln()]).unwrap();
        assert!((y[0] - 6.0).abs() < 1e-14);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut r = rng::stream(3, 0);
        let a = rng::normal_matrix::<f64>(4, 3, &mut r);
        let x = rng::normal_vector::<f64>(3, &mut r) * 0.5;
        let jac = linexp_jacobian(&a, &x).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (linexp_forward(&a, &xp).unwrap() - linexp_forward(&a, &xm).unwrap()) / (2.0 * h);
            let col = jac.column(k);
            assert!((&fd - col).norm() <= 1e-6 * col.norm());
        }
    }

    #[test]
    fn overflow_propagates() {
        let y: DVector<f64> = linexp_forward(&dmatrix![1.0], &dvector![1000.0]).unwrap();
        assert!(!y[0].is_finite());
    }
}
