use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::GaussianPosterior;
use crate::bip::{gaussian_conditional_with_mean, InverseProblem, LinearForward, ReducedSpace};
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::rng;
use crate::Scalar;

const STREAM_OPERATOR: u64 = 0x4c_494e_4541_5201;
const STREAM_DATA: u64 = 0x4c_494e_4541_5202;

/// Random linear problem `G(x) = A x`, `A = U Lambda V^T` with
/// `Lambda = 100 diag(1, 1/2, ..., 1/d_y)`, prior `N(0, gamma0 diag(k^-2))`
/// and unit noise.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LinearProblemSpec {
    pub d_x: usize,
    pub d_y: usize,
    pub seed: u64,
    #[serde(default = "default_gamma0")]
    pub gamma0_scale: f64,
    /// Observe `A (10 * 1) + 10 eta` instead of a prior draw.
    #[serde(default)]
    pub out_of_distribution: bool,
}

fn default_gamma0() -> f64 {
    4.0
}

impl LinearProblemSpec {
    pub fn new(d_x: usize, d_y: usize, seed: u64) -> Self {
        Self {
            d_x,
            d_y,
            seed,
            gamma0_scale: default_gamma0(),
            out_of_distribution: false,
        }
    }
}

/// Linear problem together with its operator and the parameter behind `y_dagger`.
#[derive(Debug, Clone)]
pub struct LinearProblem<T: Scalar> {
    pub problem: InverseProblem<T>,
    pub a: DMatrix<T>,
    pub x_true: DVector<T>,
}

/// `A = U Lambda V^T` from seeded orthogonal factors.
pub(crate) fn random_operator<T: Scalar>(d_x: usize, d_y: usize, seed: u64) -> Result<DMatrix<T>> {
    if d_x < d_y {
        return Err(Error::invalid(format!("need d_x >= d_y, got {d_x} < {d_y}")));
    }
    if d_y == 0 {
        return Err(Error::invalid("empty observation space"));
    }
    let mut r = rng::stream(seed, STREAM_OPERATOR);
    let u = linalg::orthonormalize(&rng::normal_matrix::<T>(d_y, d_y, &mut r))?;
    let v = linalg::orthonormalize(&rng::normal_matrix::<T>(d_x, d_y, &mut r))?;
    let lambda = DVector::from_fn(d_y, |k, _| T::of(100.0) / T::of_usize(k + 1));
    Ok(u * DMatrix::from_diagonal(&lambda) * v.transpose())
}

/// `gamma0 diag(1^-2, ..., d^-2)`
pub(crate) fn decaying_prior<T: Scalar>(d: usize, gamma0: f64) -> DMatrix<T> {
    DMatrix::from_diagonal(&DVector::from_fn(d, |k, _| {
        T::of(gamma0) / T::of_usize((k + 1) * (k + 1))
    }))
}

pub fn make_linear_problem<T: Scalar>(spec: &LinearProblemSpec) -> Result<LinearProblem<T>> {
    if !(spec.gamma0_scale > 0.0) {
        return Err(Error::invalid("prior scale must be positive"));
    }
    let a = random_operator::<T>(spec.d_x, spec.d_y, spec.seed)?;
    let gamma0 = decaying_prior::<T>(spec.d_x, spec.gamma0_scale);
    let gamma = DMatrix::<T>::identity(spec.d_y, spec.d_y);
    let mut r = rng::stream(spec.seed, STREAM_DATA);
    let (x_true, noise_scale) = if spec.out_of_distribution {
        (DVector::from_element(spec.d_x, T::of(10.0)), T::of(10.0))
    } else {
        let l = gamma0.map(|v| v.sqrt());
        (l * rng::normal_vector::<T>(spec.d_x, &mut r), T::one())
    };
    let eta = rng::normal_vector::<T>(spec.d_y, &mut r) * noise_scale;
    let y = &a * &x_true + eta;
    let problem = InverseProblem::new(
        Arc::new(LinearForward { a: a.clone() }),
        gamma,
        gamma0,
        DVector::zeros(spec.d_x),
        y,
    )?;
    Ok(LinearProblem { problem, a, x_true })
}

/// Exact posterior of a linear-Gaussian problem.
pub fn linear_posterior<T: Scalar>(p: &InverseProblem<T>, a: &DMatrix<T>) -> Result<GaussianPosterior<T>> {
    linear_tempered_posterior(p, a, T::one())
}

/// Exact tempered posterior `pi_0 L^alpha`:
/// `Sigma = (Gamma0^{-1} + alpha A^T Gamma^{-1} A)^{-1}`.
pub fn linear_tempered_posterior<T: Scalar>(
    p: &InverseProblem<T>,
    a: &DMatrix<T>,
    alpha: T,
) -> Result<GaussianPosterior<T>> {
    crate::bip::check_alpha(alpha)?;
    check_dim("operator rows", p.output_dim(), a.nrows())?;
    check_dim("operator cols", p.input_dim(), a.ncols())?;
    let g0_inv = linalg::inv_spd(p.gamma0())?;
    let gi_a = p.gamma_cholesky().solve(a);
    let precision = linalg::symmetrize(&(&g0_inv + a.transpose() * &gi_a * alpha));
    let cov = linalg::inv_spd(&precision)?;
    let rhs = gi_a.transpose() * p.y_dagger() * alpha + &g0_inv * p.prior_mean();
    let mean = linalg::solve_spd_vec(&precision, &rhs)?;
    GaussianPosterior::new(mean, cov)
}

/// Closed-form posterior `pi_0(x) L*(U_r^T x)` of the reduced problem, where
/// `L*` is the Gaussian marginal likelihood of `V_s^T y` given `x_r` after
/// integrating the complement against the prior conditional.
///
/// `space` must live in original coordinates.
pub fn linear_reduced_posterior<T: Scalar>(
    p: &InverseProblem<T>,
    a: &DMatrix<T>,
    space: &ReducedSpace<T>,
) -> Result<GaussianPosterior<T>> {
    check_dim("reduced space input", p.input_dim(), space.input_dim())?;
    check_dim("reduced space output", p.output_dim(), space.output_dim())?;
    let (u_r, u_p, v_s) = (&space.u_r, &space.u_perp, &space.v_s);
    let g0_inv = linalg::inv_spd(p.gamma0())?;
    if space.r() == 0 || space.s() == 0 {
        return GaussianPosterior::new(p.prior_mean().clone(), p.gamma0().clone());
    }
    let cond = gaussian_conditional_with_mean(p.gamma0(), p.prior_mean(), u_r, u_p)?;
    let vsa = v_s.transpose() * a;
    let b = &vsa * (u_r + u_p * &cond.mean_map);
    let vsa_up = &vsa * u_p;
    let c = linalg::symmetrize(&(v_s.transpose() * p.gamma() * v_s + &vsa_up * &cond.cov * vsa_up.transpose()));
    let c_chol = c
        .cholesky()
        .ok_or_else(|| Error::Singular("reduced likelihood covariance C".into()))?;
    let bu = &b * u_r.transpose();
    let precision = linalg::symmetrize(&(&g0_inv + bu.transpose() * c_chol.solve(&bu)));
    let cov = linalg::inv_spd(&precision)?;
    let data = v_s.transpose() * p.y_dagger() - &vsa_up * &cond.offset;
    let rhs = bu.transpose() * c_chol.solve(&data) + &g0_inv * p.prior_mean();
    let mean = linalg::solve_spd_vec(&precision, &rhs)?;
    GaussianPosterior::new(mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bip::{gaussian_conditional, reduced_log_posterior, ReducedPosterior};
    use crate::samplers::{rwm_sample_with, RwmOptions};
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn operator_spectrum_and_determinism() {
        let spec = LinearProblemSpec::new(8, 5, 3);
        let lp = make_linear_problem::<f64>(&spec).unwrap();
        let (vals, _) = linalg::sym_eigen(&(lp.a.transpose() * &lp.a)).unwrap();
        for k in 0..5 {
            let want = (100.0 / (k as f64 + 1.0)).powi(2);
            assert!((vals[k] - want).abs() < 1e-8 * want);
        }
        assert!(vals.iter().skip(5).all(|v| v.abs() < 1e-8));
        let again = make_linear_problem::<f64>(&spec).unwrap();
        assert_eq!(lp.a, again.a);
        assert_eq!(lp.problem.y_dagger(), again.problem.y_dagger());
        assert!(make_linear_problem::<f64>(&LinearProblemSpec::new(3, 5, 0)).is_err());
    }

    #[test]
    fn reference_configuration() {
        let lp = make_linear_problem::<f64>(&LinearProblemSpec::new(100, 100, 0)).unwrap();
        assert_eq!(lp.problem.input_dim(), 100);
        assert!((lp.problem.gamma0()[(0, 0)] - 4.0).abs() < 1e-15);
        assert!((lp.problem.gamma0()[(99, 99)] - 4e-4).abs() < 1e-15);
    }

    #[test]
    fn out_of_distribution_flag() {
        let mut spec = LinearProblemSpec::new(6, 4, 1);
        spec.out_of_distribution = true;
        let lp = make_linear_problem::<f64>(&spec).unwrap();
        assert!(lp.x_true.iter().all(|&v| v == 10.0));
    }

    fn scalar(a: f64, g0: f64, y: f64) -> InverseProblem<f64> {
        InverseProblem::new(
            Arc::new(LinearForward { a: dmatrix![a] }),
            dmatrix![1.0],
            dmatrix![g0],
            dvector![0.0],
            dvector![y],
        )
        .unwrap()
    }

    #[test]
    fn scalar_conjugate_posterior() {
        let post = linear_posterior(&scalar(1.0, 1.0, 2.0), &dmatrix![1.0]).unwrap();
        assert!((post.cov[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((post.mean[0] - 1.0).abs() < 1e-15);
        let prior = linear_posterior(&scalar(0.0, 3.0, 2.0), &dmatrix![0.0]).unwrap();
        assert!((prior.cov[(0, 0)] - 3.0).abs() < 1e-14);
        assert_eq!(prior.mean[0], 0.0);
    }

    #[test]
    fn posterior_contracts_prior() {
        let lp = make_linear_problem::<f64>(&LinearProblemSpec::new(6, 4, 2)).unwrap();
        let post = linear_posterior(&lp.problem, &lp.a).unwrap();
        let (vals, _) = linalg::sym_eigen(&(lp.problem.gamma0() - &post.cov)).unwrap();
        assert!(vals.iter().all(|&v| v >= -1e-12));
    }

    #[test]
    fn no_reduction_is_exact() {
        let lp = make_linear_problem::<f64>(&LinearProblemSpec::new(7, 5, 4)).unwrap();
        let full = linear_posterior(&lp.problem, &lp.a).unwrap();
        let space = ReducedSpace::full(7, 5);
        let red = linear_reduced_posterior(&lp.problem, &lp.a, &space).unwrap();
        assert!((&full.mean - &red.mean).amax() < 1e-8);
        assert!((&full.cov - &red.cov).amax() < 1e-8);
    }

    #[test]
    fn lossless_output_projection() {
        // Row space of A is d_y-dimensional; V_s spanning range(A) = R^{d_y} loses nothing.
        let lp = make_linear_problem::<f64>(&LinearProblemSpec::new(6, 3, 5)).unwrap();
        let full = linear_posterior(&lp.problem, &lp.a).unwrap();
        let svd = lp.a.clone().svd(true, false);
        let v_s = linalg::orthonormalize(&svd.u.unwrap()).unwrap();
        let space = ReducedSpace::new(DMatrix::identity(6, 6), v_s, false).unwrap();
        let red = linear_reduced_posterior(&lp.problem, &lp.a, &space).unwrap();
        assert!((&full.mean - &red.mean).amax() < 1e-8);
        assert!((&full.cov - &red.cov).amax() < 1e-8);
    }

    fn small_reduced_instance() -> (LinearProblem<f64>, ReducedSpace<f64>) {
        let lp = make_linear_problem::<f64>(&LinearProblemSpec::new(3, 3, 6)).unwrap();
        let mut r = rng::stream(6, 9);
        let u = linalg::orthonormalize(&rng::normal_matrix::<f64>(3, 3, &mut r)).unwrap();
        let v = linalg::orthonormalize(&rng::normal_matrix::<f64>(3, 2, &mut r)).unwrap();
        let space = ReducedSpace::new(u.columns(0, 2).into_owned(), v, false).unwrap();
        (lp, space)
    }

    #[test]
    fn expected_reduced_log_density_matches_closed_form() {
        // E over the conditional draw of the one-sample log density equals the
        // log of the Gaussian reduced likelihood minus the trace correction
        // 1/2 Tr[(V^T G V)^{-1} V^T A U_perp S U_perp^T A^T V].
        let (lp, space) = small_reduced_instance();
        let p = &lp.problem;
        let cond = gaussian_conditional(p.gamma0(), &space.u_r, &space.u_perp).unwrap();
        let post = ReducedPosterior::new(p, &space, &cond).unwrap();
        let vsa = space.v_s.transpose() * &lp.a;
        let b = &vsa * (&space.u_r + &space.u_perp * &cond.mean_map);
        // Near the data-consistent point the likelihood does not underflow.
        let x_r = b.clone().lu().solve(&(space.v_s.transpose() * p.y_dagger())).unwrap() + dvector![0.01, -0.02];
        let mut r = rng::stream(7, 0);
        let n = 20_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        let mut lik = 0.0;
        let mut lik2 = 0.0;
        for _ in 0..n {
            let v = reduced_log_posterior(p, &space, &cond, &x_r, &mut r).unwrap();
            acc += v;
            acc2 += v * v;
            let l = (v - post.log_marginal_prior(&x_r)).exp();
            lik += l;
            lik2 += l * l;
        }
        let se = |s: f64, s2: f64| ((s2 / n as f64 - (s / n as f64).powi(2)) / n as f64).sqrt();
        let (se_log, se_lik) = (se(acc, acc2), se(lik, lik2));
        let mc = acc / n as f64;
        let mc_lik = lik / n as f64;
        let mean = &b * &x_r;
        let noise = space.v_s.transpose() * p.gamma() * &space.v_s;
        let extra = &vsa * &space.u_perp * &cond.cov * (&vsa * &space.u_perp).transpose();
        let res = space.v_s.transpose() * p.y_dagger() - mean;
        let ni = linalg::inv_spd(&noise).unwrap();
        let want = post.log_marginal_prior(&x_r) - 0.5 * (res.transpose() * &ni * &res)[(0, 0)]
            - 0.5 * (&ni * &extra).trace();
        assert!((mc - want).abs() < 5.0 * se_log + 1e-12, "{mc} vs {want} (se {se_log})");
        // The likelihood itself averages to the Gaussian marginal N(y_s; B x_r, C),
        // up to the normalization ratio sqrt(det N / det C).
        let c = &noise + &extra;
        let ci = linalg::inv_spd(&c).unwrap();
        let want_lik = (noise.determinant() / c.determinant()).sqrt()
            * (-0.5 * (res.transpose() * &ci * &res)[(0, 0)]).exp();
        assert!((mc_lik - want_lik).abs() < 5.0 * se_lik, "{mc_lik} vs {want_lik} (se {se_lik})");
    }

    #[test]
    fn reduced_covariance_matches_mcmc() {
        let (lp, space) = small_reduced_instance();
        let p = &lp.problem;
        let exact = linear_reduced_posterior(p, &lp.a, &space).unwrap();
        // Sample the reduced variable from its exact Gaussian likelihood with a
        // Gaussian marginal prior, then lift through the prior conditional.
        let cond = gaussian_conditional(p.gamma0(), &space.u_r, &space.u_perp).unwrap();
        let vsa = space.v_s.transpose() * &lp.a;
        let b = &vsa * (&space.u_r + &space.u_perp * &cond.mean_map);
        let vsa_up = &vsa * &space.u_perp;
        let c = space.v_s.transpose() * p.gamma() * &space.v_s + &vsa_up * &cond.cov * vsa_up.transpose();
        let c_inv = linalg::inv_spd(&c).unwrap();
        let yv = space.v_s.transpose() * p.y_dagger();
        let prior_r = linalg::inv_spd(&(space.u_r.transpose() * p.gamma0() * &space.u_r)).unwrap();
        let target = |x: &DVector<f64>, _: &mut dyn rand::RngCore| {
            let res = &yv - &b * x;
            Ok(-0.5 * (x.transpose() * &prior_r * x)[(0, 0)] - 0.5 * (res.transpose() * &c_inv * &res)[(0, 0)])
        };
        let opts = RwmOptions::with_samples(100_000);
        let mut r = rng::stream(8, 0);
        let chain = rwm_sample_with(target, &DVector::zeros(2), &opts, &mut r).unwrap();
        let full = crate::bip::reconstruct_full_samples(&space, &cond, &chain.columns(), None, &mut r).unwrap();
        let emp = linalg::covariance(&full);
        let rel = (&emp - &exact.cov).norm() / exact.cov.norm();
        assert!(rel < 0.05, "relative Frobenius error {rel}");
    }
}
