//! Distances between a full posterior and its reduced approximation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::problems::GaussianPosterior;
use crate::Scalar;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    ClosedForm,
    Snis,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DistanceReport {
    pub value: f64,
    pub estimator: Estimator,
    pub n_samples: usize,
    /// `(sum w)^2 / sum w^2`; `n_samples` for closed forms.
    pub ess: f64,
    /// Delta-method standard error; zero for closed forms.
    pub std_error: f64,
}

impl DistanceReport {
    fn closed_form(value: f64) -> Self {
        Self {
            value,
            estimator: Estimator::ClosedForm,
            n_samples: 0,
            ess: 0.0,
            std_error: 0.0,
        }
    }
}

/// Squared Bures-Wasserstein distance
/// `|m1 - m2|^2 + Tr[S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2}]`.
pub fn w2_gaussian_sq<T: Scalar>(p1: &GaussianPosterior<T>, p2: &GaussianPosterior<T>) -> Result<T> {
    check_dim("Gaussian dimension", p1.dim(), p2.dim())?;
    let root1 = linalg::sym_sqrt(&p1.cov)?;
    let cross = linalg::sym_sqrt(&linalg::symmetrize(&(&root1 * &p2.cov * &root1)))?;
    let tr = linalg::trace(&p1.cov) + linalg::trace(&p2.cov) - T::of(2.0) * linalg::trace(&cross);
    // Roundoff can push an exact zero slightly negative.
    Ok((&p1.mean - &p2.mean).norm_squared() + tr.max(T::zero()))
}

fn log_det_chol<T: Scalar>(chol: &nalgebra::Cholesky<T, nalgebra::Dyn>) -> T {
    chol.l_dirty().diagonal().iter().fold(T::zero(), |acc, &d| acc + d.ln()) * T::of(2.0)
}

/// Closed-form squared Hellinger distance between two Gaussians.
pub fn hellinger2_gaussian<T: Scalar>(p1: &GaussianPosterior<T>, p2: &GaussianPosterior<T>) -> Result<T> {
    check_dim("Gaussian dimension", p1.dim(), p2.dim())?;
    let avg = linalg::symmetrize(&((&p1.cov + &p2.cov) * T::of(0.5)));
    let chol = avg
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("averaged Gaussian covariance"))?;
    let quarter = T::of(0.25);
    let log_bc = quarter * (log_det_chol(p1.cholesky()) + log_det_chol(p2.cholesky()))
        - T::of(0.5) * log_det_chol(&chol)
        - T::of(0.125) * linalg::inv_quad(&chol, &(&p1.mean - &p2.mean));
    Ok((T::one() - log_bc.exp()).max(T::zero()))
}

/// Self-normalized importance sampling estimate of the squared Hellinger
/// distance from the log ratios `log pi~(x_i) - log pi~*(x_i)`, `x_i ~ pi*`:
/// `1 - mean(sqrt w) / sqrt(mean w)`.
pub fn hellinger2_snis_from_log_ratios(log_ratios: &[f64]) -> Result<DistanceReport> {
    let top = log_ratios
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::NonFinite("importance weights".into()));
    }
    // Non-finite ratios other than -inf mean a broken density.
    if log_ratios.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("importance weights".into()));
    }
    let n = log_ratios.len() as f64;
    let w: Vec<f64> = log_ratios.iter().map(|l| (l - top).exp()).collect();
    let mean = |f: &dyn Fn(f64) -> f64| w.iter().map(|&x| f(x)).sum::<f64>() / n;
    let a = mean(&|x| x.sqrt());
    let b = mean(&|x| x);
    let value = (1.0 - a / b.sqrt()).clamp(0.0, 1.0);
    // Delta method on (a, b) with sample covariances of (sqrt w, w).
    let var_a = mean(&|x| x) - a * a;
    let var_b = mean(&|x| x * x) - b * b;
    let cov_ab = mean(&|x| x * x.sqrt()) - a * b;
    let ga = -1.0 / b.sqrt();
    let gb = 0.5 * a / b.powf(1.5);
    let var = (ga * ga * var_a + 2.0 * ga * gb * cov_ab + gb * gb * var_b).max(0.0) / n;
    let sum_w: f64 = w.iter().sum();
    let sum_w2: f64 = w.iter().map(|x| x * x).sum();
    Ok(DistanceReport {
        value,
        estimator: Estimator::Snis,
        n_samples: log_ratios.len(),
        ess: sum_w * sum_w / sum_w2,
        std_error: var.sqrt(),
    })
}

/// Squared Hellinger distance between `pi` and `pi*` from draws of `pi*`
/// (columns of `samples`); both densities may be unnormalized.
pub fn hellinger2_snis<T: Scalar>(
    log_tilde_pi: impl Fn(&DVector<T>) -> Result<T>,
    log_tilde_pi_star: impl Fn(&DVector<T>) -> Result<T>,
    samples: &DMatrix<T>,
) -> Result<DistanceReport> {
    if samples.ncols() == 0 {
        return Err(Error::invalid("no samples for the importance estimate"));
    }
    let ratios = samples
        .column_iter()
        .map(|c| {
            let x = c.into_owned();
            Ok((log_tilde_pi(&x)? - log_tilde_pi_star(&x)?).as_f64())
        })
        .collect::<Result<Vec<f64>>>()?;
    hellinger2_snis_from_log_ratios(&ratios)
}

/// Closed-form report wrappers used by experiment drivers.
pub fn w2_report<T: Scalar>(p1: &GaussianPosterior<T>, p2: &GaussianPosterior<T>) -> Result<DistanceReport> {
    Ok(DistanceReport::closed_form(w2_gaussian_sq(p1, p2)?.as_f64()))
}

pub fn hellinger2_gaussian_report<T: Scalar>(
    p1: &GaussianPosterior<T>,
    p2: &GaussianPosterior<T>,
) -> Result<DistanceReport> {
    Ok(DistanceReport::closed_form(hellinger2_gaussian(p1, p2)?.as_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn gauss(m: DVector<f64>, c: DMatrix<f64>) -> GaussianPosterior<f64> {
        GaussianPosterior::new(m, c).unwrap()
    }

    fn random_gaussian(d: usize, r: &mut dyn rand::RngCore) -> GaussianPosterior<f64> {
        let a = rng::normal_matrix::<f64>(d, d, r);
        let cov = &a * a.transpose() + DMatrix::identity(d, d) * 0.5;
        gauss(rng::normal_vector(d, r), cov)
    }

    #[test]
    fn w2_scalar_and_translation() {
        let a = gauss(dvector![0.0], dmatrix![1.0]);
        let b = gauss(dvector![0.0], dmatrix![4.0]);
        assert!((w2_gaussian_sq(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(w2_gaussian_sq(&a, &a).unwrap(), 0.0);
        let c = gauss(dvector![1.0, 2.0], DMatrix::identity(2, 2));
        let d = gauss(dvector![-1.0, 0.0], DMatrix::identity(2, 2));
        assert!((w2_gaussian_sq(&c, &d).unwrap() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn hellinger_scalar_oracle() {
        let a = gauss(dvector![0.0], dmatrix![1.0]);
        let b = gauss(dvector![1.0], dmatrix![1.0]);
        let want = 1.0 - (-0.125f64).exp();
        assert!((hellinger2_gaussian(&a, &b).unwrap() - want).abs() < 1e-14);
        assert!(hellinger2_gaussian(&a, &a).unwrap().abs() < 1e-15);
        // Midpoint quadrature of 1 - int sqrt(p q).
        let h = 1e-3;
        let bc: f64 = (-12_000..12_000)
            .map(|k| {
                let x = (k as f64 + 0.5) * h;
                let p = (-0.5 * x * x).exp();
                let q = (-0.5 * (x - 1.0) * (x - 1.0)).exp();
                (p * q).sqrt() * h
            })
            .sum::<f64>()
            / (2.0 * std::f64::consts::PI).sqrt();
        assert!((1.0 - bc - want).abs() < 1e-10);
    }

    #[test]
    fn hellinger_monotone_in_separation() {
        let a = gauss(dvector![0.0, 0.0], dmatrix![1.0, 0.3; 0.3, 2.0]);
        let mut last = 0.0;
        for k in 1..10 {
            let b = gauss(dvector![0.3 * k as f64, 0.0], dmatrix![1.0, 0.3; 0.3, 2.0]);
            let h = hellinger2_gaussian(&a, &b).unwrap();
            assert!(h > last);
            last = h;
        }
    }

    #[test]
    fn snis_scale_invariance() {
        let star = gauss(dvector![0.5], dmatrix![2.0]);
        let xs = star.sample(500, &mut rng::stream(0, 0));
        let rep = hellinger2_snis(|x| Ok(star.log_density(x) + 3.0), |x| Ok(star.log_density(x) - 7.0), &xs).unwrap();
        assert!(rep.value.abs() < 1e-12);
        assert!((rep.ess - 500.0).abs() < 1e-8);
    }

    #[test]
    fn snis_scalar_oracle() {
        let pi = gauss(dvector![0.0], dmatrix![1.0]);
        let star = gauss(dvector![1.0], dmatrix![1.0]);
        let xs = star.sample(10_000, &mut rng::stream(1, 0));
        let rep = hellinger2_snis(|x| Ok(pi.log_density(x)), |x| Ok(star.log_density(x)), &xs).unwrap();
        let want = 1.0 - (-0.125f64).exp();
        assert!((rep.value - want).abs() < 0.01, "{}", rep.value);
        assert!((rep.value - want).abs() < 4.0 * rep.std_error);
    }

    #[test]
    fn snis_normalization_constants_cancel() {
        let mut r = rng::stream(2, 0);
        let pi = random_gaussian(3, &mut r);
        let star = random_gaussian(3, &mut r);
        let xs = star.sample(2000, &mut r);
        let base = hellinger2_snis(|x| Ok(pi.log_density(x)), |x| Ok(star.log_density(x)), &xs).unwrap();
        let shifted = hellinger2_snis(|x| Ok(pi.log_density(x) + 40.0), |x| Ok(star.log_density(x) - 25.0), &xs).unwrap();
        assert!((base.value - shifted.value).abs() < 1e-12);
    }

    #[test]
    fn snis_rejects_degenerate_weights() {
        assert!(hellinger2_snis_from_log_ratios(&[f64::NEG_INFINITY; 3]).is_err());
        assert!(hellinger2_snis_from_log_ratios(&[0.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn snis_lies_in_unit_interval(ratios in proptest::collection::vec(-50.0f64..50.0, 1..50)) {
            let rep = hellinger2_snis_from_log_ratios(&ratios).unwrap();
            prop_assert!((0.0..=1.0).contains(&rep.value));
            prop_assert!(rep.ess >= 1.0 - 1e-12 && rep.ess <= ratios.len() as f64 + 1e-9);
        }

        #[test]
        fn w2_is_symmetric_and_rotation_invariant(seed in 0u64..500, d in 1usize..5) {
            let mut r = rng::stream(seed, 0);
            let a = random_gaussian(d, &mut r);
            let b = random_gaussian(d, &mut r);
            let ab = w2_gaussian_sq(&a, &b).unwrap();
            let ba = w2_gaussian_sq(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-10 * (1.0 + ab));
            let q = linalg::orthonormalize(&rng::normal_matrix::<f64>(d, d, &mut r)).unwrap();
            let rot = |g: &GaussianPosterior<f64>| gauss(&q * &g.mean, &q * &g.cov * q.transpose());
            let rotated = w2_gaussian_sq(&rot(&a), &rot(&b)).unwrap();
            prop_assert!((ab - rotated).abs() <= 1e-9 * (1.0 + ab));
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn hellinger_gaussian_bounded(seed in 0u64..500, d in 1usize..5) {
            let mut r = rng::stream(seed, 1);
            let a = random_gaussian(d, &mut r);
            let b = random_gaussian(d, &mut r);
            let h = hellinger2_gaussian(&a, &b).unwrap();
            prop_assert!((0.0..=1.0 + 1e-10).contains(&h));
            prop_assert!((h - hellinger2_gaussian(&b, &a).unwrap()).abs() < 1e-12);
        }
    }
}
