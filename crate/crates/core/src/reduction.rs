//! Diagnostic matrices for input reduction, PCA baselines and derivative-free
//! gradients by statistical linearization.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bip::{check_alpha, InverseProblem};
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::samplers::TemperedEnsemble;
use crate::Scalar;

/// Temperature (or temperature interval) a diagnostic matrix was built for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaTag {
    Single(f64),
    Interval(f64, f64),
}

/// Symmetric PSD diagnostic matrix with descending, sign-fixed eigenpairs.
#[derive(Debug, Clone)]
pub struct DiagnosticMatrix<T: Scalar> {
    pub h: DMatrix<T>,
    pub alpha_tag: AlphaTag,
    pub eigvals: DVector<T>,
    pub eigvecs: DMatrix<T>,
}

impl<T: Scalar> DiagnosticMatrix<T> {
    pub fn new(h: DMatrix<T>, alpha_tag: AlphaTag) -> Result<Self> {
        if h.nrows() != h.ncols() {
            return Err(Error::invalid("diagnostic matrix must be square"));
        }
        let h = linalg::symmetrize(&h);
        let (eigvals, eigvecs) = linalg::sym_eigen(&h)?;
        Ok(Self {
            h,
            alpha_tag,
            eigvals,
            eigvecs,
        })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }
}

/// Source of forward-map gradients at the samples.
#[derive(Debug, Clone)]
pub enum GradientProvider<T: Scalar> {
    /// One matrix for every sample (statistical linearization).
    Shared(DMatrix<T>),
    /// One Jacobian per sample.
    PerSample(Vec<DMatrix<T>>),
}

/// How gradients are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Exact,
    #[default]
    StatisticalLinearization,
}

impl<T: Scalar> GradientProvider<T> {
    /// Exact Jacobians of `p` at every column of `samples`.
    pub fn exact(p: &InverseProblem<T>, samples: &DMatrix<T>) -> Result<Self> {
        let jacs: Vec<Result<DMatrix<T>>> = (0..samples.ncols())
            .into_par_iter()
            .map(|j| p.jacobian(&samples.column(j).into_owned()))
            .collect();
        Ok(GradientProvider::PerSample(jacs.into_iter().collect::<Result<_>>()?))
    }

    pub fn at(&self, j: usize) -> &DMatrix<T> {
        match self {
            GradientProvider::Shared(g) => g,
            GradientProvider::PerSample(gs) => &gs[j],
        }
    }

    fn check(&self, n: usize, dy: usize, dx: usize) -> Result<()> {
        let mats: &[DMatrix<T>] = match self {
            GradientProvider::Shared(g) => std::slice::from_ref(g),
            GradientProvider::PerSample(gs) => {
                check_dim("per-sample gradients", n, gs.len())?;
                gs
            }
        };
        for g in mats {
            check_dim("gradient rows", dy, g.nrows())?;
            check_dim("gradient cols", dx, g.ncols())?;
            if !g.iter().all(|v| v.is_finite_value()) {
                return Err(Error::NonFinite("gradient".into()));
            }
        }
        Ok(())
    }
}

/// `[(C^{xx} + nugget I)^{-1} C^{xG}]^T` from paired samples (`d_x x J`,
/// `d_y x J`) with `1/J` covariances; a zero nugget uses a pseudo-inverse
/// truncating singular values below `1e-12 sigma_max`.
pub fn statistical_linearization<T: Scalar>(
    xs: &DMatrix<T>,
    gs: &DMatrix<T>,
    nugget: T,
) -> Result<DMatrix<T>> {
    let j = xs.ncols();
    if j < 2 {
        return Err(Error::invalid(format!(
            "statistical linearization needs at least 2 samples, got {j}"
        )));
    }
    check_dim("linearization outputs", j, gs.ncols())?;
    if nugget < T::zero() {
        return Err(Error::invalid("nugget must be non-negative"));
    }
    let mut cxx = linalg::covariance(xs);
    let cxg = linalg::cross_covariance(xs, gs);
    let sol = if nugget > T::zero() {
        for i in 0..cxx.nrows() {
            cxx[(i, i)] += nugget;
        }
        linalg::solve_spd(&cxx, &cxg)?
    } else {
        linalg::pinv(&cxx, T::of(1e-12))? * cxg
    };
    Ok(sol.transpose())
}

/// Nugget used by default: zero for exact evaluations, `Tr(Gamma)/J` for
/// noisy or stochastic ones.
pub fn default_nugget<T: Scalar>(p: &InverseProblem<T>, j: usize) -> T {
    if p.noisy_forward() || p.forward().is_stochastic() {
        linalg::trace(p.gamma()) / T::of_usize(j)
    } else {
        T::zero()
    }
}

/// Linearization from every ensemble member with temperature at most `alpha`.
pub fn statistical_linearization_pooled<T: Scalar>(
    ens: &TemperedEnsemble<T>,
    alpha: T,
    nugget: T,
) -> Result<DMatrix<T>> {
    let (xs, gs) = ens.pooled_up_to(alpha);
    statistical_linearization(&xs, &gs, nugget)
}

/// Monte Carlo estimate of
/// `E[ dG^T Gamma^{-1} ((1-alpha) Gamma + alpha^2 r r^T) Gamma^{-1} dG ]`,
/// `r = y_dagger - G(x)`, over the columns of `samples`, using the supplied
/// evaluations `G(x_j)` instead of re-evaluating.
pub fn estimate_h_alpha<T: Scalar>(
    samples: &DMatrix<T>,
    evaluations: &DMatrix<T>,
    grads: &GradientProvider<T>,
    p: &InverseProblem<T>,
    alpha: T,
) -> Result<DiagnosticMatrix<T>> {
    check_alpha(alpha)?;
    let n = samples.ncols();
    let dx = p.input_dim();
    let dy = p.output_dim();
    if n == 0 {
        return Err(Error::invalid("no samples for the diagnostic matrix"));
    }
    check_dim("samples", dx, samples.nrows())?;
    check_dim("evaluations", n, evaluations.ncols())?;
    check_dim("evaluations", dy, evaluations.nrows())?;
    grads.check(n, dy, dx)?;
    let chol = p.gamma_cholesky();
    let whiten = |m: &DMatrix<T>| -> DMatrix<T> {
        let mut w = m.clone();
        chol.l_dirty().solve_lower_triangular_mut(&mut w);
        w
    };
    let whiten_vec = |v: DVector<T>| -> DVector<T> {
        let mut w = v;
        chol.l_dirty().solve_lower_triangular_mut(&mut w);
        w
    };
    let inv_n = T::one() / T::of_usize(n);
    let a1 = T::one() - alpha;
    let a2 = alpha * alpha;
    let h = match grads {
        GradientProvider::Shared(g) => {
            // dG^T L^{-T} [(1-alpha) I + alpha^2 mean(q q^T)] L^{-1} dG
            let w = whiten(g);
            let mut m = DMatrix::<T>::identity(dy, dy) * a1;
            for j in 0..n {
                let q = whiten_vec(p.y_dagger() - evaluations.column(j));
                m += &q * q.transpose() * (a2 * inv_n);
            }
            w.transpose() * m * w
        }
        GradientProvider::PerSample(gs) => {
            let terms: Vec<DMatrix<T>> = (0..n)
                .into_par_iter()
                .map(|j| {
                    let w = whiten(&gs[j]);
                    let mut t = w.transpose() * &w * a1;
                    if a2 > T::zero() {
                        let q = whiten_vec(p.y_dagger() - evaluations.column(j));
                        let k = w.transpose() * q;
                        t += &k * k.transpose() * a2;
                    }
                    t
                })
                .collect();
            let mut h = DMatrix::zeros(dx, dx);
            for t in terms {
                h += t;
            }
            h * inv_n
        }
    };
    DiagnosticMatrix::new(h, AlphaTag::Single(alpha.as_f64()))
}

/// `E[dG^T Gamma^{-1} dG]` over the samples, computed directly.
pub fn df_lis_matrix<T: Scalar>(
    grads: &GradientProvider<T>,
    gamma: &DMatrix<T>,
    n: usize,
) -> Result<DMatrix<T>> {
    let chol = gamma
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("noise covariance"))?;
    let mut h = DMatrix::zeros(grads.at(0).ncols(), grads.at(0).ncols());
    let count = match grads {
        GradientProvider::Shared(_) => 1,
        GradientProvider::PerSample(_) => n,
    };
    for j in 0..count {
        let mut w = grads.at(j).clone();
        chol.l_dirty().solve_lower_triangular_mut(&mut w);
        h += w.transpose() * w;
    }
    Ok(linalg::symmetrize(&(h * (T::one() / T::of_usize(count)))))
}

/// Quadrature weights over a temperature sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureWeights {
    #[default]
    Equal,
    Trapezoidal,
    Custom(Vec<f64>),
}

/// Weighted combination of diagnostic matrices along increasing temperatures,
/// approximating the average of `H^alpha` over `[alpha_0, alpha_k]`.
pub fn accumulate_h<T: Scalar>(
    pairs: &[(T, DiagnosticMatrix<T>)],
    weights: &QuadratureWeights,
) -> Result<DiagnosticMatrix<T>> {
    if pairs.is_empty() {
        return Err(Error::invalid("no diagnostic matrices to accumulate"));
    }
    if pairs.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(Error::invalid("temperatures must be sorted ascending"));
    }
    let n = pairs.len();
    let w = quadrature_weights(&pairs.iter().map(|p| p.0.as_f64()).collect::<Vec<_>>(), weights)?;
    let d = pairs[0].1.dim();
    let mut h = DMatrix::zeros(d, d);
    for ((_, m), wi) in pairs.iter().zip(&w) {
        check_dim("accumulated diagnostic", d, m.dim())?;
        h += &m.h * T::of(*wi);
    }
    let tag = AlphaTag::Interval(pairs[0].0.as_f64(), pairs[n - 1].0.as_f64());
    DiagnosticMatrix::new(h, tag)
}

/// Weights of `weights` at the sorted temperatures `alphas`.
pub fn quadrature_weights(alphas: &[f64], weights: &QuadratureWeights) -> Result<Vec<f64>> {
    let n = alphas.len();
    if n == 0 {
        return Err(Error::invalid("no temperatures for quadrature"));
    }
    Ok(match weights {
        QuadratureWeights::Equal => vec![1.0 / n as f64; n],
        QuadratureWeights::Trapezoidal => trapezoid(alphas),
        QuadratureWeights::Custom(w) => {
            if w.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "quadrature weights",
                    expected: n,
                    got: w.len(),
                });
            }
            w.clone()
        }
    })
}

/// Normalized trapezoidal weights; a single node gets weight one.
fn trapezoid(alphas: &[f64]) -> Vec<f64> {
    let n = alphas.len();
    let span = alphas[n - 1] - alphas[0];
    if n == 1 || span <= 0.0 {
        return vec![1.0 / n as f64; n];
    }
    let mut w = vec![0.0; n];
    for i in 0..n - 1 {
        let h = 0.5 * (alphas[i + 1] - alphas[i]) / span;
        w[i] += h;
        w[i + 1] += h;
    }
    w
}

fn check_rank(r: usize, d: usize) -> Result<()> {
    if r > d {
        Err(Error::invalid(format!("requested {r} directions in dimension {d}")))
    } else {
        Ok(())
    }
}

/// Leading `r` eigenvectors of a covariance matrix.
pub fn pca_basis<T: Scalar>(cov: &DMatrix<T>, r: usize) -> Result<DMatrix<T>> {
    check_rank(r, cov.nrows())?;
    linalg::leading_eigenvectors(&linalg::symmetrize(cov), r)
}

/// Leading `r` eigenvectors of the empirical covariance of `samples` (columns).
pub fn pca_basis_from_samples<T: Scalar>(samples: &DMatrix<T>, r: usize) -> Result<DMatrix<T>> {
    pca_basis(&linalg::covariance(samples), r)
}

/// Output covariance `Cov(G(X)) + Gamma` from forward evaluations.
pub fn output_covariance<T: Scalar>(evaluations: &DMatrix<T>, gamma: &DMatrix<T>) -> DMatrix<T> {
    linalg::covariance(evaluations) + gamma
}

/// Leading `r` eigenvectors of a diagnostic matrix.
pub fn input_basis<T: Scalar>(h: &DiagnosticMatrix<T>, r: usize) -> Result<DMatrix<T>> {
    check_rank(r, h.dim())?;
    Ok(h.eigvecs.columns(0, r).into_owned())
}

/// Prior draws and their evaluations, for diagnostics estimated at `alpha = 0`.
pub fn prior_samples<T: Scalar>(
    p: &InverseProblem<T>,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let xs = p.sample_prior_matrix(n, rng);
    let gs = p.evaluate_batch(&xs, rng)?;
    Ok((xs, gs))
}
