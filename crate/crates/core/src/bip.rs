//! Bayesian inverse problem `y = G(x) + eta`, `eta ~ N(0, Gamma)`, with a
//! Gaussian prior `N(m, Gamma0)`, plus whitening and the reduced-posterior
//! machinery for a split `x = U_r x_r + U_perp x_perp`.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::RngCore;

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::rng;
use crate::Scalar;

/// Forward map `G: R^{d_x} -> R^{d_y}`.
///
/// Stochastic models (chaotic simulators started from a random state) draw
/// from the supplied generator; deterministic ones ignore it.
pub trait ForwardModel<T: Scalar>: Send + Sync {
    fn input_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    fn evaluate(&self, x: &DVector<T>, rng: &mut dyn RngCore) -> Result<DVector<T>>;

    /// Jacobian `dG/dx` at `x` (`d_y x d_x`).
    fn jacobian(&self, _x: &DVector<T>) -> Result<DMatrix<T>> {
        Err(Error::GradientUnavailable)
    }

    fn is_stochastic(&self) -> bool {
        false
    }
}

/// Gaussian-noise inverse problem with a Gaussian prior.
#[derive(Clone)]
pub struct InverseProblem<T: Scalar> {
    forward: Arc<dyn ForwardModel<T>>,
    gamma: DMatrix<T>,
    gamma0: DMatrix<T>,
    prior_mean: DVector<T>,
    y_dagger: DVector<T>,
    noisy_forward: bool,
    gamma_chol: Cholesky<T, Dyn>,
    gamma0_chol: Cholesky<T, Dyn>,
}

impl<T: Scalar> std::fmt::Debug for InverseProblem<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InverseProblem")
            .field("d_x", &self.input_dim())
            .field("d_y", &self.output_dim())
            .field("noisy_forward", &self.noisy_forward)
            .finish()
    }
}

impl<T: Scalar> InverseProblem<T> {
    pub fn new(
        forward: Arc<dyn ForwardModel<T>>,
        gamma: DMatrix<T>,
        gamma0: DMatrix<T>,
        prior_mean: DVector<T>,
        y_dagger: DVector<T>,
    ) -> Result<Self> {
        let dx = forward.input_dim();
        let dy = forward.output_dim();
        check_dim("noise covariance", dy, gamma.nrows())?;
        check_dim("noise covariance", dy, gamma.ncols())?;
        check_dim("prior covariance", dx, gamma0.nrows())?;
        check_dim("prior covariance", dx, gamma0.ncols())?;
        check_dim("prior mean", dx, prior_mean.len())?;
        check_dim("observation", dy, y_dagger.len())?;
        linalg::check_spd(&gamma, "noise covariance")?;
        linalg::check_spd(&gamma0, "prior covariance")?;
        let gamma = linalg::symmetrize(&gamma);
        let gamma0 = linalg::symmetrize(&gamma0);
        let gamma_chol = gamma
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("noise covariance"))?;
        let gamma0_chol = gamma0
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("prior covariance"))?;
        Ok(Self {
            forward,
            gamma,
            gamma0,
            prior_mean,
            y_dagger,
            noisy_forward: false,
            gamma_chol,
            gamma0_chol,
        })
    }

    /// Marks forward evaluations as carrying additive `N(0, Gamma)` noise.
    pub fn with_noisy_forward(mut self, noisy: bool) -> Self {
        self.noisy_forward = noisy;
        self
    }

    pub fn with_observation(mut self, y: DVector<T>) -> Result<Self> {
        check_dim("observation", self.output_dim(), y.len())?;
        self.y_dagger = y;
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.forward.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.forward.output_dim()
    }

    pub fn forward(&self) -> &Arc<dyn ForwardModel<T>> {
        &self.forward
    }

    pub fn gamma(&self) -> &DMatrix<T> {
        &self.gamma
    }

    pub fn gamma0(&self) -> &DMatrix<T> {
        &self.gamma0
    }

    pub fn prior_mean(&self) -> &DVector<T> {
        &self.prior_mean
    }

    pub fn y_dagger(&self) -> &DVector<T> {
        &self.y_dagger
    }

    pub fn noisy_forward(&self) -> bool {
        self.noisy_forward
    }

    pub fn gamma_cholesky(&self) -> &Cholesky<T, Dyn> {
        &self.gamma_chol
    }

    pub fn gamma0_cholesky(&self) -> &Cholesky<T, Dyn> {
        &self.gamma0_chol
    }

    /// `G(x)` without the optional evaluation noise.
    pub fn evaluate_clean(&self, x: &DVector<T>, rng: &mut dyn RngCore) -> Result<DVector<T>> {
        check_dim("forward input", self.input_dim(), x.len())?;
        let g = self.forward.evaluate(x, rng)?;
        check_dim("forward output", self.output_dim(), g.len())?;
        Ok(g)
    }

    /// `G(x)`, plus a `N(0, Gamma)` draw when the problem is marked noisy.
    pub fn evaluate(&self, x: &DVector<T>, rng: &mut dyn RngCore) -> Result<DVector<T>> {
        let mut g = self.evaluate_clean(x, rng)?;
        if self.noisy_forward {
            g += self.sample_noise(rng);
        }
        Ok(g)
    }

    /// Evaluates every column of `xs`; each column gets its own child stream
    /// drawn sequentially from `rng`, so results do not depend on scheduling.
    pub fn evaluate_batch(&self, xs: &DMatrix<T>, rng: &mut dyn RngCore) -> Result<DMatrix<T>> {
        self.batch(xs, rng, true)
    }

    /// As [`Self::evaluate_batch`] without the optional evaluation noise.
    pub fn evaluate_batch_clean(&self, xs: &DMatrix<T>, rng: &mut dyn RngCore) -> Result<DMatrix<T>> {
        self.batch(xs, rng, false)
    }

    fn batch(&self, xs: &DMatrix<T>, rng: &mut dyn RngCore, noisy: bool) -> Result<DMatrix<T>> {
        use rayon::prelude::*;
        let seeds: Vec<u64> = (0..xs.ncols()).map(|_| rng.next_u64()).collect();
        let cols: Vec<Result<DVector<T>>> = seeds
            .par_iter()
            .enumerate()
            .map(|(j, &seed)| {
                let mut child = <rng::StreamRng as rand::SeedableRng>::seed_from_u64(seed);
                let x = xs.column(j).into_owned();
                if noisy {
                    self.evaluate(&x, &mut child)
                } else {
                    self.evaluate_clean(&x, &mut child)
                }
            })
            .collect();
        let mut out = DMatrix::zeros(self.output_dim(), xs.ncols());
        for (j, c) in cols.into_iter().enumerate() {
            out.set_column(j, &c?);
        }
        Ok(out)
    }

    pub fn jacobian(&self, x: &DVector<T>) -> Result<DMatrix<T>> {
        let jac = self.forward.jacobian(x)?;
        check_dim("jacobian rows", self.output_dim(), jac.nrows())?;
        check_dim("jacobian cols", self.input_dim(), jac.ncols())?;
        Ok(jac)
    }

    pub fn sample_noise(&self, rng: &mut dyn RngCore) -> DVector<T> {
        self.gamma_chol.l() * rng::normal_vector(self.output_dim(), rng)
    }

    pub fn sample_prior(&self, rng: &mut dyn RngCore) -> DVector<T> {
        &self.prior_mean + self.gamma0_chol.l() * rng::normal_vector(self.input_dim(), rng)
    }

    /// `d_x x n` matrix of prior draws.
    pub fn sample_prior_matrix(&self, n: usize, rng: &mut dyn RngCore) -> DMatrix<T> {
        let mut xs = DMatrix::zeros(self.input_dim(), n);
        for j in 0..n {
            xs.set_column(j, &self.sample_prior(rng));
        }
        xs
    }

    /// Unnormalized Gaussian log prior `-1/2 ||x - m||^2_{Gamma0}`.
    pub fn log_prior(&self, x: &DVector<T>) -> T {
        -T::of(0.5) * linalg::inv_quad(&self.gamma0_chol, &(x - &self.prior_mean))
    }

    /// `-1/2 ||y_dagger - g||^2_Gamma` for an already computed `g = G(x)`.
    pub fn log_likelihood_of_output(&self, g: &DVector<T>) -> T {
        -T::of(0.5) * linalg::inv_quad(&self.gamma_chol, &(&self.y_dagger - g))
    }

    /// Unnormalized log likelihood `-1/2 ||y_dagger - G(x)||^2_Gamma`.
    pub fn log_likelihood(&self, x: &DVector<T>, rng: &mut dyn RngCore) -> Result<T> {
        let g = self.evaluate_clean(x, rng)?;
        Ok(self.log_likelihood_of_output(&g))
    }

    /// Unnormalized log posterior with the Gaussian prior.
    pub fn log_posterior(&self, x: &DVector<T>, rng: &mut dyn RngCore) -> Result<T> {
        Ok(self.log_prior(x) + self.log_likelihood(x, rng)?)
    }
}

/// Log density of the tempered posterior `pi_0(x) L(x)^alpha`, unnormalized.
pub fn tempered_log_density<T, F>(
    p: &InverseProblem<T>,
    x: &DVector<T>,
    alpha: T,
    log_prior: F,
    rng: &mut dyn RngCore,
) -> Result<T>
where
    T: Scalar,
    F: Fn(&DVector<T>) -> T,
{
    check_alpha(alpha)?;
    Ok(log_prior(x) + alpha * p.log_likelihood(x, rng)?)
}

pub(crate) fn check_alpha<T: Scalar>(alpha: T) -> Result<()> {
    if alpha >= T::zero() && alpha <= T::one() {
        Ok(())
    } else {
        Err(Error::invalid(format!("tempering exponent {alpha} outside [0, 1]")))
    }
}

/// Linear maps between original and whitened coordinates,
/// `x_bar = Gamma0^{-1/2} (x - m)` and `y_bar = Gamma^{-1/2} y`.
#[derive(Debug, Clone)]
pub struct WhitenTransform<T: Scalar> {
    /// `Gamma0^{-1/2}`
    pub input_fwd: DMatrix<T>,
    /// `Gamma0^{1/2}`
    pub input_inv: DMatrix<T>,
    /// `Gamma^{-1/2}`
    pub output_fwd: DMatrix<T>,
    /// `Gamma^{1/2}`
    pub output_inv: DMatrix<T>,
    pub prior_mean: DVector<T>,
}

impl<T: Scalar> WhitenTransform<T> {
    pub fn new(gamma0: &DMatrix<T>, gamma: &DMatrix<T>, prior_mean: DVector<T>) -> Result<Self> {
        linalg::check_spd(gamma0, "prior covariance")?;
        linalg::check_spd(gamma, "noise covariance")?;
        Ok(Self {
            input_fwd: linalg::sym_inv_sqrt(gamma0)?,
            input_inv: linalg::sym_sqrt(gamma0)?,
            output_fwd: linalg::sym_inv_sqrt(gamma)?,
            output_inv: linalg::sym_sqrt(gamma)?,
            prior_mean,
        })
    }

    pub fn whiten_input(&self, x: &DVector<T>) -> DVector<T> {
        &self.input_fwd * (x - &self.prior_mean)
    }

    pub fn unwhiten_input(&self, xb: &DVector<T>) -> DVector<T> {
        &self.input_inv * xb + &self.prior_mean
    }

    pub fn whiten_output(&self, y: &DVector<T>) -> DVector<T> {
        &self.output_fwd * y
    }

    pub fn unwhiten_output(&self, yb: &DVector<T>) -> DVector<T> {
        &self.output_inv * yb
    }

    /// Whitens every column of a `d_x x n` sample matrix.
    pub fn whiten_inputs(&self, xs: &DMatrix<T>) -> DMatrix<T> {
        let mut c = xs.clone();
        for mut col in c.column_iter_mut() {
            col -= &self.prior_mean;
        }
        &self.input_fwd * c
    }

    pub fn unwhiten_inputs(&self, xbs: &DMatrix<T>) -> DMatrix<T> {
        let mut out = &self.input_inv * xbs;
        for mut col in out.column_iter_mut() {
            col += &self.prior_mean;
        }
        out
    }

    pub fn whiten_outputs(&self, ys: &DMatrix<T>) -> DMatrix<T> {
        &self.output_fwd * ys
    }

    /// Jacobian in whitened coordinates, `Gamma^{-1/2} dG Gamma0^{1/2}`.
    pub fn whiten_jacobian(&self, jac: &DMatrix<T>) -> DMatrix<T> {
        &self.output_fwd * jac * &self.input_inv
    }
}

/// `G_bar(x_bar) = Gamma^{-1/2} G(Gamma0^{1/2} x_bar + m)`.
///
/// The prior-mean shift lives inside the whitened map; the whitened
/// observation is simply `Gamma^{-1/2} y_dagger`.
pub struct WhitenedForward<T: Scalar> {
    inner: Arc<dyn ForwardModel<T>>,
    transform: WhitenTransform<T>,
}

impl<T: Scalar> ForwardModel<T> for WhitenedForward<T> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    fn evaluate(&self, xb: &DVector<T>, rng: &mut dyn RngCore) -> Result<DVector<T>> {
        let x = self.transform.unwhiten_input(xb);
        Ok(self.transform.whiten_output(&self.inner.evaluate(&x, rng)?))
    }

    fn jacobian(&self, xb: &DVector<T>) -> Result<DMatrix<T>> {
        let x = self.transform.unwhiten_input(xb);
        Ok(self.transform.whiten_jacobian(&self.inner.jacobian(&x)?))
    }

    fn is_stochastic(&self) -> bool {
        self.inner.is_stochastic()
    }
}

/// Whitened problem (identity prior and noise covariances, zero prior mean)
/// together with the transform that produced it.
pub fn whiten_problem<T: Scalar>(
    p: &InverseProblem<T>,
) -> Result<(InverseProblem<T>, WhitenTransform<T>)> {
    let transform = WhitenTransform::new(p.gamma0(), p.gamma(), p.prior_mean().clone())?;
    let forward: Arc<dyn ForwardModel<T>> = Arc::new(WhitenedForward {
        inner: p.forward().clone(),
        transform: transform.clone(),
    });
    let dx = p.input_dim();
    let dy = p.output_dim();
    let whitened = InverseProblem::new(
        forward,
        DMatrix::identity(dy, dy),
        DMatrix::identity(dx, dx),
        DVector::zeros(dx),
        transform.whiten_output(p.y_dagger()),
    )?
    .with_noisy_forward(p.noisy_forward());
    Ok((whitened, transform))
}

/// Column-orthonormal basis spanning `transform * basis`.
///
/// With `transform = Gamma0^{-1/2}` this maps a whitened input basis to the
/// original coordinates so that both define the same reduced variable.
pub fn unwhiten_basis<T: Scalar>(basis: &DMatrix<T>, transform: &DMatrix<T>) -> Result<DMatrix<T>> {
    check_dim("basis rows", transform.ncols(), basis.nrows())?;
    linalg::orthonormalize(&(transform * basis))
}

/// Orthonormal input basis `[U_r, U_perp]` and output basis `[V_s, V_perp]`.
#[derive(Debug, Clone)]
pub struct ReducedSpace<T: Scalar> {
    pub u_r: DMatrix<T>,
    pub u_perp: DMatrix<T>,
    pub v_s: DMatrix<T>,
    pub v_perp: DMatrix<T>,
    /// Whether the bases live in whitened coordinates.
    pub whitened: bool,
}

impl<T: Scalar> ReducedSpace<T> {
    /// Completes `u_r` and `v_s` with orthonormal complements.
    pub fn new(u_r: DMatrix<T>, v_s: DMatrix<T>, whitened: bool) -> Result<Self> {
        let tol = T::of(1e-10);
        if !linalg::is_orthonormal(&u_r, tol) {
            return Err(Error::invalid("input basis is not column-orthonormal"));
        }
        if !linalg::is_orthonormal(&v_s, tol) {
            return Err(Error::invalid("output basis is not column-orthonormal"));
        }
        let u_perp = linalg::complement(&u_r)?;
        let v_perp = linalg::complement(&v_s)?;
        Ok(Self {
            u_r,
            u_perp,
            v_s,
            v_perp,
            whitened,
        })
    }

    /// No reduction: identity bases.
    pub fn full(dx: usize, dy: usize) -> Self {
        Self {
            u_r: DMatrix::identity(dx, dx),
            u_perp: DMatrix::zeros(dx, 0),
            v_s: DMatrix::identity(dy, dy),
            v_perp: DMatrix::zeros(dy, 0),
            whitened: false,
        }
    }

    pub fn r(&self) -> usize {
        self.u_r.ncols()
    }

    pub fn s(&self) -> usize {
        self.v_s.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.u_r.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.v_s.nrows()
    }
}

/// `X_perp | X_r = x_r ~ N(mean_map x_r + offset, cov)` under a Gaussian prior.
#[derive(Debug, Clone)]
pub struct GaussianConditional<T: Scalar> {
    pub mean_map: DMatrix<T>,
    /// Zero for centered priors.
    pub offset: DVector<T>,
    pub cov: DMatrix<T>,
    /// `cov_factor * cov_factor^T = cov`
    pub cov_factor: DMatrix<T>,
}

/// Conditional of the complement coordinates given the retained ones under
/// the centered prior `N(0, Gamma0)`.
pub fn gaussian_conditional<T: Scalar>(
    gamma0: &DMatrix<T>,
    u_r: &DMatrix<T>,
    u_perp: &DMatrix<T>,
) -> Result<GaussianConditional<T>> {
    gaussian_conditional_with_mean(gamma0, &DVector::zeros(gamma0.nrows()), u_r, u_perp)
}

/// As [`gaussian_conditional`] for the prior `N(m, Gamma0)`.
pub fn gaussian_conditional_with_mean<T: Scalar>(
    gamma0: &DMatrix<T>,
    prior_mean: &DVector<T>,
    u_r: &DMatrix<T>,
    u_perp: &DMatrix<T>,
) -> Result<GaussianConditional<T>> {
    let d = gamma0.nrows();
    check_dim("input basis rows", d, u_r.nrows())?;
    check_dim("complement basis rows", d, u_perp.nrows())?;
    check_dim("split dimension", d, u_r.ncols() + u_perp.ncols())?;
    let k = u_perp.ncols();
    let r = u_r.ncols();
    let srr = linalg::symmetrize(&(u_r.transpose() * gamma0 * u_r));
    let spr = u_perp.transpose() * gamma0 * u_r;
    let spp = u_perp.transpose() * gamma0 * u_perp;
    let mean_map = if r == 0 {
        DMatrix::zeros(k, 0)
    } else {
        // mean_map = spr srr^{-1}  <=>  srr mean_map^T = spr^T
        let ch = srr
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("U_r^T Gamma0 U_r".into()))?;
        ch.solve(&spr.transpose()).transpose()
    };
    let cov = linalg::symmetrize(&(spp - &mean_map * spr.transpose()));
    let cov_factor = if k == 0 {
        DMatrix::zeros(0, 0)
    } else {
        linalg::sym_sqrt(&cov)?
    };
    let offset = u_perp.transpose() * prior_mean - &mean_map * (u_r.transpose() * prior_mean);
    Ok(GaussianConditional {
        mean_map,
        offset,
        cov,
        cov_factor,
    })
}

impl<T: Scalar> GaussianConditional<T> {
    pub fn mean(&self, x_r: &DVector<T>) -> DVector<T> {
        &self.mean_map * x_r + &self.offset
    }

    pub fn sample(&self, x_r: &DVector<T>, rng: &mut dyn RngCore) -> DVector<T> {
        let k = self.cov.nrows();
        if k == 0 {
            return DVector::zeros(0);
        }
        self.mean(x_r) + &self.cov_factor * rng::normal_vector(k, rng)
    }
}

/// Reduced posterior over `x_r` with the marginal likelihood estimated from a
/// single conditional draw of `x_perp` per evaluation.
pub struct ReducedPosterior<'a, T: Scalar> {
    problem: &'a InverseProblem<T>,
    space: &'a ReducedSpace<T>,
    cond: &'a GaussianConditional<T>,
    marginal_mean: DVector<T>,
    marginal_chol: Option<Cholesky<T, Dyn>>,
    reduced_obs: DVector<T>,
    reduced_noise_chol: Option<Cholesky<T, Dyn>>,
}

impl<'a, T: Scalar> ReducedPosterior<'a, T> {
    pub fn new(
        problem: &'a InverseProblem<T>,
        space: &'a ReducedSpace<T>,
        cond: &'a GaussianConditional<T>,
    ) -> Result<Self> {
        check_dim("reduced space input", problem.input_dim(), space.input_dim())?;
        check_dim("reduced space output", problem.output_dim(), space.output_dim())?;
        check_dim("conditional dimension", space.u_perp.ncols(), cond.cov.nrows())?;
        let u_r = &space.u_r;
        let v_s = &space.v_s;
        let marginal_mean = u_r.transpose() * problem.prior_mean();
        let marginal_cov = linalg::symmetrize(&(u_r.transpose() * problem.gamma0() * u_r));
        let marginal_chol = if space.r() == 0 {
            None
        } else {
            Some(
                marginal_cov
                    .cholesky()
                    .ok_or(Error::NotPositiveDefinite("marginal prior covariance"))?,
            )
        };
        let reduced_noise = linalg::symmetrize(&(v_s.transpose() * problem.gamma() * v_s));
        let reduced_noise_chol = if space.s() == 0 {
            None
        } else {
            Some(
                reduced_noise
                    .cholesky()
                    .ok_or(Error::NotPositiveDefinite("reduced noise covariance"))?,
            )
        };
        Ok(Self {
            problem,
            space,
            cond,
            marginal_mean,
            marginal_chol,
            reduced_obs: v_s.transpose() * problem.y_dagger(),
            reduced_noise_chol,
        })
    }

    /// Log density of the marginal prior `N(U_r^T m, U_r^T Gamma0 U_r)`, unnormalized.
    pub fn log_marginal_prior(&self, x_r: &DVector<T>) -> T {
        match &self.marginal_chol {
            Some(ch) => -T::of(0.5) * linalg::inv_quad(ch, &(x_r - &self.marginal_mean)),
            None => T::zero(),
        }
    }

    /// `-1/2 ||V_s^T (y_dagger - g)||^2_{V_s^T Gamma V_s}`
    pub fn log_reduced_likelihood_of_output(&self, g: &DVector<T>) -> T {
        match &self.reduced_noise_chol {
            Some(ch) => {
                let res = &self.reduced_obs - self.space.v_s.transpose() * g;
                -T::of(0.5) * linalg::inv_quad(ch, &res)
            }
            None => T::zero(),
        }
    }

    /// Full-space point `U_r x_r + U_perp x_perp` with one conditional draw.
    pub fn lift(&self, x_r: &DVector<T>, rng: &mut dyn RngCore) -> DVector<T> {
        let x_perp = self.cond.sample(x_r, rng);
        &self.space.u_r * x_r + &self.space.u_perp * x_perp
    }

    /// Unnormalized log reduced posterior at `x_r`.
    pub fn log_density(&self, x_r: &DVector<T>, rng: &mut dyn RngCore) -> Result<T> {
        check_dim("reduced parameter", self.space.r(), x_r.len())?;
        let x = self.lift(x_r, rng);
        let g = self.problem.evaluate_clean(&x, rng)?;
        Ok(self.log_marginal_prior(x_r) + self.log_reduced_likelihood_of_output(&g))
    }
}

/// One-sample estimate of the unnormalized reduced log posterior at `x_r`.
pub fn reduced_log_posterior<T: Scalar>(
    p: &InverseProblem<T>,
    space: &ReducedSpace<T>,
    cond: &GaussianConditional<T>,
    x_r: &DVector<T>,
    rng: &mut dyn RngCore,
) -> Result<T> {
    ReducedPosterior::new(p, space, cond)?.log_density(x_r, rng)
}

/// Lifts reduced samples (`r x n`) to the full space (`d_x x n`) with fresh
/// conditional draws, un-whitening when a transform is supplied.
pub fn reconstruct_full_samples<T: Scalar>(
    space: &ReducedSpace<T>,
    cond: &GaussianConditional<T>,
    xr_samples: &DMatrix<T>,
    transform: Option<&WhitenTransform<T>>,
    rng: &mut dyn RngCore,
) -> Result<DMatrix<T>> {
    check_dim("reduced samples", space.r(), xr_samples.nrows())?;
    let n = xr_samples.ncols();
    let mut out = DMatrix::zeros(space.input_dim(), n);
    for j in 0..n {
        let x_r = xr_samples.column(j).into_owned();
        let x_perp = cond.sample(&x_r, rng);
        let x = &space.u_r * x_r + &space.u_perp * x_perp;
        out.set_column(j, &x);
    }
    Ok(match transform {
        Some(t) if space.whitened => t.unwhiten_inputs(&out),
        _ => out,
    })
}

/// Affine forward map `x -> A x`, used throughout the tests.
#[derive(Debug, Clone)]
pub struct LinearForward<T: Scalar> {
    pub a: DMatrix<T>,
}

impl<T: Scalar> ForwardModel<T> for LinearForward<T> {
    fn input_dim(&self) -> usize {
        self.a.ncols()
    }

    fn output_dim(&self) -> usize {
        self.a.nrows()
    }

    fn evaluate(&self, x: &DVector<T>, _rng: &mut dyn RngCore) -> Result<DVector<T>> {
        Ok(&self.a * x)
    }

    fn jacobian(&self, _x: &DVector<T>) -> Result<DMatrix<T>> {
        Ok(self.a.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn scalar_problem(gamma0: f64, gamma: f64, slope: f64, y: f64) -> InverseProblem<f64> {
        InverseProblem::new(
            Arc::new(LinearForward { a: dmatrix![slope] }),
            dmatrix![gamma],
            dmatrix![gamma0],
            dvector![0.0],
            dvector![y],
        )
        .unwrap()
    }

    #[test]
    fn rejects_indefinite_covariances() {
        let err = InverseProblem::<f64>::new(
            Arc::new(LinearForward { a: dmatrix![1.0] }),
            dmatrix![-1.0],
            dmatrix![1.0],
            dvector![0.0],
            dvector![0.0],
        )
        .unwrap_err();
        assert_eq!(err, Error::NotPositiveDefinite("noise covariance"));
    }

    #[test]
    fn whitening_identity_case() {
        let p = scalar_problem(1.0, 1.0, 3.0, 2.0);
        let (w, t) = whiten_problem(&p).unwrap();
        assert_eq!(t.input_fwd, dmatrix![1.0]);
        assert_eq!(t.output_fwd, dmatrix![1.0]);
        let mut r = rng::stream(0, 0);
        let g = w.evaluate(&dvector![0.7], &mut r).unwrap();
        assert!((g[0] - 2.1).abs() < 1e-15);
    }

    #[test]
    fn whitening_scalar_substitution() {
        // Gamma0 = 4, Gamma = 9, G(x) = x  =>  G_bar(x_bar) = (2/3) x_bar
        let p = scalar_problem(4.0, 9.0, 1.0, 3.0);
        let (w, t) = whiten_problem(&p).unwrap();
        let mut r = rng::stream(0, 0);
        let g = w.evaluate(&dvector![1.5], &mut r).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-14);
        assert!((w.y_dagger()[0] - 1.0).abs() < 1e-14);
        assert!((w.jacobian(&dvector![0.0]).unwrap()[(0, 0)] - 2.0 / 3.0).abs() < 1e-14);
        let x = dvector![0.3];
        assert!((t.unwhiten_input(&t.whiten_input(&x))[0] - 0.3).abs() < 1e-14);
    }

    #[test]
    fn log_likelihood_values() {
        let p = scalar_problem(1.0, 4.0, 1.0, 3.0);
        let mut r = rng::stream(0, 0);
        assert_eq!(p.log_likelihood(&dvector![3.0], &mut r).unwrap(), 0.0);
        assert!((p.log_likelihood(&dvector![1.0], &mut r).unwrap() + 0.5).abs() < 1e-15);
        let scaled = scalar_problem(1.0, 8.0, 1.0, 3.0);
        assert!((scaled.log_likelihood(&dvector![1.0], &mut r).unwrap() + 0.25).abs() < 1e-15);
    }

    #[test]
    fn tempered_density_endpoints_and_affinity() {
        let p = scalar_problem(2.0, 1.0, 1.5, 1.0);
        let x = dvector![0.4];
        let lp = |x: &DVector<f64>| p.log_prior(x);
        let mut r = rng::stream(0, 0);
        let d0 = tempered_log_density(&p, &x, 0.0, lp, &mut r).unwrap();
        let d1 = tempered_log_density(&p, &x, 1.0, lp, &mut r).unwrap();
        let dh = tempered_log_density(&p, &x, 0.5, lp, &mut r).unwrap();
        assert_eq!(d0, p.log_prior(&x));
        assert!((d1 - p.log_posterior(&x, &mut r).unwrap()).abs() < 1e-15);
        assert!((dh - 0.5 * (d0 + d1)).abs() < 1e-14);
        assert!(tempered_log_density(&p, &x, 1.5, lp, &mut r).is_err());
    }

    #[test]
    fn unwhiten_basis_examples() {
        let e2 = dmatrix![0.0; 1.0];
        let out = unwhiten_basis(&e2, &dmatrix![1.0, 0.0; 0.0, 2.0]).unwrap();
        assert!(linalg::max_abs(&(out - &e2)) < 1e-14);
        let id = DMatrix::<f64>::identity(2, 2);
        assert!(linalg::max_abs(&(unwhiten_basis(&e2, &id).unwrap() - &e2)) < 1e-14);
    }

    #[test]
    fn conditional_two_by_two_schur() {
        let g0: DMatrix<f64> = dmatrix![2.0, 1.0; 1.0, 2.0];
        let c = gaussian_conditional(&g0, &dmatrix![1.0; 0.0], &dmatrix![0.0; 1.0]).unwrap();
        assert!((c.mean_map[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((c.cov[(0, 0)] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn conditional_identity_prior_is_independent() {
        let mut r = rng::stream(5, 0);
        let u = linalg::orthonormalize(&rng::normal_matrix::<f64>(5, 5, &mut r)).unwrap();
        let u_r = u.columns(0, 2).into_owned();
        let u_p = u.columns(2, 3).into_owned();
        let c = gaussian_conditional(&DMatrix::identity(5, 5), &u_r, &u_p).unwrap();
        assert!(linalg::max_abs(&c.mean_map) < 1e-14);
        assert!(linalg::max_abs(&(c.cov - DMatrix::identity(3, 3))) < 1e-14);
    }

    #[test]
    fn reconstruction_with_full_basis_is_exact() {
        let space = ReducedSpace::<f64>::full(3, 2);
        let cond = gaussian_conditional(&DMatrix::identity(3, 3), &space.u_r, &space.u_perp).unwrap();
        let xr = dmatrix![1.0, 2.0; 3.0, 4.0; 5.0, 6.0];
        let mut r = rng::stream(0, 0);
        let out = reconstruct_full_samples(&space, &cond, &xr, None, &mut r).unwrap();
        assert_eq!(out, xr);
    }
}
