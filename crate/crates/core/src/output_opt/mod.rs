//! Output-space reduction: the objective `J(V_s)`, its gradients, and three
//! minimizers (Grassmann descent, greedy nesting, self-consistent field).

mod full;
mod incremental;
mod scf;

pub use full::{optimize_full, FullResult};
pub use incremental::{optimize_incremental, IncrementalResult};
pub use scf::{optimize_nepv, scf_step, NepvResult, ScfOptions, ScfState};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::reduction::GradientProvider;
use crate::Scalar;

/// One weighted term `w Tr[P M P C]` of the objective.
#[derive(Debug, Clone)]
pub struct ObjectiveTerm<T: Scalar> {
    pub weight: T,
    /// `dG dG^T`
    pub c: DMatrix<T>,
    /// `(1 - alpha) Gamma + alpha^2 r r^T`, averaged over samples sharing `c`.
    pub m: DMatrix<T>,
}

/// Precomputed sample terms defining `J(V_s) = sum_j w_j Tr[P_s M_j P_s C_j]`.
#[derive(Debug, Clone)]
pub struct ObjectiveContext<T: Scalar> {
    pub terms: Vec<ObjectiveTerm<T>>,
    pub gamma: DMatrix<T>,
    pub gamma_inv: DMatrix<T>,
    /// `sum_j w_j Sym(C_j M_j)`
    pub a0_bar: DMatrix<T>,
}

fn sym<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    linalg::symmetrize(m)
}

impl<T: Scalar> ObjectiveContext<T> {
    /// Context at temperature `alpha` from gradients and forward evaluations
    /// (`d_y x n`) of `n` samples.
    ///
    /// Samples sharing one gradient collapse into a single term with the
    /// averaged `M`; `J` is linear in `M`, so this is exact.
    pub fn new(
        grads: &GradientProvider<T>,
        evaluations: &DMatrix<T>,
        y_dagger: &DVector<T>,
        gamma: &DMatrix<T>,
        alpha: T,
    ) -> Result<Self> {
        crate::bip::check_alpha(alpha)?;
        let n = evaluations.ncols();
        let dy = y_dagger.len();
        if n == 0 {
            return Err(Error::invalid("no samples for the output objective"));
        }
        check_dim("evaluations", dy, evaluations.nrows())?;
        check_dim("noise covariance", dy, gamma.nrows())?;
        let a1 = T::one() - alpha;
        let a2 = alpha * alpha;
        let m_of = |j: usize| -> DMatrix<T> {
            let r = y_dagger - evaluations.column(j);
            gamma * a1 + &r * r.transpose() * a2
        };
        let shared = match grads {
            GradientProvider::Shared(g) => Some(g),
            GradientProvider::PerSample(gs) => {
                check_dim("per-sample gradients", n, gs.len())?;
                if gs.iter().all(|g| g == &gs[0]) {
                    Some(&gs[0])
                } else {
                    None
                }
            }
        };
        let inv_n = T::one() / T::of_usize(n);
        let terms = match shared {
            Some(g) => {
                check_dim("gradient rows", dy, g.nrows())?;
                let mut m = DMatrix::zeros(dy, dy);
                for j in 0..n {
                    m += m_of(j);
                }
                vec![ObjectiveTerm {
                    weight: T::one(),
                    c: g * g.transpose(),
                    m: m * inv_n,
                }]
            }
            None => (0..n)
                .map(|j| {
                    let g = grads.at(j);
                    check_dim("gradient rows", dy, g.nrows())?;
                    Ok(ObjectiveTerm {
                        weight: inv_n,
                        c: g * g.transpose(),
                        m: m_of(j),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Self::from_terms(terms, gamma.clone())
    }

    pub fn from_terms(terms: Vec<ObjectiveTerm<T>>, gamma: DMatrix<T>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::invalid("objective needs at least one term"));
        }
        let dy = gamma.nrows();
        let mut a0 = DMatrix::zeros(dy, dy);
        for t in &terms {
            check_dim("objective term", dy, t.c.nrows())?;
            check_dim("objective term", dy, t.m.nrows())?;
            a0 += sym(&(&t.c * &t.m)) * t.weight;
        }
        let gamma_inv = linalg::inv_spd(&gamma)?;
        Ok(Self {
            terms,
            gamma,
            gamma_inv,
            a0_bar: sym(&a0),
        })
    }

    /// Weighted union of contexts over a temperature sequence.
    pub fn accumulate(contexts: &[ObjectiveContext<T>], weights: &[T]) -> Result<Self> {
        if contexts.is_empty() || contexts.len() != weights.len() {
            return Err(Error::invalid("one weight per context required"));
        }
        let total = weights.iter().fold(T::zero(), |a, &b| a + b);
        let mut terms = Vec::new();
        for (ctx, &w) in contexts.iter().zip(weights) {
            terms.extend(ctx.terms.iter().map(|t| ObjectiveTerm {
                weight: t.weight * w / total,
                c: t.c.clone(),
                m: t.m.clone(),
            }));
        }
        Self::from_terms(terms, contexts[0].gamma.clone())
    }

    pub fn dim(&self) -> usize {
        self.gamma.nrows()
    }

    /// Whether the noise covariance is the identity (whitened outputs).
    pub fn is_whitened(&self) -> bool {
        linalg::max_abs(&(&self.gamma - DMatrix::identity(self.dim(), self.dim()))) < T::of(1e-10)
    }

    /// `sum_j w_j C_j`, the output diagnostic at `alpha = 0` for `Gamma = I`.
    pub fn c_bar(&self) -> DMatrix<T> {
        let mut c = DMatrix::zeros(self.dim(), self.dim());
        for t in &self.terms {
            c += &t.c * t.weight;
        }
        c
    }
}

/// `(V^T Gamma V)^{-1}`, rejecting singular blocks.
fn gram_inverse<T: Scalar>(ctx: &ObjectiveContext<T>, v: &DMatrix<T>) -> Result<DMatrix<T>> {
    let g = sym(&(v.transpose() * &ctx.gamma * v));
    linalg::inv_spd(&g).map_err(|_| Error::Singular("V_s^T Gamma V_s".into()))
}

/// `P_s = Gamma^{-1} - V (V^T Gamma V)^{-1} V^T`.
pub fn projector<T: Scalar>(ctx: &ObjectiveContext<T>, v: &DMatrix<T>) -> Result<DMatrix<T>> {
    check_dim("output basis", ctx.dim(), v.nrows())?;
    if v.ncols() == 0 {
        return Ok(ctx.gamma_inv.clone());
    }
    let k = gram_inverse(ctx, v)?;
    Ok(sym(&(&ctx.gamma_inv - v * k * v.transpose())))
}

/// `J(V_s) = sum_j w_j Tr[P_s M_j P_s C_j]`.
pub fn objective_j<T: Scalar>(ctx: &ObjectiveContext<T>, v: &DMatrix<T>) -> Result<T> {
    if v.ncols() > ctx.dim() {
        return Err(Error::invalid("more output directions than outputs"));
    }
    if v.ncols() == ctx.dim() {
        return Ok(T::zero());
    }
    let p = projector(ctx, v)?;
    Ok(objective_with_projector(ctx, &p))
}

fn objective_with_projector<T: Scalar>(ctx: &ObjectiveContext<T>, p: &DMatrix<T>) -> T {
    let mut j = T::zero();
    for t in &ctx.terms {
        let pmp = p * &t.m * p;
        j += pmp.dot(&t.c) * t.weight;
    }
    j
}

/// Euclidean and Riemannian gradients of `J` at `V_s`.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    pub euclidean: DMatrix<T>,
    pub riemannian: DMatrix<T>,
}

/// `-4 Gamma P (sum_j w_j Sym(C_j P M_j)) V (V^T Gamma V)^{-1}` and its
/// projection onto the tangent space at `V_s`.
pub fn grad_j<T: Scalar>(ctx: &ObjectiveContext<T>, v: &DMatrix<T>) -> Result<Gradients<T>> {
    let (dy, s) = (ctx.dim(), v.ncols());
    check_dim("output basis", dy, v.nrows())?;
    if s >= dy {
        return Ok(Gradients {
            euclidean: DMatrix::zeros(dy, s),
            riemannian: DMatrix::zeros(dy, s),
        });
    }
    let k = gram_inverse(ctx, v)?;
    let p = sym(&(&ctx.gamma_inv - v * &k * v.transpose()));
    let mut s_mat = DMatrix::zeros(dy, dy);
    for t in &ctx.terms {
        s_mat += sym(&(&t.c * (&p * &t.m))) * t.weight;
    }
    let euclidean = (&ctx.gamma * &p * s_mat * v * k) * T::of(-4.0);
    let riemannian = &euclidean - v * (v.transpose() * &euclidean);
    Ok(Gradients {
        euclidean,
        riemannian,
    })
}

/// Top-`s` eigenvectors of `sum_j w_j C_j`: the exact minimizer at `alpha = 0`
/// for whitened outputs.
pub fn output_basis_alpha0<T: Scalar>(ctx: &ObjectiveContext<T>, s: usize) -> Result<DMatrix<T>> {
    if s > ctx.dim() {
        return Err(Error::invalid(format!(
            "requested {s} output directions in dimension {}",
            ctx.dim()
        )));
    }
    linalg::leading_eigenvectors(&sym(&ctx.c_bar()), s)
}

/// Termination reason of a descent run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptStatus {
    Converged,
    /// The objective stopped decreasing (relative change below `stall_tol`
    /// over the window, or no Armijo step above roundoff) before the
    /// gradient tolerance was met; on badly conditioned objectives that
    /// tolerance can lie below the attainable floor.
    Stalled,
    MaxIters,
    LineSearchFailed,
}

impl OptStatus {
    /// Converged, or stalled at the floating-point floor.
    pub fn is_stationary(self) -> bool {
        matches!(self, OptStatus::Converged | OptStatus::Stalled)
    }
}

/// Descent settings shared by the Grassmann and sphere optimizers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptOptions {
    pub max_iters: usize,
    /// Stop when the Riemannian gradient norm drops below
    /// `grad_tol * max(1, J(init))`.
    pub grad_tol: f64,
    pub armijo_c: f64,
    pub max_halvings: usize,
    /// Stop as stalled when `J` fell by at most `stall_tol * max(1, |J|)`
    /// over the last `stall_window` iterations.
    pub stall_window: usize,
    pub stall_tol: f64,
}

impl Default for OptOptions {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            grad_tol: 1e-8,
            armijo_c: 1e-4,
            max_halvings: 60,
            stall_window: 25,
            stall_tol: 1e-12,
        }
    }
}

/// Riemannian descent on a matrix manifold with a Barzilai-Borwein initial
/// step, Armijo backtracking and a caller-supplied retraction.
pub(crate) struct Descent<T: Scalar> {
    pub x: DMatrix<T>,
    pub f: T,
    pub iters: usize,
    pub status: OptStatus,
    pub history: Vec<T>,
}

pub(crate) fn riemannian_descent<T, F, G, R>(
    x0: DMatrix<T>,
    mut f: F,
    mut grad: G,
    retract: R,
    opts: &OptOptions,
) -> Result<Descent<T>>
where
    T: Scalar,
    F: FnMut(&DMatrix<T>) -> Result<T>,
    G: FnMut(&DMatrix<T>) -> Result<DMatrix<T>>,
    R: Fn(&DMatrix<T>) -> Result<DMatrix<T>>,
{
    let mut x = x0;
    let mut fx = f(&x)?;
    let tol = T::of(opts.grad_tol) * fx.max(T::one());
    let c = T::of(opts.armijo_c);
    let mut history = vec![fx];
    let mut prev: Option<(DMatrix<T>, DMatrix<T>)> = None;
    let mut status = OptStatus::MaxIters;
    let mut iters = 0;
    while iters < opts.max_iters {
        let g = grad(&x)?;
        let gnorm2 = g.norm_squared();
        if gnorm2.sqrt() < tol {
            status = OptStatus::Converged;
            break;
        }
        let mut t = match &prev {
            Some((dx, dg)) => {
                let num = dx.norm_squared();
                let den = dx.dot(dg).abs();
                if den > T::zero() && (num / den).is_finite_value() {
                    num / den
                } else {
                    T::one() / gnorm2.sqrt()
                }
            }
            None => T::one() / gnorm2.sqrt(),
        };
        let mut accepted = None;
        let mut retracted = false;
        for _ in 0..=opts.max_halvings {
            if let Ok(cand) = retract(&(&x - &g * t)) {
                retracted = true;
                let fc = f(&cand)?;
                if fc <= fx - c * t * gnorm2 {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            t *= T::of(0.5);
        }
        let Some((xn, fxn)) = accepted else {
            // A smooth objective satisfies Armijo for small enough steps, so
            // failing with valid retractions means roundoff dominates.
            status = if retracted { OptStatus::Stalled } else { OptStatus::LineSearchFailed };
            break;
        };
        let gn = grad(&xn)?;
        prev = Some((&xn - &x, &gn - &g));
        x = xn;
        fx = fxn;
        history.push(fx);
        iters += 1;
        let w = opts.stall_window;
        if w > 0 && history.len() > w && history[history.len() - 1 - w] - fx <= T::of(opts.stall_tol) * fx.abs().max(T::one()) {
            status = OptStatus::Stalled;
            break;
        }
    }
    Ok(Descent {
        x,
        f: fx,
        iters,
        status,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    pub(crate) fn random_context(dy: usize, dx: usize, n: usize, alpha: f64, seed: u64, shared: bool) -> ObjectiveContext<f64> {
        let mut r = rng::stream(seed, 40);
        let grads = if shared {
            GradientProvider::Shared(rng::normal_matrix(dy, dx, &mut r))
        } else {
            GradientProvider::PerSample((0..n).map(|_| rng::normal_matrix(dy, dx, &mut r)).collect())
        };
        let evals = rng::normal_matrix::<f64>(dy, n, &mut r);
        let y = rng::normal_vector::<f64>(dy, &mut r);
        ObjectiveContext::new(&grads, &evals, &y, &DMatrix::identity(dy, dy), alpha).unwrap()
    }

    fn random_basis(d: usize, s: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::stream(seed, 41);
        linalg::orthonormalize(&rng::normal_matrix(d, s, &mut r)).unwrap()
    }

    #[test]
    fn unreachable_tolerance_stalls_instead_of_spinning() {
        // Rayleigh quotient of an ill-conditioned matrix on the sphere, offset
        // so that roundoff in f hides the last digits of progress.
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(6, |i, _| 10f64.powi(i as i32)));
        let sphere = |u: &DMatrix<f64>| Ok::<_, Error>(u / u.norm());
        let opts = OptOptions { grad_tol: 1e-30, ..OptOptions::default() };
        let run = riemannian_descent(
            random_basis(6, 1, 5),
            |u| Ok(1e8 + (u.transpose() * &a * u)[(0, 0)]),
            |u| {
                let g = &a * u * 2.0;
                Ok(&g - u * (u.transpose() * &g))
            },
            sphere,
            &opts,
        )
        .unwrap();
        assert_eq!(run.status, OptStatus::Stalled);
        assert!(run.iters < opts.max_iters);
        let gap = (run.f - (1e8 + 1.0)) / 1e8;
        assert!((0.0..1e-10).contains(&gap), "{gap}");
    }

    #[test]
    fn full_rank_projection_gives_zero() {
        let ctx = random_context(4, 3, 5, 0.5, 1, false);
        let v = random_basis(4, 4, 1);
        assert_eq!(objective_j(&ctx, &v).unwrap(), 0.0);
        let g = grad_j(&ctx, &v).unwrap();
        assert_eq!(linalg::max_abs(&g.riemannian), 0.0);
        assert_eq!(linalg::max_abs(&g.euclidean), 0.0);
    }

    #[test]
    fn alpha_zero_trace_identity() {
        let ctx = random_context(5, 3, 6, 0.0, 2, false);
        let v = random_basis(5, 2, 2);
        let vp = linalg::complement(&v).unwrap();
        let direct = (vp.transpose() * ctx.c_bar() * &vp).trace();
        assert!((objective_j(&ctx, &v).unwrap() - direct).abs() < 1e-10 * direct.abs().max(1.0));
    }

    #[test]
    fn two_by_two_hand_value() {
        // Gamma = I, V = e1 => P = diag(0, 1); C = g g^T, M = diag(m1, m2)
        // J = m2 * g2^2.
        let term = ObjectiveTerm {
            weight: 1.0,
            c: dmatrix![1.0, 2.0; 2.0, 4.0],
            m: dmatrix![3.0, 0.0; 0.0, 5.0],
        };
        let ctx = ObjectiveContext::from_terms(vec![term], DMatrix::identity(2, 2)).unwrap();
        let j: f64 = objective_j(&ctx, &dmatrix![1.0; 0.0]).unwrap();
        assert!((j - 20.0).abs() < 1e-14);
    }

    #[test]
    fn riemannian_gradient_matches_finite_differences() {
        for (alpha, shared) in [(0.0, false), (0.5, false), (1.0, false), (0.5, true), (1.0, true)] {
            let ctx = random_context(6, 4, 5, alpha, 3, shared);
            let v = random_basis(6, 2, 3);
            let g = grad_j(&ctx, &v).unwrap().riemannian;
            let mut r = rng::stream(9, 0);
            for _ in 0..5 {
                let z = rng::normal_matrix::<f64>(6, 2, &mut r);
                let xi = &z - &v * (v.transpose() * &z);
                let h = 1e-6;
                let fp = objective_j(&ctx, &linalg::orthonormalize(&(&v + &xi * h)).unwrap()).unwrap();
                let fm = objective_j(&ctx, &linalg::orthonormalize(&(&v - &xi * h)).unwrap()).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let an = g.dot(&xi);
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "alpha {alpha}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn alpha0_basis_is_left_singular_subspace() {
        let mut r = rng::stream(4, 0);
        let a = rng::normal_matrix::<f64>(5, 3, &mut r);
        let ctx = ObjectiveContext::new(
            &GradientProvider::Shared(a.clone()),
            &DMatrix::zeros(5, 1),
            &DVector::zeros(5),
            &DMatrix::identity(5, 5),
            0.0,
        )
        .unwrap();
        let v = output_basis_alpha0(&ctx, 2).unwrap();
        let svd = a.svd(true, false);
        let mut idx: Vec<usize> = (0..3).collect();
        idx.sort_by(|&i, &j| svd.singular_values[j].partial_cmp(&svd.singular_values[i]).unwrap());
        let u = svd.u.unwrap();
        let top = DMatrix::from_columns(&[u.column(idx[0]), u.column(idx[1])]);
        assert!(linalg::max_principal_angle(&v, &top) < 1e-8);
        assert_eq!(objective_j(&ctx, &output_basis_alpha0(&ctx, 5).unwrap()).unwrap(), 0.0);
        for seed in 0..5 {
            let rb = random_basis(5, 2, seed + 100);
            assert!(objective_j(&ctx, &v).unwrap() <= objective_j(&ctx, &rb).unwrap() + 1e-10);
        }
    }

    #[test]
    fn accumulate_is_weighted_average() {
        let c0 = random_context(4, 2, 3, 0.0, 5, false);
        let c1 = random_context(4, 2, 3, 1.0, 6, false);
        let acc = ObjectiveContext::accumulate(&[c0.clone(), c1.clone()], &[1.0, 3.0]).unwrap();
        let v = random_basis(4, 1, 7);
        let want = 0.25 * objective_j(&c0, &v).unwrap() + 0.75 * objective_j(&c1, &v).unwrap();
        assert!((objective_j(&acc, &v).unwrap() - want).abs() < 1e-10 * want.max(1.0));
    }

    fn random_spd(d: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::stream(seed, 42);
        let b = rng::normal_matrix::<f64>(d, d, &mut r);
        &b * b.transpose() + DMatrix::identity(d, d) * 0.5
    }

    proptest! {
        #[test]
        fn projector_is_gamma_idempotent(seed in 0u64..10_000, s in 0usize..6) {
            let d = 6;
            let gamma = random_spd(d, seed);
            let term = ObjectiveTerm { weight: 1.0, c: DMatrix::identity(d, d), m: DMatrix::identity(d, d) };
            let ctx = ObjectiveContext::from_terms(vec![term], gamma.clone()).unwrap();
            let v = random_basis(d, s, seed);
            let p = projector(&ctx, &v).unwrap();
            let scale = linalg::max_abs(&p).max(1.0);
            prop_assert!(linalg::max_abs(&(&p * &gamma * &p - &p)) < 1e-10 * scale);
        }

        #[test]
        fn objective_nonnegative_and_subspace_dependent(seed in 0u64..10_000, alpha in 0.0f64..=1.0, s in 1usize..5) {
            let ctx = random_context(5, 3, 4, alpha, seed, seed % 2 == 0);
            let v = random_basis(5, s, seed);
            let j = objective_j(&ctx, &v).unwrap();
            prop_assert!(j >= -1e-10);
            let q = random_basis(s, s, seed + 1);
            let jr = objective_j(&ctx, &(&v * q)).unwrap();
            prop_assert!((j - jr).abs() <= 1e-10 * j.abs().max(1.0));
        }

        #[test]
        fn riemannian_gradient_is_tangent(seed in 0u64..10_000, alpha in 0.0f64..=1.0, s in 1usize..5) {
            let ctx = random_context(5, 3, 4, alpha, seed, false);
            let v = random_basis(5, s, seed);
            let g = grad_j(&ctx, &v).unwrap();
            let scale = linalg::max_abs(&g.euclidean).max(1.0);
            prop_assert!(linalg::max_abs(&(v.transpose() * g.riemannian)) < 1e-10 * scale);
        }
    }
}
