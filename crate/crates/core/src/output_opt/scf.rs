use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::incremental::{append, sphere_descent, stage_starts, ReducedStage};
use super::{objective_j, ObjectiveContext, OptOptions};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use crate::Scalar;

/// Smoothing state of the self-consistent field iteration for one stage.
#[derive(Debug, Clone)]
pub struct ScfState<T: Scalar> {
    /// Smoothed `B^(k)`.
    pub b: DMatrix<T>,
    pub eta: T,
    pub eta_max: T,
    pub eps_history: Vec<T>,
    pub iters_since_perturbation: usize,
    pub iters_since_reset: usize,
    /// Consecutive iterations with `eps^(k) >= eps^(k-1) - 1e-4`.
    pub stagnant: usize,
    /// Iteration of the smallest `eps` since the last reset.
    pub best_iter: usize,
    pub resets: usize,
    pub perturbations: usize,
}

const ETA0: f64 = 0.8;
const ETA_FLOOR: f64 = 1e-12;
const STAGNATION_DROP: f64 = 1e-4;
const PERTURB_AFTER: usize = 20;
const RESET_AFTER: usize = 40;

impl<T: Scalar> ScfState<T> {
    pub fn new(b0: DMatrix<T>) -> Self {
        Self {
            b: b0,
            eta: T::of(ETA0),
            eta_max: T::of(ETA0),
            eps_history: Vec::new(),
            iters_since_perturbation: 0,
            iters_since_reset: 0,
            stagnant: 0,
            best_iter: 0,
            resets: 0,
            perturbations: 0,
        }
    }

    pub fn iteration(&self) -> usize {
        self.eps_history.len()
    }

    pub fn last_eps(&self) -> Option<T> {
        self.eps_history.last().copied()
    }
}

/// Settings of the SCF solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScfOptions {
    pub max_iters: usize,
    pub eps_tol: f64,
    /// Sphere descent used when a stage does not converge.
    pub fallback: OptOptions,
}

impl Default for ScfOptions {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            eps_tol: 1e-4,
            fallback: OptOptions::default(),
        }
    }
}

/// Stage quantities for whitened outputs: with `P = I - V V^T` and unit `v`
/// orthogonal to `V`,
/// `J([V, v]) = J(V) - 2 v^T A_P v + sum_j w_j (v^T M_j v)(v^T C_j v)`,
/// `A_P = A0 + A(V) = sum_j w_j Sym(C_j P M_j)`.
struct StageModel<'a, T: Scalar> {
    ctx: &'a ObjectiveContext<T>,
    a_p: DMatrix<T>,
    j_prev: T,
}

impl<'a, T: Scalar> StageModel<'a, T> {
    fn new(ctx: &'a ObjectiveContext<T>, v: &DMatrix<T>) -> Result<Self> {
        if !ctx.is_whitened() {
            return Err(Error::invalid("the SCF iteration needs an identity noise covariance"));
        }
        let d = ctx.dim();
        let p = DMatrix::identity(d, d) - v * v.transpose();
        let mut a_p = DMatrix::zeros(d, d);
        for t in &ctx.terms {
            a_p += linalg::symmetrize(&(&t.c * (&p * &t.m))) * t.weight;
        }
        Ok(Self {
            ctx,
            a_p: linalg::symmetrize(&a_p),
            j_prev: objective_j(ctx, v)?,
        })
    }

    fn value(&self, v: &DVector<T>) -> T {
        let mut quartic = T::zero();
        for t in &self.ctx.terms {
            quartic += t.weight * (&t.m * v).dot(v) * (&t.c * v).dot(v);
        }
        self.j_prev - T::of(2.0) * (&self.a_p * v).dot(v) + quartic
    }

    /// `B(v) = -1/2 sum_j w_j [(v^T M_j v) C_j + (v^T C_j v) M_j]`
    fn b_bar(&self, v: &DVector<T>) -> DMatrix<T> {
        let d = self.ctx.dim();
        let mut b = DMatrix::zeros(d, d);
        for t in &self.ctx.terms {
            let vm = (&t.m * v).dot(v);
            let vc = (&t.c * v).dot(v);
            b += (&t.c * vm + &t.m * vc) * t.weight;
        }
        b * T::of(-0.5)
    }
}

/// One SCF iteration for the stage after `v_prev`: solves the projected
/// eigenproblem, keeps the eigenvector with the smallest `J`, and updates the
/// smoothed `B` with the adaptive step `eta`.
pub fn scf_step<T: Scalar>(
    ctx: &ObjectiveContext<T>,
    v_prev: &DMatrix<T>,
    state: ScfState<T>,
    rng: &mut dyn RngCore,
) -> Result<(DVector<T>, ScfState<T>)> {
    let model = StageModel::new(ctx, v_prev)?;
    let vp = linalg::complement(v_prev)?;
    iterate(&model, &vp, state, rng)
}

fn iterate<T: Scalar>(
    model: &StageModel<'_, T>,
    vp: &DMatrix<T>,
    mut state: ScfState<T>,
    rng: &mut dyn RngCore,
) -> Result<(DVector<T>, ScfState<T>)> {
    let e = linalg::symmetrize(&(vp.transpose() * (&model.a_p + &state.b) * vp));
    let (_, vecs) = linalg::sym_eigen(&e)?;
    let mut best: Option<(T, DVector<T>)> = None;
    for i in 0..vecs.ncols() {
        let u = vecs.column(i).into_owned();
        let f = model.value(&(vp * &u));
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, u));
        }
    }
    let mut u = best.expect("complement is non-empty").1;
    let mut b_new = model.b_bar(&(vp * &u));
    let eps = (&state.b - &b_new).norm();
    let k = state.iteration();

    let improving = match state.last_eps() {
        None => true,
        Some(prev) => eps <= prev * T::of(1.01),
    };
    state.eta = if improving {
        (state.eta * T::of(1.1)).min(state.eta_max)
    } else {
        (state.eta * T::of(0.5)).max(T::of(ETA_FLOOR))
    };
    match state.last_eps() {
        Some(prev) if eps >= prev - T::of(STAGNATION_DROP) => state.stagnant += 1,
        _ => state.stagnant = 0,
    }
    state.eps_history.push(eps);
    state.iters_since_perturbation += 1;
    state.iters_since_reset += 1;
    let since_reset = state.iters_since_reset;
    let window = &state.eps_history[k + 1 - since_reset..];
    state.best_iter = k + 1 - since_reset + argmin(window);

    if k - state.best_iter > RESET_AFTER && since_reset > RESET_AFTER {
        state.eta = T::one();
        state.eta_max = (state.eta_max * T::of(0.8)).max(T::of(0.01));
        u = rng::normal_vector::<T>(vp.ncols(), rng).normalize();
        b_new = model.b_bar(&(vp * &u));
        state.iters_since_reset = 0;
        state.iters_since_perturbation = 0;
        state.stagnant = 0;
        state.resets += 1;
    } else if state.stagnant >= PERTURB_AFTER
        && state.iters_since_perturbation >= PERTURB_AFTER
        && since_reset >= PERTURB_AFTER
    {
        state.eta = T::one();
        state.iters_since_perturbation = 0;
        state.stagnant = 0;
        state.perturbations += 1;
    }
    state.b = &state.b * (T::one() - state.eta) + b_new * state.eta;
    Ok((u, state))
}

fn argmin<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

/// SCF iteration from `u0` until `eps < tol`; returns the converged vector,
/// if any, and the final state.
fn scf_run<T: Scalar>(
    model: &StageModel<T>,
    vp: &DMatrix<T>,
    u0: &DVector<T>,
    tol: T,
    max_iters: usize,
    stage: usize,
    rng: &mut dyn RngCore,
) -> Result<(Option<DVector<T>>, ScfState<T>)> {
    let mut state = ScfState::new(model.b_bar(&(vp * u0)));
    for _ in 0..max_iters {
        match iterate(model, vp, state.clone(), rng) {
            Ok((u, next)) => {
                state = next;
                if state.last_eps().is_some_and(|e| e < tol) {
                    return Ok((Some(u), state));
                }
            }
            Err(e) => {
                log::warn!("SCF stage {stage} aborted: {e}");
                break;
            }
        }
    }
    Ok((None, state))
}

/// Nested output basis from SCF stages, with sphere descent as the fallback
/// for stages that do not reach `eps < eps_tol`.
#[derive(Debug, Clone)]
pub struct NepvResult<T: Scalar> {
    pub v: DMatrix<T>,
    pub converged: Vec<bool>,
    pub iterations: Vec<usize>,
    pub eps_histories: Vec<Vec<T>>,
    pub stage_j: Vec<T>,
}

impl<T: Scalar> NepvResult<T> {
    pub fn fallback_count(&self) -> usize {
        self.converged.iter().filter(|c| !**c).count()
    }

    pub fn prefix(&self, s: usize) -> DMatrix<T> {
        self.v.columns(0, s).into_owned()
    }
}

pub fn optimize_nepv<T: Scalar>(
    ctx: &ObjectiveContext<T>,
    s_max: usize,
    opts: &ScfOptions,
    rng: &mut dyn RngCore,
) -> Result<NepvResult<T>> {
    let dy = ctx.dim();
    if s_max > dy {
        return Err(Error::invalid(format!("requested {s_max} output directions in dimension {dy}")));
    }
    let tol = T::of(opts.eps_tol);
    let mut v = DMatrix::zeros(dy, 0);
    let mut out = NepvResult {
        v: v.clone(),
        converged: Vec::new(),
        iterations: Vec::new(),
        eps_histories: Vec::new(),
        stage_j: Vec::new(),
    };
    for _ in 0..s_max {
        let model = StageModel::new(ctx, &v)?;
        let vp = linalg::complement(&v)?;
        let reduced = ReducedStage::new(ctx, &v, &vp)?;
        let starts = stage_starts(ctx, &reduced, &vp)?;
        // The stage problem is nonconvex, so SCF can settle on a worse
        // stationary point; run from every start and keep the lowest `J`.
        let mut best: Option<(T, DVector<T>, ScfState<T>)> = None;
        let mut first_state = None;
        for u0 in &starts {
            let (found, state) = scf_run(&model, &vp, u0, tol, opts.max_iters, v.ncols() + 1, rng)?;
            if let Some(u) = found {
                let j = reduced.value(&u)?;
                if best.as_ref().map_or(true, |(bj, _, _)| j < *bj) {
                    best = Some((j, u, state));
                }
            } else if first_state.is_none() {
                first_state = Some(state);
            }
        }
        let converged = best.is_some();
        let (u, state) = match best {
            Some((_, u, state)) => (u, state),
            None => {
                let u = sphere_descent(&reduced, starts[0].clone(), &opts.fallback)?.0;
                (u, first_state.expect("at least one start"))
            }
        };
        v = append(&v, &(&vp * u).normalize());
        out.converged.push(converged);
        out.iterations.push(state.iteration());
        out.eps_histories.push(state.eps_history);
        out.stage_j.push(objective_j(ctx, &v)?);
    }
    out.v = v;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::incremental::stage_gradient;
    use super::super::{optimize_incremental, ObjectiveTerm};
    use super::*;
    use crate::output_opt::tests::random_context;

    #[test]
    fn eta_schedule_first_step() {
        let ctx = random_context(5, 3, 4, 0.5, 51, true);
        let v = DMatrix::zeros(5, 0);
        let state = ScfState::new(DMatrix::zeros(5, 5));
        let (_, s1) = scf_step(&ctx, &v, state, &mut rng::stream(0, 0)).unwrap();
        assert_eq!(s1.eta, 0.8);
        assert_eq!(s1.eta_max, 0.8);
        assert_eq!(s1.eps_history.len(), 1);
    }

    #[test]
    fn stage_model_matches_objective() {
        let ctx = random_context(6, 3, 4, 0.7, 52, false);
        let mut r = rng::stream(52, 1);
        let v = linalg::orthonormalize(&rng::normal_matrix::<f64>(6, 2, &mut r)).unwrap();
        let model = StageModel::new(&ctx, &v).unwrap();
        let vp = linalg::complement(&v).unwrap();
        let u = rng::normal_vector::<f64>(4, &mut r).normalize();
        let direct = objective_j(&ctx, &append(&v, &(&vp * &u))).unwrap();
        assert!((model.value(&(&vp * &u)) - direct).abs() < 1e-10 * direct.max(1.0));
    }

    #[test]
    fn converged_stage_is_stationary() {
        let ctx = random_context(6, 4, 5, 0.5, 53, false);
        // A tight tolerance drives B^(k-1) to B(u^(k)), the fixed point.
        let opts = ScfOptions {
            eps_tol: 1e-10,
            ..ScfOptions::default()
        };
        let res = optimize_nepv(&ctx, 3, &opts, &mut rng::stream(1, 0)).unwrap();
        assert!(linalg::is_orthonormal(&res.v, 1e-10));
        assert!(res.eps_histories.iter().flatten().all(|&e| e >= 0.0));
        assert_eq!(res.converged.len(), 3);
        assert!(res.converged[0]);
        for s in 0..3 {
            if !res.converged[s] {
                continue;
            }
            let v = res.prefix(s);
            let vp = linalg::complement(&v).unwrap();
            let u = vp.transpose() * res.v.column(s);
            let g = stage_gradient(&ctx, &v, &vp, &u).unwrap();
            let rg = &g - &u * u.dot(&g);
            assert!(rg.norm() < 1e-6 * g.norm().max(1.0), "stage {s}: {}", rg.norm());
        }
        let inc = optimize_incremental(&ctx, 3, &OptOptions::default()).unwrap();
        for s in 1..=3 {
            if res.converged[..s].iter().all(|c| *c) {
                assert!(linalg::max_principal_angle(&res.prefix(s), &inc.prefix(s)) < 1e-4);
            }
        }
    }

    #[test]
    fn rejects_non_identity_noise() {
        let term = ObjectiveTerm {
            weight: 1.0,
            c: DMatrix::identity(2, 2),
            m: DMatrix::identity(2, 2),
        };
        let ctx = ObjectiveContext::from_terms(vec![term], DMatrix::identity(2, 2) * 2.0).unwrap();
        assert!(optimize_nepv(&ctx, 1, &ScfOptions::default(), &mut rng::stream(0, 0)).is_err());
    }
}
