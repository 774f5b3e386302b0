use nalgebra::{DMatrix, DVector};

use super::{objective_j, projector, riemannian_descent, ObjectiveContext, OptOptions, OptStatus};
use crate::error::{Error, Result};
use crate::linalg;
use crate::Scalar;

/// Starting vectors tried per stage.
const STARTS: usize = 4;

/// Nested greedy output basis; every column prefix is itself an output basis.
#[derive(Debug, Clone)]
pub struct IncrementalResult<T: Scalar> {
    pub v: DMatrix<T>,
    /// `J` of each prefix `V_1, ..., V_{s_max}`.
    pub stage_j: Vec<T>,
    pub stage_iterations: Vec<usize>,
    pub stage_status: Vec<OptStatus>,
}

impl<T: Scalar> IncrementalResult<T> {
    pub fn prefix(&self, s: usize) -> DMatrix<T> {
        self.v.columns(0, s).into_owned()
    }
}

/// Appends one column at a time, each minimizing `J([V_{s-1}, V_perp u])` over
/// unit `u` by descent on the sphere.
pub fn optimize_incremental<T: Scalar>(
    ctx: &ObjectiveContext<T>,
    s_max: usize,
    opts: &OptOptions,
) -> Result<IncrementalResult<T>> {
    let dy = ctx.dim();
    if s_max > dy {
        return Err(Error::invalid(format!("requested {s_max} output directions in dimension {dy}")));
    }
    let mut v = DMatrix::zeros(dy, 0);
    let mut out = IncrementalResult {
        v: v.clone(),
        stage_j: Vec::with_capacity(s_max),
        stage_iterations: Vec::with_capacity(s_max),
        stage_status: Vec::with_capacity(s_max),
    };
    for _ in 0..s_max {
        let (u, iters, status) = incremental_stage(ctx, &v, opts)?;
        let vp = linalg::complement(&v)?;
        let col = &vp * u;
        v = append(&v, &(col.normalize()));
        out.stage_j.push(objective_j(ctx, &v)?);
        out.stage_iterations.push(iters);
        out.stage_status.push(status);
    }
    out.v = v;
    Ok(out)
}

pub(crate) fn append<T: Scalar>(v: &DMatrix<T>, col: &DVector<T>) -> DMatrix<T> {
    let mut out = v.clone().insert_column(v.ncols(), T::zero());
    out.set_column(v.ncols(), col);
    out
}

/// The stage objective `u -> J([V, V_perp u])` projected onto the complement
/// coordinates, so that each evaluation costs `O(m^2)` per term.
///
/// With `P = P(V)` and `z = P Gamma w`, `c = w^T Gamma z`, appending `w` gives
/// `P' = P - z z^T / c`, hence
/// `J([V, w]) = J(V) - 2 z^T A_P z / c + sum_j w_j (z^T M_j z)(z^T C_j z) / c^2`
/// with `A_P = sum_j w_j Sym(C_j P M_j)`. Writing `z = B u`, `B = P Gamma V_perp`,
/// everything reduces to `m x m` matrices.
pub(crate) struct ReducedStage<T: Scalar> {
    j_prev: T,
    a: DMatrix<T>,
    g: DMatrix<T>,
    terms: Vec<(T, DMatrix<T>, DMatrix<T>)>,
}

impl<T: Scalar> ReducedStage<T> {
    pub(crate) fn new(ctx: &ObjectiveContext<T>, v: &DMatrix<T>, vp: &DMatrix<T>) -> Result<Self> {
        let p = projector(ctx, v)?;
        let b = &p * &ctx.gamma * vp;
        let mut a_p = DMatrix::zeros(ctx.dim(), ctx.dim());
        let mut terms = Vec::with_capacity(ctx.terms.len());
        for t in &ctx.terms {
            a_p += linalg::symmetrize(&(&t.c * (&p * &t.m))) * t.weight;
            let m = linalg::symmetrize(&(b.transpose() * &t.m * &b));
            let c = linalg::symmetrize(&(b.transpose() * &t.c * &b));
            terms.push((t.weight, m, c));
        }
        Ok(Self {
            j_prev: objective_j(ctx, v)?,
            a: linalg::symmetrize(&(b.transpose() * a_p * &b)),
            g: linalg::symmetrize(&(vp.transpose() * &ctx.gamma * &b)),
            terms,
        })
    }

    fn parts(&self, u: &DVector<T>) -> (T, T, T) {
        let q = self
            .terms
            .iter()
            .fold(T::zero(), |acc, (w, m, c)| acc + *w * (m * u).dot(u) * (c * u).dot(u));
        ((&self.a * u).dot(u), (&self.g * u).dot(u), q)
    }

    pub(crate) fn value(&self, u: &DVector<T>) -> Result<T> {
        let (a, c, q) = self.parts(u);
        if !(c > T::zero()) {
            return Err(Error::Singular("appended output direction".into()));
        }
        Ok(self.j_prev - T::of(2.0) * a / c + q / (c * c))
    }

    /// Euclidean gradient of [`Self::value`] in `u`.
    pub(crate) fn gradient(&self, u: &DVector<T>) -> Result<DVector<T>> {
        let (a, c, q) = self.parts(u);
        if !(c > T::zero()) {
            return Err(Error::Singular("appended output direction".into()));
        }
        let two = T::of(2.0);
        let da = &self.a * u * two;
        let dc = &self.g * u * two;
        let mut dq = DVector::zeros(u.len());
        for (w, m, cm) in &self.terms {
            let mu = m * u;
            let cu = cm * u;
            dq += (&mu * cu.dot(u) + &cu * mu.dot(u)) * (*w * two);
        }
        Ok(da * (-two / c) + dc * (two * a / (c * c) - two * q / (c * c * c)) + dq / (c * c))
    }
}

/// Stage objective `u -> J([V, V_perp u])` for unit `u`, evaluated directly.
#[cfg(test)]
pub(crate) fn stage_objective<T: Scalar>(
    ctx: &ObjectiveContext<T>,
    v: &DMatrix<T>,
    vp: &DMatrix<T>,
    u: &DVector<T>,
) -> Result<T> {
    objective_j(ctx, &append(v, &(vp * u)))
}

/// `V_perp^T dJ e_s`, the Euclidean gradient of the stage objective in `u`.
#[cfg(test)]
pub(crate) fn stage_gradient<T: Scalar>(
    ctx: &ObjectiveContext<T>,
    v: &DMatrix<T>,
    vp: &DMatrix<T>,
    u: &DVector<T>,
) -> Result<DVector<T>> {
    let full = append(v, &(vp * u));
    let g = super::grad_j(ctx, &full)?.euclidean;
    Ok(vp.transpose() * g.column(v.ncols()))
}

/// Leading eigenvectors of `V_perp^T A0 V_perp`, best stage objective first.
pub(crate) fn stage_starts<T: Scalar>(
    ctx: &ObjectiveContext<T>,
    stage: &ReducedStage<T>,
    vp: &DMatrix<T>,
) -> Result<Vec<DVector<T>>> {
    let a = linalg::symmetrize(&(vp.transpose() * &ctx.a0_bar * vp));
    let (_, vecs) = linalg::sym_eigen(&a)?;
    let mut scored = (0..vecs.ncols().min(STARTS))
        .map(|i| {
            let u = vecs.column(i).into_owned();
            Ok((stage.value(&u)?, u))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    Ok(scored.into_iter().map(|(_, u)| u).collect())
}

/// Sphere descent for one stage; returns the unit vector in complement
/// coordinates.
pub(crate) fn sphere_descent<T: Scalar>(
    stage: &ReducedStage<T>,
    u0: DVector<T>,
    opts: &OptOptions,
) -> Result<(DVector<T>, usize, OptStatus)> {
    if u0.len() == 1 {
        return Ok((DVector::from_element(1, T::one()), 0, OptStatus::Converged));
    }
    let as_vec = |m: &DMatrix<T>| DVector::from_column_slice(m.as_slice());
    let run = riemannian_descent(
        DMatrix::from_column_slice(u0.len(), 1, u0.as_slice()),
        |u| stage.value(&as_vec(u)),
        |u| {
            let u = as_vec(u);
            let g = stage.gradient(&u)?;
            let rg = &g - &u * u.dot(&g);
            Ok(DMatrix::from_column_slice(rg.len(), 1, rg.as_slice()))
        },
        |u| {
            let n = u.norm();
            if n > T::zero() {
                Ok(u / n)
            } else {
                Err(Error::RankDeficient("zero vector on the sphere".into()))
            }
        },
        opts,
    )?;
    Ok((as_vec(&run.x), run.iters, run.status))
}

/// The stage problem is nonconvex on the sphere, so the descent runs from
/// several starts and keeps the lowest objective.
fn incremental_stage<T: Scalar>(
    ctx: &ObjectiveContext<T>,
    v: &DMatrix<T>,
    opts: &OptOptions,
) -> Result<(DVector<T>, usize, OptStatus)> {
    let vp = linalg::complement(v)?;
    let stage = ReducedStage::new(ctx, v, &vp)?;
    let mut best: Option<(T, DVector<T>, OptStatus)> = None;
    let mut iters = 0;
    for u0 in stage_starts(ctx, &stage, &vp)? {
        let (u, it, status) = sphere_descent(&stage, u0, opts)?;
        iters += it;
        let f = stage.value(&u)?;
        if best.as_ref().is_none_or(|(bf, _, _)| f < *bf) {
            best = Some((f, u, status));
        }
    }
    let (_, u, status) = best.expect("complement is non-empty");
    Ok((u, iters, status))
}
