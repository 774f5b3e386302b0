use nalgebra::DMatrix;

use super::{grad_j, objective_j, output_basis_alpha0, riemannian_descent, ObjectiveContext, OptOptions, OptStatus};
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::Scalar;

/// Outcome of Grassmann descent.
#[derive(Debug, Clone)]
pub struct FullResult<T: Scalar> {
    pub v: DMatrix<T>,
    pub j: T,
    pub j_init: T,
    pub iterations: usize,
    pub status: OptStatus,
    /// `J` at every accepted iterate, starting with the initialization.
    pub history: Vec<T>,
}

/// Minimizes `J` over `s`-dimensional subspaces by Riemannian gradient
/// descent with QR retraction, starting from `init` or, when absent, from
/// the closed-form `alpha = 0` basis.
pub fn optimize_full<T: Scalar>(
    ctx: &ObjectiveContext<T>,
    s: usize,
    init: Option<&DMatrix<T>>,
    opts: &OptOptions,
) -> Result<FullResult<T>> {
    let dy = ctx.dim();
    if s > dy {
        return Err(Error::invalid(format!("requested {s} output directions in dimension {dy}")));
    }
    let v0 = match init {
        Some(v) => {
            check_dim("initial basis rows", dy, v.nrows())?;
            check_dim("initial basis cols", s, v.ncols())?;
            if !linalg::is_orthonormal(v, T::of(1e-8)) {
                return Err(Error::invalid("initial basis is not column-orthonormal"));
            }
            v.clone()
        }
        None => output_basis_alpha0(ctx, s)?,
    };
    if s == dy || s == 0 {
        let j = objective_j(ctx, &v0)?;
        return Ok(FullResult {
            v: v0,
            j,
            j_init: j,
            iterations: 0,
            status: OptStatus::Converged,
            history: vec![j],
        });
    }
    let run = riemannian_descent(
        v0,
        |v| objective_j(ctx, v),
        |v| Ok(grad_j(ctx, v)?.riemannian),
        |v| linalg::orthonormalize(v),
        opts,
    )?;
    if run.status == OptStatus::LineSearchFailed {
        log::warn!("output-space line search failed after {} iterations", run.iters);
    }
    Ok(FullResult {
        v: run.x,
        j: run.f,
        j_init: run.history[0],
        iterations: run.iters,
        status: run.status,
        history: run.history,
    })
}
