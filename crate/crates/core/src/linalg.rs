//! Dense linear-algebra helpers on top of nalgebra.
//!
//! Eigenvectors are returned with descending eigenvalues and a deterministic
//! sign: the entry of largest magnitude in every column is positive (first
//! index wins ties). QR factors carry a positive R diagonal.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::Scalar;

pub fn symmetrize<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::of(0.5)
}

pub fn trace<T: Scalar>(m: &DMatrix<T>) -> T {
    m.diagonal().sum()
}

/// Largest absolute entry of `m`, zero for empty matrices.
pub fn max_abs<T: Scalar>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
}

pub fn is_symmetric<T: Scalar>(m: &DMatrix<T>, rtol: T) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = max_abs(m).max(T::one());
    (m - m.transpose()).iter().all(|v| v.abs() <= rtol * scale)
}

/// Flips each column so that its largest-magnitude entry is positive.
pub fn fix_signs<T: Scalar>(v: &mut DMatrix<T>) {
    for mut col in v.column_iter_mut() {
        let mut best = T::zero();
        let mut sign = T::one();
        for &x in col.iter() {
            if x.abs() > best {
                best = x.abs();
                sign = if x < T::zero() { -T::one() } else { T::one() };
            }
        }
        if sign < T::zero() {
            col.neg_mut();
        }
    }
}

/// Symmetric eigendecomposition with descending eigenvalues and fixed signs.
pub fn sym_eigen<T: Scalar>(m: &DMatrix<T>) -> Result<(DVector<T>, DMatrix<T>)> {
    if !m.is_square() {
        return Err(Error::invalid("eigendecomposition of a non-square matrix"));
    }
    let n = m.nrows();
    if n == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    if m.iter().any(|v| !v.is_finite_value()) {
        return Err(Error::NonFinite("matrix passed to eigensolver".into()));
    }
    let eig = SymmetricEigen::try_new(symmetrize(m), T::default_epsilon(), 0)
        .ok_or_else(|| Error::Solver("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let mut vectors = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    fix_signs(&mut vectors);
    Ok((values, vectors))
}

/// Leading `k` eigenvectors of a symmetric matrix.
pub fn leading_eigenvectors<T: Scalar>(m: &DMatrix<T>, k: usize) -> Result<DMatrix<T>> {
    if k > m.nrows() {
        return Err(Error::invalid(format!(
            "requested {k} eigenvectors of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    let (_, vecs) = sym_eigen(m)?;
    Ok(vecs.columns(0, k).into_owned())
}

/// Checks symmetry and strictly positive spectrum.
pub fn check_spd<T: Scalar>(m: &DMatrix<T>, what: &'static str) -> Result<()> {
    if !is_symmetric(m, T::of(1e-10)) {
        return Err(Error::NotPositiveDefinite(what));
    }
    let (vals, _) = sym_eigen(m)?;
    match vals.iter().last() {
        Some(&min) if min > T::zero() => Ok(()),
        None => Ok(()),
        _ => Err(Error::NotPositiveDefinite(what)),
    }
}

/// `m^p` for symmetric `m` through its eigendecomposition.
///
/// Eigenvalues are clamped below at `floor_rel * max(eigenvalue)` (and at
/// zero) before the power is applied.
pub fn sym_pow<T: Scalar>(m: &DMatrix<T>, p: T, floor_rel: T) -> Result<DMatrix<T>> {
    let (vals, vecs) = sym_eigen(m)?;
    let top = vals.iter().fold(T::zero(), |a, &v| a.max(v));
    let floor = floor_rel * top;
    let powered = DVector::from_fn(vals.len(), |i, _| {
        let v = vals[i].max(floor).max(T::zero());
        if v == T::zero() {
            T::zero()
        } else {
            v.powf(p)
        }
    });
    Ok(symmetrize(
        &(&vecs * DMatrix::from_diagonal(&powered) * vecs.transpose()),
    ))
}

/// Symmetric square root (eigenvalues clamped at zero).
pub fn sym_sqrt<T: Scalar>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    sym_pow(m, T::of(0.5), T::zero())
}

/// Symmetric inverse square root of an SPD matrix; eigenvalues are clamped
/// below at `1e-14 * max` before inversion.
pub fn sym_inv_sqrt<T: Scalar>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    sym_pow(m, T::of(-0.5), T::of(1e-14))
}

/// Thin QR orthonormalization with positive R diagonal.
///
/// Fails when a column is (numerically) in the span of the previous ones.
pub fn orthonormalize<T: Scalar>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    let (rows, cols) = m.shape();
    if cols > rows {
        return Err(Error::RankDeficient(format!(
            "{cols} columns cannot be orthonormal in dimension {rows}"
        )));
    }
    if cols == 0 {
        return Ok(DMatrix::zeros(rows, 0));
    }
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    let scale = m.norm().max(T::min_value().unwrap_or(T::zero()));
    for j in 0..cols {
        let d = r[(j, j)];
        if d.abs() <= T::of(1e-12) * scale || scale == T::zero() {
            return Err(Error::RankDeficient(format!(
                "column {j} is collinear with the preceding columns"
            )));
        }
        if d < T::zero() {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// Orthonormal basis of the orthogonal complement of the column-orthonormal `q`.
pub fn complement<T: Scalar>(q: &DMatrix<T>) -> Result<DMatrix<T>> {
    let (d, k) = q.shape();
    if k > d {
        return Err(Error::invalid("basis has more columns than rows"));
    }
    if k == d {
        return Ok(DMatrix::zeros(d, 0));
    }
    if k == 0 {
        return Ok(DMatrix::identity(d, d));
    }
    let projector = DMatrix::<T>::identity(d, d) - q * q.transpose();
    let (_, vecs) = sym_eigen(&projector)?;
    // Re-orthogonalize against q to clean up the eigensolver's rounding.
    let raw = vecs.columns(0, d - k).into_owned();
    let cleaned = &raw - q * (q.transpose() * &raw);
    orthonormalize(&cleaned)
}

/// Checks `basis^T basis = I` to `tol`.
pub fn is_orthonormal<T: Scalar>(basis: &DMatrix<T>, tol: T) -> bool {
    let g = basis.transpose() * basis;
    let id = DMatrix::<T>::identity(g.nrows(), g.ncols());
    max_abs(&(g - id)) <= tol
}

/// Solves `a x = b` for SPD `a` (Cholesky, falling back to LU).
pub fn solve_spd<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    solve(a, b)
}

/// Solves `a x = b` with partial-pivot LU.
pub fn solve<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    let x = a
        .clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Singular("linear system".into()))?;
    if x.iter().any(|v| !v.is_finite_value()) {
        return Err(Error::Singular("linear system produced non-finite values".into()));
    }
    Ok(x)
}

pub fn solve_spd_vec<T: Scalar>(a: &DMatrix<T>, b: &DVector<T>) -> Result<DVector<T>> {
    let x = solve_spd(a, &DMatrix::from_column_slice(b.len(), 1, b.as_slice()))?;
    Ok(x.column(0).into_owned())
}

pub fn inv_spd<T: Scalar>(a: &DMatrix<T>) -> Result<DMatrix<T>> {
    solve_spd(a, &DMatrix::identity(a.nrows(), a.ncols()))
}

/// Moore–Penrose pseudo-inverse; singular values below `rtol * max` are dropped.
pub fn pinv<T: Scalar>(m: &DMatrix<T>, rtol: T) -> Result<DMatrix<T>> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(DMatrix::zeros(cols, rows));
    }
    let svd = nalgebra::SVD::try_new(m.clone(), true, true, T::default_epsilon(), 0)
        .ok_or_else(|| Error::Solver("SVD did not converge".into()))?;
    let smax = svd.singular_values.iter().fold(T::zero(), |a, &v| a.max(v));
    let cut = rtol * smax;
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let mut out = DMatrix::zeros(cols, rows);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cut && s > T::zero() {
            out += vt.row(i).transpose() * u.column(i).transpose() * (T::one() / s);
        }
    }
    Ok(out)
}

/// Spectral norm (largest singular value).
pub fn spectral_norm<T: Scalar>(m: &DMatrix<T>) -> T {
    if m.is_empty() {
        return T::zero();
    }
    m.clone()
        .singular_values()
        .iter()
        .fold(T::zero(), |a, &v| a.max(v))
}

/// Largest principal angle (radians) between the column spaces of two
/// column-orthonormal matrices with the same number of columns.
///
/// Computed from the sine, `||(I - A A^T) B||_2`, which stays accurate for
/// nearly coincident subspaces.
pub fn max_principal_angle<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    let residual = b - a * (a.transpose() * b);
    let s = spectral_norm(&residual).min(T::one());
    s.asin()
}

/// Column mean of a `d x n` sample matrix.
pub fn column_mean<T: Scalar>(xs: &DMatrix<T>) -> DVector<T> {
    let n = xs.ncols().max(1);
    xs.column_sum() / T::of_usize(n)
}

/// Cross-covariance `(1/n) sum (x - xbar)(y - ybar)^T` of paired columns.
pub fn cross_covariance<T: Scalar>(xs: &DMatrix<T>, ys: &DMatrix<T>) -> DMatrix<T> {
    let n = xs.ncols();
    let xc = centered(xs);
    let yc = centered(ys);
    xc * yc.transpose() / T::of_usize(n.max(1))
}

/// Covariance with 1/n normalization.
pub fn covariance<T: Scalar>(xs: &DMatrix<T>) -> DMatrix<T> {
    symmetrize(&cross_covariance(xs, xs))
}

pub fn centered<T: Scalar>(xs: &DMatrix<T>) -> DMatrix<T> {
    let mean = column_mean(xs);
    let mut c = xs.clone();
    for mut col in c.column_iter_mut() {
        col -= &mean;
    }
    c
}

/// Quadratic form `v^T m^{-1} v` through a Cholesky factor.
pub fn inv_quad<T: Scalar>(chol: &nalgebra::Cholesky<T, nalgebra::Dyn>, v: &DVector<T>) -> T {
    let mut w = v.clone();
    chol.l_dirty().solve_lower_triangular_mut(&mut w);
    // l_dirty keeps garbage above the diagonal; the solve only reads the lower part.
    w.norm_squared()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use nalgebra::dmatrix;

    #[test]
    fn eigen_is_descending_and_sign_fixed() {
        let m = dmatrix![1.0, 0.0, 0.0; 0.0, 3.0, 0.0; 0.0, 0.0, 2.0];
        let (vals, vecs) = sym_eigen(&m).unwrap();
        assert_eq!(vals.as_slice(), &[3.0, 2.0, 1.0]);
        assert_eq!(vecs.column(0)[1], 1.0);
        assert_eq!(vecs.column(1)[2], 1.0);
    }

    #[test]
    fn orthonormalize_rejects_collinear_columns() {
        let m = dmatrix![1.0, 2.0; 1.0, 2.0; 0.0, 0.0];
        assert!(matches!(orthonormalize(&m), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn complement_completes_a_unitary() {
        let mut r = rng::stream(3, 0);
        let q = orthonormalize(&rng::normal_matrix::<f64>(7, 3, &mut r)).unwrap();
        let c = complement(&q).unwrap();
        let mut full = DMatrix::zeros(7, 7);
        full.columns_mut(0, 3).copy_from(&q);
        full.columns_mut(3, 4).copy_from(&c);
        assert!(is_orthonormal(&full, 1e-12));
    }

    #[test]
    fn inverse_square_root_round_trips() {
        let m = dmatrix![4.0, 1.0; 1.0, 3.0];
        let s = sym_sqrt(&m).unwrap();
        let si = sym_inv_sqrt(&m).unwrap();
        assert!(max_abs(&(&s * &si - DMatrix::identity(2, 2))) < 1e-13);
        assert!(max_abs(&(&s * &s - &m)) < 1e-13);
    }

    #[test]
    fn pinv_truncates_null_directions() {
        let m = dmatrix![1.0, 0.0; 0.0, 0.0];
        let p = pinv(&m, 1e-12).unwrap();
        assert_eq!(p, dmatrix![1.0, 0.0; 0.0, 0.0]);
    }

    #[test]
    fn principal_angle_of_rotated_line() {
        let t = 0.3f64;
        let a = dmatrix![1.0; 0.0];
        let b = dmatrix![t.cos(); t.sin()];
        assert!((max_principal_angle(&a, &b) - t).abs() < 1e-14);
    }
}
