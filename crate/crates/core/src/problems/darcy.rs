use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::bip::{ForwardModel, InverseProblem};
use crate::error::{check_dim, Error, Result};
use crate::rng;
use crate::Scalar;

const STREAM_TRUTH: u64 = 0x4441_5243_5901;

/// Steady Darcy flow `-div(a grad p) = c` on the unit square with zero
/// boundary pressure and log-normal permeability
/// `a = exp(sum_k u_k sqrt(lambda_k) phi_k)`, observed at interior points.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DarcySpec {
    pub d_x: usize,
    pub d_y: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_smoothness")]
    pub smoothness: f64,
    /// Grid step `2^-grid_level`.
    #[serde(default = "default_grid_level")]
    pub grid_level: u32,
    /// Grid level of the solve producing the observation.
    #[serde(default = "default_truth_level")]
    pub truth_level: u32,
    #[serde(default = "default_source")]
    pub source: f64,
    #[serde(default = "default_noise")]
    pub noise_variance: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_tau() -> f64 {
    3.0
}
fn default_smoothness() -> f64 {
    2.0
}
fn default_grid_level() -> u32 {
    5
}
fn default_truth_level() -> u32 {
    7
}
fn default_source() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    1e-4
}

impl DarcySpec {
    pub fn new(d_x: usize, d_y: usize, seed: u64) -> Self {
        Self {
            d_x,
            d_y,
            tau: default_tau(),
            smoothness: default_smoothness(),
            grid_level: default_grid_level(),
            truth_level: default_truth_level(),
            source: default_source(),
            noise_variance: default_noise(),
            seed,
        }
    }

    pub fn at_level(&self, level: u32) -> Self {
        Self {
            grid_level: level,
            ..self.clone()
        }
    }
}

/// The `d` wavevectors of `N^2 \ {0}` with the largest KL eigenvalues, i.e.
/// smallest `|k|^2`, ties in lexicographic order.
fn kl_modes(d: usize) -> Vec<(usize, usize)> {
    let mut radius = 1;
    loop {
        let mut ks: Vec<(usize, usize)> = (0..=radius)
            .flat_map(|a| (0..=radius).map(move |b| (a, b)))
            .filter(|&k| k != (0, 0))
            .collect();
        ks.sort_by_key(|&(a, b)| (a * a + b * b, a, b));
        // Every k with |k|^2 <= radius^2 lies in the box, so the prefix is exact.
        let complete = ks.iter().filter(|&&(a, b)| a * a + b * b <= radius * radius).count();
        if complete >= d {
            ks.truncate(d);
            return ks;
        }
        radius *= 2;
    }
}

/// Discretized forward map on one grid.
#[derive(Debug, Clone)]
pub struct DarcyForward<T: Scalar> {
    spec: DarcySpec,
    /// Intervals per side.
    n: usize,
    /// `sqrt(lambda_k) phi_k` at every grid node (row `i + j (n + 1)`).
    basis: DMatrix<T>,
    /// Bilinear stencils `(node, weight)` per observation.
    stencils: Vec<Vec<(usize, T)>>,
}

/// Unknowns above which the sparse iterative solver replaces banded Cholesky.
const DIRECT_LIMIT: usize = 20_000;

impl<T: Scalar> DarcyForward<T> {
    pub fn new(spec: &DarcySpec) -> Result<Self> {
        if spec.d_x == 0 || spec.d_y == 0 {
            return Err(Error::invalid("Darcy problem needs at least one mode and one observation"));
        }
        if !(1..=12).contains(&spec.grid_level) {
            return Err(Error::invalid("Darcy grid level must lie in 1..=12"));
        }
        let n = 1usize << spec.grid_level;
        let modes = kl_modes(spec.d_x);
        let pi = std::f64::consts::PI;
        let nodes = (n + 1) * (n + 1);
        let mut basis = DMatrix::zeros(nodes, spec.d_x);
        for (col, &(k1, k2)) in modes.iter().enumerate() {
            let norm2 = (k1 * k1 + k2 * k2) as f64;
            let lambda = (pi * pi * norm2 + spec.tau * spec.tau).powf(-spec.smoothness);
            let ck = if k1 == 0 || k2 == 0 { 2f64.sqrt() } else { 2.0 };
            let amp = lambda.sqrt() * ck;
            let c1: Vec<f64> = (0..=n).map(|i| (pi * k1 as f64 * i as f64 / n as f64).cos()).collect();
            let c2: Vec<f64> = (0..=n).map(|j| (pi * k2 as f64 * j as f64 / n as f64).cos()).collect();
            for j in 0..=n {
                for i in 0..=n {
                    basis[(i + j * (n + 1), col)] = T::of(amp * c1[i] * c2[j]);
                }
            }
        }
        let stencils = observation_points(spec.d_y)
            .into_iter()
            .map(|(x1, x2)| bilinear_stencil(n, x1, x2))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            n,
            basis,
            stencils,
        })
    }

    pub fn spec(&self) -> &DarcySpec {
        &self.spec
    }

    pub fn intervals(&self) -> usize {
        self.n
    }

    /// Permeability at every grid node.
    pub fn permeability(&self, u: &DVector<T>) -> Result<DVector<T>> {
        check_dim("Darcy parameters", self.spec.d_x, u.len())?;
        let a = (&self.basis * u).map(|v| v.exp());
        if !a.iter().all(|v| v.is_finite_value() && *v > T::zero()) {
            return Err(Error::NonFinite("Darcy permeability".into()));
        }
        Ok(a)
    }

    /// Pressure at every grid node (zero on the boundary).
    pub fn pressure(&self, u: &DVector<T>) -> Result<DVector<T>> {
        let a = self.permeability(u)?;
        let sys = Stiffness::assemble(self.n, &a);
        let rhs = DVector::from_element(sys.size(), T::of(self.spec.source));
        let p = if sys.size() <= DIRECT_LIMIT {
            BandedCholesky::factor(&sys)?.solve(&rhs)
        } else {
            sys.pcg(&rhs, T::of(1e-12), 20 * sys.size())?
        };
        Ok(self.embed(&p))
    }

    fn embed(&self, interior: &DVector<T>) -> DVector<T> {
        let n = self.n;
        let m = n - 1;
        let mut full = DVector::zeros((n + 1) * (n + 1));
        for j in 1..n {
            for i in 1..n {
                full[i + j * (n + 1)] = interior[(i - 1) + (j - 1) * m];
            }
        }
        full
    }

    pub fn observe(&self, nodal: &DVector<T>) -> DVector<T> {
        DVector::from_iterator(
            self.stencils.len(),
            self.stencils
                .iter()
                .map(|st| st.iter().fold(T::zero(), |acc, &(k, w)| acc + nodal[k] * w)),
        )
    }
}

impl<T: Scalar> ForwardModel<T> for DarcyForward<T> {
    fn input_dim(&self) -> usize {
        self.spec.d_x
    }

    fn output_dim(&self) -> usize {
        self.spec.d_y
    }

    fn evaluate(&self, u: &DVector<T>, _rng: &mut dyn RngCore) -> Result<DVector<T>> {
        Ok(self.observe(&self.pressure(u)?))
    }

    /// Tangent-linear solves `K dp_k = -(dK/du_k) p`, sharing one factorization.
    fn jacobian(&self, u: &DVector<T>) -> Result<DMatrix<T>> {
        let a = self.permeability(u)?;
        let sys = Stiffness::assemble(self.n, &a);
        if sys.size() > DIRECT_LIMIT {
            return Err(Error::GradientUnavailable);
        }
        let chol = BandedCholesky::factor(&sys)?;
        let p = chol.solve(&DVector::from_element(sys.size(), T::of(self.spec.source)));
        let p_full = self.embed(&p);
        let mut jac = DMatrix::zeros(self.spec.d_y, self.spec.d_x);
        for k in 0..self.spec.d_x {
            let da = a.component_mul(&self.basis.column(k));
            let rhs = -sys.apply_with(&da, &p_full);
            let dp = chol.solve(&rhs);
            jac.set_column(k, &self.observe(&self.embed(&dp)));
        }
        Ok(jac)
    }
}

/// `m x m` lattice at `((a + 1) / (m + 1), (b + 1) / (m + 1))`, `m = ceil(sqrt(d))`,
/// row by row, keeping the first `d` points.
fn observation_points(d: usize) -> Vec<(f64, f64)> {
    let mut m = (d as f64).sqrt().ceil() as usize;
    while m * m < d {
        m += 1;
    }
    let step = 1.0 / (m + 1) as f64;
    (0..m)
        .flat_map(|b| (0..m).map(move |a| ((a + 1) as f64 * step, (b + 1) as f64 * step)))
        .take(d)
        .collect()
}

fn bilinear_stencil<T: Scalar>(n: usize, x1: f64, x2: f64) -> Vec<(usize, T)> {
    let locate = |x: f64| -> (usize, f64) {
        let s = x * n as f64;
        let i = (s.floor() as usize).min(n - 1);
        // Snap points within roundoff of a node onto it.
        let t = s - i as f64;
        if t.abs() < 1e-12 {
            (i, 0.0)
        } else if (1.0 - t).abs() < 1e-12 {
            (i + 1, 0.0)
        } else {
            (i, t)
        }
    };
    let (i, t) = locate(x1);
    let (j, s) = locate(x2);
    let idx = |a: usize, b: usize| a.min(n) + b.min(n) * (n + 1);
    let mut st = vec![
        (idx(i, j), (1.0 - t) * (1.0 - s)),
        (idx(i + 1, j), t * (1.0 - s)),
        (idx(i, j + 1), (1.0 - t) * s),
        (idx(i + 1, j + 1), t * s),
    ];
    st.retain(|&(_, w)| w != 0.0);
    st.into_iter().map(|(k, w)| (k, T::of(w))).collect()
}

/// Five-point flux discretization on interior nodes; face coefficients are
/// arithmetic means of the nodal permeability.
struct Stiffness<T: Scalar> {
    n: usize,
    /// Face coefficients divided by `h^2`: east face of node `(i, j)` at
    /// `i + j (n + 1)`; likewise north.
    east: Vec<T>,
    north: Vec<T>,
}

impl<T: Scalar> Stiffness<T> {
    fn assemble(n: usize, a: &DVector<T>) -> Self {
        let inv_h2 = T::of_usize(n * n);
        let half = T::of(0.5);
        let w = n + 1;
        let mut east = vec![T::zero(); w * w];
        let mut north = vec![T::zero(); w * w];
        for j in 0..=n {
            for i in 0..=n {
                let k = i + j * w;
                if i < n {
                    east[k] = (a[k] + a[k + 1]) * half * inv_h2;
                }
                if j < n {
                    north[k] = (a[k] + a[k + w]) * half * inv_h2;
                }
            }
        }
        Self { n, east, north }
    }

    fn size(&self) -> usize {
        (self.n - 1) * (self.n - 1)
    }

    fn m(&self) -> usize {
        self.n - 1
    }

    /// Entries of row `(i, j)`: diagonal and the east/north couplings.
    fn row(&self, i: usize, j: usize) -> (T, T, T) {
        let w = self.n + 1;
        let k = i + j * w;
        let diag = self.east[k] + self.east[k - 1] + self.north[k] + self.north[k - w];
        (diag, -self.east[k], -self.north[k])
    }

    fn apply(&self, x: &DVector<T>) -> DVector<T> {
        let m = self.m();
        let mut y = DVector::zeros(self.size());
        for j in 1..=m {
            for i in 1..=m {
                let r = (i - 1) + (j - 1) * m;
                let (d, e, no) = self.row(i, j);
                let mut v = d * x[r];
                if i < m {
                    v += e * x[r + 1];
                }
                if i > 1 {
                    v += self.row(i - 1, j).1 * x[r - 1];
                }
                if j < m {
                    v += no * x[r + m];
                }
                if j > 1 {
                    v += self.row(i, j - 1).2 * x[r - m];
                }
                y[r] = v;
            }
        }
        y
    }

    /// `(dK p)` at interior nodes for nodal permeability perturbation `da`.
    fn apply_with(&self, da: &DVector<T>, p_full: &DVector<T>) -> DVector<T> {
        let n = self.n;
        let m = n - 1;
        let w = n + 1;
        let inv_h2 = T::of_usize(n * n);
        let half = T::of(0.5);
        let mut out = DVector::zeros(self.size());
        for j in 1..n {
            for i in 1..n {
                let k = i + j * w;
                let mut v = T::zero();
                for nb in [k + 1, k - 1, k + w, k - w] {
                    v += (da[k] + da[nb]) * half * inv_h2 * (p_full[k] - p_full[nb]);
                }
                out[(i - 1) + (j - 1) * m] = v;
            }
        }
        out
    }

    /// Jacobi-preconditioned conjugate gradients to relative residual `tol`.
    fn pcg(&self, b: &DVector<T>, tol: T, max_iter: usize) -> Result<DVector<T>> {
        let m = self.m();
        let diag = DVector::from_fn(self.size(), |r, _| self.row(r % m + 1, r / m + 1).0);
        let mut x = DVector::zeros(self.size());
        let mut r = b.clone();
        let mut z = r.component_div(&diag);
        let mut p = z.clone();
        let mut rz = r.dot(&z);
        let bnorm = b.norm();
        for _ in 0..max_iter {
            if r.norm() <= tol * bnorm {
                return Ok(x);
            }
            let ap = self.apply(&p);
            let step = rz / p.dot(&ap);
            x.axpy(step, &p, T::one());
            r.axpy(-step, &ap, T::one());
            z = r.component_div(&diag);
            let rz_new = r.dot(&z);
            p = &z + &p * (rz_new / rz);
            rz = rz_new;
        }
        Err(Error::Solver("Darcy conjugate gradients did not converge".into()))
    }
}

/// Cholesky factor of a symmetric banded matrix, `L[i][d] = L(i, i - d)`.
struct BandedCholesky<T: Scalar> {
    bw: usize,
    l: Vec<T>,
    size: usize,
}

impl<T: Scalar> BandedCholesky<T> {
    fn factor(sys: &Stiffness<T>) -> Result<Self> {
        let m = sys.m();
        let size = sys.size();
        let bw = m;
        let stride = bw + 1;
        let mut l = vec![T::zero(); size * stride];
        for r in 0..size {
            let (i, j) = (r % m + 1, r / m + 1);
            let (d, _, _) = sys.row(i, j);
            l[r * stride] = d;
            if i > 1 {
                l[r * stride + 1] = sys.row(i - 1, j).1;
            }
            if j > 1 {
                l[r * stride + m] = sys.row(i, j - 1).2;
            }
        }
        for r in 0..size {
            let lo = r.saturating_sub(bw);
            for c in lo..r {
                let d = r - c;
                let mut s = l[r * stride + d];
                let k_lo = lo.max(c.saturating_sub(bw));
                for k in k_lo..c {
                    s -= l[r * stride + (r - k)] * l[c * stride + (c - k)];
                }
                l[r * stride + d] = s / l[c * stride];
            }
            let mut s = l[r * stride];
            for k in lo..r {
                let v = l[r * stride + (r - k)];
                s -= v * v;
            }
            if !(s > T::zero()) {
                return Err(Error::NotPositiveDefinite("Darcy stiffness matrix"));
            }
            l[r * stride] = s.sqrt();
        }
        Ok(Self { bw, l, size })
    }

    fn solve(&self, b: &DVector<T>) -> DVector<T> {
        let stride = self.bw + 1;
        let mut y = b.clone();
        for r in 0..self.size {
            let mut s = y[r];
            for k in r.saturating_sub(self.bw)..r {
                s -= self.l[r * stride + (r - k)] * y[k];
            }
            y[r] = s / self.l[r * stride];
        }
        for r in (0..self.size).rev() {
            let mut s = y[r];
            for k in r + 1..(r + self.bw + 1).min(self.size) {
                s -= self.l[k * stride + (k - r)] * y[k];
            }
            y[r] = s / self.l[r * stride];
        }
        y
    }
}

/// Forward map on the grid given by `spec.grid_level`.
pub fn darcy_forward<T: Scalar>(spec: &DarcySpec, u: &DVector<T>) -> Result<DVector<T>> {
    let f = DarcyForward::<T>::new(spec)?;
    Ok(f.observe(&f.pressure(u)?))
}

/// Darcy problem and the parameter behind its observation.
#[derive(Debug, Clone)]
pub struct DarcyProblem<T: Scalar> {
    pub problem: InverseProblem<T>,
    pub u_true: DVector<T>,
}

/// Prior `N(0, I)`; the observation is a truth-grid solve at a prior draw
/// plus `N(0, noise_variance I)` noise.
pub fn make_darcy_problem<T: Scalar>(spec: &DarcySpec) -> Result<DarcyProblem<T>> {
    let forward = DarcyForward::<T>::new(spec)?;
    let truth = DarcyForward::<T>::new(&spec.at_level(spec.truth_level))?;
    let mut r = rng::stream(spec.seed, STREAM_TRUTH);
    let u_true = rng::normal_vector::<T>(spec.d_x, &mut r);
    let noise = rng::normal_vector::<T>(spec.d_y, &mut r) * T::of(spec.noise_variance.sqrt());
    let y = truth.observe(&truth.pressure(&u_true)?) + noise;
    let problem = InverseProblem::new(
        Arc::new(forward),
        DMatrix::identity(spec.d_y, spec.d_y) * T::of(spec.noise_variance),
        DMatrix::identity(spec.d_x, spec.d_x),
        DVector::zeros(spec.d_x),
        y,
    )?;
    Ok(DarcyProblem { problem, u_true })
}
