use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::bip::{ForwardModel, InverseProblem};
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::rng;
use crate::Scalar;

const STREAM_GAMMA: u64 = 0x4c_3936_0001;
const STREAM_DATA: u64 = 0x4c_3936_0002;

/// Prior covariance over the forcing.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum LorenzPrior {
    /// `25 exp(-|i - j|)`, favouring smooth forcings.
    #[default]
    Exponential,
    /// `25 I`
    Identity,
}

/// Lorenz '96 with state-dependent forcing, observed through time-averaged
/// mean and standard deviation of the state.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LorenzSpec {
    pub n: usize,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_spinup")]
    pub spinup: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub prior: LorenzPrior,
    #[serde(default = "default_prior_mean")]
    pub prior_mean: f64,
    #[serde(default = "default_prior_scale")]
    pub prior_scale: f64,
    /// Initial conditions used to estimate the noise covariance.
    #[serde(default = "default_gamma_reps")]
    pub gamma_reps: usize,
    #[serde(default = "default_gamma_nugget")]
    pub gamma_nugget: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_horizon() -> f64 {
    20.0
}
fn default_spinup() -> f64 {
    4.0
}
fn default_dt() -> f64 {
    0.01
}
fn default_prior_mean() -> f64 {
    8.0
}
fn default_prior_scale() -> f64 {
    25.0
}
fn default_gamma_reps() -> usize {
    200
}
fn default_gamma_nugget() -> f64 {
    1e-2
}

impl LorenzSpec {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            horizon: default_horizon(),
            spinup: default_spinup(),
            dt: default_dt(),
            prior: LorenzPrior::default(),
            prior_mean: default_prior_mean(),
            prior_scale: default_prior_scale(),
            gamma_reps: default_gamma_reps(),
            gamma_nugget: default_gamma_nugget(),
            seed,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.n
    }

    fn steps(&self, span: f64) -> usize {
        (span / self.dt).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::invalid("Lorenz '96 needs at least 4 states"));
        }
        if !(self.dt > 0.0) || !(self.horizon >= self.dt) || !(self.spinup >= 0.0) {
            return Err(Error::invalid("Lorenz time step, horizon and spin-up must be positive"));
        }
        Ok(())
    }

    pub fn prior_covariance<T: Scalar>(&self) -> DMatrix<T> {
        let s = self.prior_scale;
        match self.prior {
            LorenzPrior::Exponential => DMatrix::from_fn(self.n, self.n, |i, j| {
                T::of(s * (-(i.abs_diff(j) as f64)).exp())
            }),
            LorenzPrior::Identity => DMatrix::identity(self.n, self.n) * T::of(s),
        }
    }
}

fn tendency<T: Scalar>(u: &DVector<T>, f: &DVector<T>) -> DVector<T> {
    let n = u.len();
    DVector::from_fn(n, |i, _| {
        let ip1 = u[(i + 1) % n];
        let im1 = u[(i + n - 1) % n];
        let im2 = u[(i + n - 2) % n];
        (ip1 - im2) * im1 - u[i] + f[i]
    })
}

/// One classical Runge-Kutta step of `du/dt = rhs(u)`.
pub fn rk4_step<T: Scalar>(u: &DVector<T>, dt: T, rhs: impl Fn(&DVector<T>) -> DVector<T>) -> DVector<T> {
    let half = dt * T::of(0.5);
    let k1 = rhs(u);
    let k2 = rhs(&(u + &k1 * half));
    let k3 = rhs(&(u + &k2 * half));
    let k4 = rhs(&(u + &k3 * dt));
    u + (k1 + (k2 + k3) * T::of(2.0) + k4) * (dt / T::of(6.0))
}

/// Statistics `[mean; std]` over `(spinup, spinup + horizon]` of the
/// trajectory started at `u0`.
pub fn lorenz96_from<T: Scalar>(spec: &LorenzSpec, forcing: &DVector<T>, u0: &DVector<T>) -> Result<DVector<T>> {
    spec.validate()?;
    check_dim("Lorenz forcing", spec.n, forcing.len())?;
    check_dim("Lorenz initial state", spec.n, u0.len())?;
    let dt = T::of(spec.dt);
    let rhs = |u: &DVector<T>| tendency(u, forcing);
    let mut u = u0.clone();
    for _ in 0..spec.steps(spec.spinup) {
        u = rk4_step(&u, dt, rhs);
    }
    // Welford accumulation keeps the variance non-negative.
    let mut mean = DVector::zeros(spec.n);
    let mut m2 = DVector::zeros(spec.n);
    let steps = spec.steps(spec.horizon);
    for k in 1..=steps {
        u = rk4_step(&u, dt, rhs);
        if !u.iter().all(|v| v.is_finite_value()) {
            return Err(Error::NonFinite("Lorenz '96 state".into()));
        }
        let delta = &u - &mean;
        mean += &delta / T::of_usize(k);
        m2 += delta.component_mul(&(&u - &mean));
    }
    let std = (m2 / T::of_usize(steps)).map(|v| v.max(T::zero()).sqrt());
    let mut y = DVector::zeros(2 * spec.n);
    y.rows_mut(0, spec.n).copy_from(&mean);
    y.rows_mut(spec.n, spec.n).copy_from(&std);
    Ok(y)
}

/// Statistics from a random start `u0 = F + 0.01 z`; the spin-up relaxes it
/// onto the attractor.
pub fn lorenz96_forward<T: Scalar>(spec: &LorenzSpec, forcing: &DVector<T>, rng: &mut dyn RngCore) -> Result<DVector<T>> {
    check_dim("Lorenz forcing", spec.n, forcing.len())?;
    let u0 = forcing + rng::normal_vector::<T>(spec.n, rng) * T::of(0.01);
    lorenz96_from(spec, forcing, &u0)
}

/// `F_i = 8 + 6 sin(4 pi (i - 1) / (N - 1))`, `i = 1..N`
pub fn lorenz_true_forcing<T: Scalar>(n: usize) -> Result<DVector<T>> {
    if n < 2 {
        return Err(Error::invalid("true forcing needs N >= 2"));
    }
    let pi = std::f64::consts::PI;
    Ok(DVector::from_fn(n, |i, _| {
        T::of(8.0 + 6.0 * (4.0 * pi * i as f64 / (n - 1) as f64).sin())
    }))
}

/// Sample covariance of the statistics over `n_reps` random starts, plus the nugget.
pub fn lorenz_estimate_gamma<T: Scalar>(
    spec: &LorenzSpec,
    forcing: &DVector<T>,
    n_reps: usize,
    rng: &mut dyn RngCore,
) -> Result<DMatrix<T>> {
    use rayon::prelude::*;
    if n_reps < 2 {
        return Err(Error::invalid("noise estimate needs at least two repetitions"));
    }
    let seeds: Vec<u64> = (0..n_reps).map(|_| rng.next_u64()).collect();
    let cols = seeds
        .par_iter()
        .map(|&s| lorenz96_forward(spec, forcing, &mut rng::stream(s, 0)))
        .collect::<Result<Vec<_>>>()?;
    let ys = DMatrix::from_columns(&cols);
    let cov = linalg::covariance(&ys);
    Ok(cov + DMatrix::identity(spec.output_dim(), spec.output_dim()) * T::of(spec.gamma_nugget))
}

/// Stochastic forward map: each evaluation draws a fresh initial condition.
#[derive(Debug, Clone)]
pub struct LorenzForward {
    spec: LorenzSpec,
}

impl LorenzForward {
    pub fn new(spec: LorenzSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &LorenzSpec {
        &self.spec
    }
}

impl<T: Scalar> ForwardModel<T> for LorenzForward {
    fn input_dim(&self) -> usize {
        self.spec.n
    }

    fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    fn evaluate(&self, x: &DVector<T>, rng: &mut dyn RngCore) -> Result<DVector<T>> {
        lorenz96_forward(&self.spec, x, rng)
    }

    fn is_stochastic(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
pub struct LorenzProblem<T: Scalar> {
    pub problem: InverseProblem<T>,
    pub f_true: DVector<T>,
}

/// Prior `N(prior_mean 1, Gamma_0)`; noise covariance estimated at the true
/// forcing; observation one evaluation at the true forcing.
pub fn make_lorenz_problem<T: Scalar>(spec: &LorenzSpec) -> Result<LorenzProblem<T>> {
    let forward = LorenzForward::new(spec.clone())?;
    let f_true = lorenz_true_forcing::<T>(spec.n)?;
    let gamma = lorenz_estimate_gamma(spec, &f_true, spec.gamma_reps, &mut rng::stream(spec.seed, STREAM_GAMMA))?;
    let y = lorenz96_forward(spec, &f_true, &mut rng::stream(spec.seed, STREAM_DATA))?;
    let problem = InverseProblem::new(
        Arc::new(forward),
        gamma,
        spec.prior_covariance(),
        DVector::from_element(spec.n, T::of(spec.prior_mean)),
        y,
    )?;
    Ok(LorenzProblem { problem, f_true })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(n: usize) -> LorenzSpec {
        LorenzSpec {
            horizon: 2.0,
            spinup: 1.0,
            ..LorenzSpec::new(n, 0)
        }
    }

    #[test]
    fn origin_is_fixed_without_forcing() {
        let spec = short(8);
        let y = lorenz96_from::<f64>(&spec, &DVector::zeros(8), &DVector::zeros(8)).unwrap();
        assert_eq!(y, DVector::zeros(16));
    }

    #[test]
    fn constant_forcing_equilibrium() {
        let spec = short(10);
        let c = 3.5;
        let f = DVector::from_element(10, c);
        let y = lorenz96_from::<f64>(&spec, &f, &f).unwrap();
        assert!((y.rows(0, 10) - &f).amax() < 1e-10);
        assert!(y.rows(10, 10).amax() < 1e-10);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let err = |steps: usize| {
            let dt = 1.0 / steps as f64;
            let mut y = DVector::from_element(1, 1.0);
            for _ in 0..steps {
                y = rk4_step(&y, dt, |v: &DVector<f64>| -v);
            }
            (y[0] - (-1f64).exp()).abs()
        };
        for s in [8, 16, 32] {
            let rate = (err(s) / err(2 * s)).log2();
            assert!((3.8..=4.2).contains(&rate), "rate {rate}");
        }
    }

    #[test]
    fn true_forcing_values() {
        let f = lorenz_true_forcing::<f64>(40).unwrap();
        assert_eq!(f[0], 8.0);
        assert!((f[39] - 8.0).abs() < 1e-12);
        assert!(f.max() <= 14.0);
        assert!(lorenz_true_forcing::<f64>(1).is_err());
    }

    #[test]
    fn gamma_has_nugget_floor() {
        let spec = short(6);
        let f = lorenz_true_forcing::<f64>(6).unwrap();
        let g = lorenz_estimate_gamma(&spec, &f, 20, &mut rng::stream(1, 1)).unwrap();
        assert!(linalg::is_symmetric(&g, 0.0));
        let min = g.clone().symmetric_eigenvalues().min();
        assert!(min >= 1e-2 - 1e-12);
    }

    #[test]
    fn zero_forcing_from_rest_has_nugget_only_covariance() {
        let spec = short(6);
        let ys = DMatrix::from_columns(&[
            lorenz96_from::<f64>(&spec, &DVector::zeros(6), &DVector::zeros(6)).unwrap(),
            lorenz96_from::<f64>(&spec, &DVector::zeros(6), &DVector::zeros(6)).unwrap(),
        ]);
        assert_eq!(linalg::covariance(&ys), DMatrix::zeros(12, 12));
    }

    #[test]
    fn longer_windows_reduce_noise() {
        let f = DVector::from_element(8, 8.0);
        let base = LorenzSpec {
            gamma_nugget: 0.0,
            ..LorenzSpec::new(8, 0)
        };
        let long = LorenzSpec {
            horizon: 2.0 * base.horizon,
            ..base.clone()
        };
        let t1 = lorenz_estimate_gamma::<f64>(&base, &f, 40, &mut rng::stream(2, 0)).unwrap().trace();
        let t2 = lorenz_estimate_gamma::<f64>(&long, &f, 40, &mut rng::stream(3, 0)).unwrap().trace();
        assert!(t2 < t1, "{t2} >= {t1}");
    }

    #[test]
    fn stochastic_evaluations_differ() {
        let fwd = LorenzForward::new(short(8)).unwrap();
        let f = DVector::from_element(8, 8.0);
        let mut r = rng::stream(0, 0);
        let a: DVector<f64> = fwd.evaluate(&f, &mut r).unwrap();
        let b: DVector<f64> = fwd.evaluate(&f, &mut r).unwrap();
        assert_ne!(a, b);
        assert!(a.rows(8, 8).iter().all(|&s| s >= 0.0));
        assert!(ForwardModel::<f64>::is_stochastic(&fwd));
    }
}
