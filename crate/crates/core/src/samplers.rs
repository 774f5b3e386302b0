//! Tempered ensembles by stochastic ensemble Kalman inversion, and adaptive
//! random-walk Metropolis.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::bip::InverseProblem;
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::rng;
use crate::Scalar;

/// Ensembles (`d_x x J`) and their forward evaluations (`d_y x J`) at each
/// temperature, starting with the prior at `alpha = 0`.
#[derive(Debug, Clone)]
pub struct TemperedEnsemble<T: Scalar> {
    pub alphas: Vec<T>,
    pub ensembles: Vec<DMatrix<T>>,
    pub evaluations: Vec<DMatrix<T>>,
}

impl<T: Scalar> TemperedEnsemble<T> {
    pub fn ensemble_size(&self) -> usize {
        self.ensembles.first().map_or(0, |e| e.ncols())
    }

    /// Index of the recorded temperature closest to `alpha`.
    pub fn index_of(&self, alpha: T) -> Option<usize> {
        self.alphas
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (*a.1 - alpha)
                    .abs()
                    .partial_cmp(&(*b.1 - alpha).abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .map(|(i, _)| i)
    }

    /// Index of the recorded temperature equal to `alpha` within `1e-9`.
    pub fn position(&self, alpha: T) -> Option<usize> {
        self.index_of(alpha)
            .filter(|&i| (self.alphas[i] - alpha).abs() <= T::of(1e-9))
    }

    /// All samples and evaluations at temperatures up to and including `alpha`.
    pub fn pooled_up_to(&self, alpha: T) -> (DMatrix<T>, DMatrix<T>) {
        let keep: Vec<usize> = (0..self.alphas.len())
            .filter(|&i| self.alphas[i] <= alpha + T::of(1e-9))
            .collect();
        let j = self.ensemble_size();
        let mut xs = DMatrix::zeros(self.ensembles[0].nrows(), j * keep.len());
        let mut gs = DMatrix::zeros(self.evaluations[0].nrows(), j * keep.len());
        for (b, &i) in keep.iter().enumerate() {
            xs.columns_mut(b * j, j).copy_from(&self.ensembles[i]);
            gs.columns_mut(b * j, j).copy_from(&self.evaluations[i]);
        }
        (xs, gs)
    }
}

/// Pseudo-time stepping for tempered EKI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EkiSchedule {
    /// Steps of `1/n`, truncated at every requested stop.
    Uniform(usize),
    /// `dt = min(remaining, 1 / ||Gamma^{-1/2}(y - mean G)|| * sqrt(d_y))`.
    Adaptive,
}

impl Default for EkiSchedule {
    fn default() -> Self {
        EkiSchedule::Uniform(10)
    }
}

const SNAP: f64 = 1e-12;
const MIN_ADAPTIVE_STEP: f64 = 1e-4;

/// One stochastic EKI step with pseudo-time `dt`.
///
/// `x <- x + C^{xG} (C^{GG} + Gamma/dt)^{-1} (y_j - G(x))`, with perturbed data
/// `y_j = y_dagger + dt^{-1/2} gamma_j`, `gamma_j ~ N(0, Gamma)`, and `1/J`
/// empirical covariances.
pub fn eki_update<T: Scalar>(
    ensemble: &DMatrix<T>,
    evaluations: &DMatrix<T>,
    y_dagger: &DVector<T>,
    gamma: &DMatrix<T>,
    dt: T,
    rng: &mut dyn RngCore,
) -> Result<DMatrix<T>> {
    let j = ensemble.ncols();
    let dy = y_dagger.len();
    if j < 3 {
        return Err(Error::invalid(format!("EKI needs at least 3 members, got {j}")));
    }
    if !(dt > T::zero() && dt <= T::one()) {
        return Err(Error::invalid(format!("EKI step {dt} outside (0, 1]")));
    }
    check_dim("EKI evaluations", j, evaluations.ncols())?;
    check_dim("EKI evaluations", dy, evaluations.nrows())?;
    check_dim("EKI noise covariance", dy, gamma.nrows())?;
    let l = gamma
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("noise covariance"))?
        .unpack();
    let inv_dt = T::one() / dt;
    let c_xg = linalg::cross_covariance(ensemble, evaluations);
    let c_gg = linalg::covariance(evaluations);
    let lhs = linalg::symmetrize(&(c_gg + gamma * inv_dt));
    let scale = inv_dt.sqrt();
    let mut innov = DMatrix::zeros(dy, j);
    for k in 0..j {
        let pert = &l * rng::normal_vector::<T>(dy, rng) * scale;
        let col = y_dagger + pert - evaluations.column(k);
        innov.set_column(k, &col);
    }
    let z = linalg::solve_spd(&lhs, &innov)
        .map_err(|e| Error::Solver(format!("EKI gain system: {e}")))?;
    Ok(ensemble + c_xg * z)
}

/// Runs EKI from `J` prior draws, stopping exactly at every `alpha_stops`
/// value and recording the ensemble and its evaluations there.
pub fn run_tempered_eki<T: Scalar>(
    p: &InverseProblem<T>,
    j: usize,
    alpha_stops: &[T],
    schedule: EkiSchedule,
    rng: &mut dyn RngCore,
) -> Result<TemperedEnsemble<T>> {
    if j < 3 {
        return Err(Error::invalid(format!("EKI needs at least 3 members, got {j}")));
    }
    let mut stops: Vec<T> = alpha_stops.to_vec();
    if stops.iter().any(|&a| !(a > T::zero() && a <= T::one())) {
        return Err(Error::invalid("EKI stops must lie in (0, 1]"));
    }
    if stops.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("EKI stops must be strictly increasing"));
    }
    if let EkiSchedule::Uniform(0) = schedule {
        return Err(Error::invalid("uniform EKI schedule needs at least one step"));
    }
    stops.dedup();

    let mut x = p.sample_prior_matrix(j, rng);
    let mut g = p.evaluate_batch(&x, rng)?;
    let mut out = TemperedEnsemble {
        alphas: vec![T::zero()],
        ensembles: vec![x.clone()],
        evaluations: vec![g.clone()],
    };
    let mut alpha = T::zero();
    let snap = T::of(SNAP);
    for &stop in &stops {
        while alpha < stop - snap {
            let remaining = stop - alpha;
            let mut dt = match schedule {
                EkiSchedule::Uniform(n) => T::one() / T::of_usize(n),
                EkiSchedule::Adaptive => adaptive_step(p, &g)?,
            };
            if dt >= remaining - snap {
                dt = remaining;
            }
            x = eki_update(&x, &g, p.y_dagger(), p.gamma(), dt, rng)?;
            if !x.iter().all(|v| v.is_finite_value()) {
                return Err(Error::NonFinite("EKI ensemble".into()));
            }
            alpha = if dt == remaining { stop } else { alpha + dt };
            g = p.evaluate_batch(&x, rng)?;
        }
        out.alphas.push(stop);
        out.ensembles.push(x.clone());
        out.evaluations.push(g.clone());
    }
    Ok(out)
}

fn adaptive_step<T: Scalar>(p: &InverseProblem<T>, g: &DMatrix<T>) -> Result<T> {
    let mean = linalg::column_mean(g);
    let misfit = linalg::inv_quad(p.gamma_cholesky(), &(p.y_dagger() - mean)).sqrt()
        / T::of_usize(p.output_dim()).sqrt();
    if !misfit.is_finite_value() {
        return Err(Error::NonFinite("EKI misfit".into()));
    }
    let dt = if misfit > T::zero() {
        T::one() / misfit
    } else {
        T::one()
    };
    Ok(dt.max(T::of(MIN_ADAPTIVE_STEP)).min(T::one()))
}

/// Random-walk Metropolis settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RwmOptions {
    pub n_samples: usize,
    /// Defaults to 20% of `n_samples`.
    pub n_burn: Option<usize>,
    pub target_accept: f64,
    /// Defaults to `2.38 / sqrt(dim)`.
    pub initial_scale: Option<f64>,
    /// Replace the identity proposal shape by the burn-in covariance halfway
    /// through burn-in.
    pub adapt_covariance: bool,
}

impl Default for RwmOptions {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            n_burn: None,
            target_accept: 0.234,
            initial_scale: None,
            adapt_covariance: true,
        }
    }
}

impl RwmOptions {
    pub fn with_samples(n_samples: usize) -> Self {
        Self {
            n_samples,
            ..Self::default()
        }
    }

    pub fn burn_in(&self) -> usize {
        self.n_burn.unwrap_or(self.n_samples / 5)
    }
}

/// Post-burn-in chain; `samples` holds one draw per row.
#[derive(Debug, Clone)]
pub struct McmcChain<T: Scalar> {
    pub samples: DMatrix<T>,
    pub acceptance_rate: T,
    /// Step scale at every iteration, burn-in included.
    pub step_scale_history: Vec<T>,
    pub nan_count: usize,
}

impl<T: Scalar> McmcChain<T> {
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    /// Samples as columns (`dim x n`).
    pub fn columns(&self) -> DMatrix<T> {
        self.samples.transpose()
    }

    /// Every `k`-th sample as columns.
    pub fn thinned_columns(&self, k: usize) -> DMatrix<T> {
        let k = k.max(1);
        let rows: Vec<usize> = (0..self.len()).step_by(k).collect();
        let mut out = DMatrix::zeros(self.dim(), rows.len());
        for (c, &r) in rows.iter().enumerate() {
            out.set_column(c, &self.samples.row(r).transpose());
        }
        out
    }

    pub fn mean(&self) -> DVector<T> {
        linalg::column_mean(&self.columns())
    }
}

/// Adaptive random-walk Metropolis with the given sample count, burn-in and
/// target acceptance rate.
pub fn rwm_sample<T, F>(
    log_density: F,
    x0: &DVector<T>,
    n_samples: usize,
    n_burn: usize,
    target_accept: f64,
    rng: &mut dyn RngCore,
) -> Result<McmcChain<T>>
where
    T: Scalar,
    F: FnMut(&DVector<T>, &mut dyn RngCore) -> Result<T>,
{
    let opts = RwmOptions {
        n_samples,
        n_burn: Some(n_burn),
        target_accept,
        ..RwmOptions::default()
    };
    rwm_sample_with(log_density, x0, &opts, rng)
}

/// As [`rwm_sample`] with full options.
///
/// The log density may consume randomness (one-sample likelihood estimates);
/// the current state's estimate is kept, never recomputed.
pub fn rwm_sample_with<T, F>(
    log_density: F,
    x0: &DVector<T>,
    opts: &RwmOptions,
    rng: &mut dyn RngCore,
) -> Result<McmcChain<T>>
where
    T: Scalar,
    F: FnMut(&DVector<T>, &mut dyn RngCore) -> Result<T>,
{
    rwm_core(log_density, x0, opts, rng, false)
}

/// `mirror` negates every proposal increment; a symmetric target started at
/// `-x0` then produces the mirror image of the chain started at `x0`.
fn rwm_core<T, F>(
    mut log_density: F,
    x0: &DVector<T>,
    opts: &RwmOptions,
    rng: &mut dyn RngCore,
    mirror: bool,
) -> Result<McmcChain<T>>
where
    T: Scalar,
    F: FnMut(&DVector<T>, &mut dyn RngCore) -> Result<T>,
{
    let dim = x0.len();
    let n = opts.n_samples;
    let n_burn = opts.burn_in();
    if n == 0 {
        return Err(Error::invalid("MCMC needs at least one sample"));
    }
    if dim == 0 {
        return Err(Error::invalid("MCMC needs a non-empty state"));
    }
    if !(opts.target_accept > 0.0 && opts.target_accept < 1.0) {
        return Err(Error::invalid("target acceptance must lie in (0, 1)"));
    }
    let mut x = x0.clone();
    let mut lp = log_density(&x, rng)?;
    if !lp.is_finite_value() {
        return Err(Error::invalid("log density is not finite at the initial state"));
    }
    let mut log_scale = opts
        .initial_scale
        .unwrap_or(2.38 / (dim as f64).sqrt())
        .ln();
    let mut shape: Option<DMatrix<T>> = None;
    let mut burn_buf: Vec<DVector<T>> = Vec::new();
    let total = n_burn + n;
    let mut samples = DMatrix::zeros(n, dim);
    let mut history = Vec::with_capacity(total);
    let mut accepted = 0usize;
    let mut nan_count = 0usize;

    for it in 0..total {
        let adapting = it < n_burn;
        let scale = T::of(log_scale.exp());
        history.push(scale);
        let mut z = rng::normal_vector::<T>(dim, rng);
        if mirror {
            z = -z;
        }
        let step = match &shape {
            Some(l) => l * z,
            None => z,
        };
        let prop = &x + step * scale;
        let lp_prop = log_density(&prop, rng)?;
        let u: f64 = rng::uniform(rng);
        let accept_prob = if lp_prop.as_f64().is_nan() {
            nan_count += 1;
            0.0
        } else {
            (lp_prop - lp).as_f64().exp().min(1.0)
        };
        let accept = accept_prob > 0.0 && u < accept_prob;
        if accept {
            x = prop;
            lp = lp_prop;
        }
        if adapting {
            let gain = ((it + 1) as f64).powf(-0.6);
            log_scale += gain * (accept_prob - opts.target_accept);
            if opts.adapt_covariance {
                burn_buf.push(x.clone());
                if it + 1 == n_burn / 2 && burn_buf.len() > 2 * dim {
                    shape = burn_in_shape(&burn_buf);
                    if shape.is_some() {
                        log_scale = (2.38 / (dim as f64).sqrt()).ln();
                    }
                }
            }
        } else {
            if accept {
                accepted += 1;
            }
            samples.set_row(it - n_burn, &x.transpose());
        }
        let proposals = it + 1;
        if proposals >= 100 && 2 * nan_count > proposals {
            return Err(Error::Sampler(format!(
                "{nan_count} of {proposals} proposals had a NaN log density"
            )));
        }
    }
    if 2 * nan_count > total {
        return Err(Error::Sampler(format!(
            "{nan_count} of {total} proposals had a NaN log density"
        )));
    }
    Ok(McmcChain {
        samples,
        acceptance_rate: T::of(accepted as f64 / n as f64),
        step_scale_history: history,
        nan_count,
    })
}

/// Cholesky factor of the (regularized) covariance of burn-in states.
fn burn_in_shape<T: Scalar>(states: &[DVector<T>]) -> Option<DMatrix<T>> {
    let dim = states[0].len();
    let mut xs = DMatrix::zeros(dim, states.len());
    for (j, s) in states.iter().enumerate() {
        xs.set_column(j, s);
    }
    let mut c = linalg::covariance(&xs);
    let tr = linalg::trace(&c) / T::of_usize(dim);
    if !(tr > T::zero()) || !tr.is_finite_value() {
        return None;
    }
    for i in 0..dim {
        c[(i, i)] += tr * T::of(1e-6);
    }
    c.cholesky().map(|ch| ch.unpack())
}

/// Integrated autocorrelation time of a scalar series (initial positive
/// sequence estimator).
pub fn integrated_autocorrelation(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return 1.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return 1.0;
    }
    let acf = |lag: usize| -> f64 {
        (0..n - lag)
            .map(|i| (xs[i] - mean) * (xs[i + lag] - mean))
            .sum::<f64>()
            / (n as f64 * var)
    };
    let mut tau = 1.0;
    let mut lag = 1;
    while lag + 1 < n / 2 {
        let pair = acf(lag) + acf(lag + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    tau
}
