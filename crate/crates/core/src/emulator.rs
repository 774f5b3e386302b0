//! Random-Fourier-feature emulation and the calibrate / encode / emulate /
//! sample pipeline built on it.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::bip::{gaussian_conditional, reconstruct_full_samples, InverseProblem};
use crate::error::{check_dim, Error, Result};
use crate::io;
use crate::linalg;
use crate::rng;
use crate::samplers::{run_tempered_eki, rwm_sample_with, EkiSchedule, McmcChain, RwmOptions, TemperedEnsemble};
use crate::subspace::{ReductionMethod, SampleContext, SpacePair, SubspaceOptions};
use crate::Scalar;

/// Random-feature regression settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RffOptions {
    pub n_features: usize,
    /// Ridge added to the feature Gram matrix, in standardized units.
    pub nugget: f64,
    /// Variance of the noise on each target, in target units; added to the
    /// nugget of the feature regression.
    pub noise_variance: Option<f64>,
    pub folds: usize,
    /// Multipliers of the median-distance lengthscales tried by cross-validation.
    pub scale_grid: Vec<f64>,
}

impl Default for RffOptions {
    fn default() -> Self {
        Self {
            n_features: 200,
            nugget: 1e-6,
            noise_variance: None,
            folds: 5,
            scale_grid: vec![0.25, 0.5, 1.0, 2.0, 4.0],
        }
    }
}

/// Fitted regressor `x -> y_mean + y_scale * (B^T [1; z] + W^T phi(x))` with
/// `phi(x) = sqrt(2/m) cos(Omega (z / l) + b)`, `z` the standardized input.
///
/// The affine trend `B` keeps predictions away from the training cloud from
/// collapsing onto the output mean.
#[derive(Debug, Clone)]
pub struct RffModel<T: Scalar> {
    /// `m x r`, standard normal.
    pub frequencies: DMatrix<T>,
    /// Uniform on `[0, 2 pi)`.
    pub phases: DVector<T>,
    /// `m x s`
    pub weights: DMatrix<T>,
    /// `(r + 1) x s`
    pub trend: DMatrix<T>,
    pub lengthscales: DVector<T>,
    pub nugget: T,
    pub x_mean: DVector<T>,
    pub x_scale: DVector<T>,
    pub y_mean: DVector<T>,
    pub y_scale: DVector<T>,
    /// Predictive covariance, constant in `x`.
    pub output_cov: DMatrix<T>,
    /// Multiplier of the median heuristic chosen by cross-validation.
    pub scale_factor: f64,
    pub cv_mse: Vec<f64>,
}

/// Flat `f64` image of an [`RffModel`] for persistence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RffSnapshot {
    pub input_dim: usize,
    pub output_dim: usize,
    pub n_features: usize,
    pub frequencies: Vec<f64>,
    pub phases: Vec<f64>,
    pub weights: Vec<f64>,
    pub trend: Vec<f64>,
    pub lengthscales: Vec<f64>,
    pub nugget: f64,
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_scale: Vec<f64>,
    pub output_cov: Vec<f64>,
    pub scale_factor: f64,
    pub cv_mse: Vec<f64>,
}

fn flat<T: Scalar>(it: impl IntoIterator<Item = T>) -> Vec<f64> {
    it.into_iter().map(|v| v.as_f64()).collect()
}

impl<T: Scalar> RffModel<T> {
    pub fn input_dim(&self) -> usize {
        self.frequencies.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_features(&self) -> usize {
        self.frequencies.nrows()
    }

    pub fn with_output_cov(mut self, cov: DMatrix<T>) -> Result<Self> {
        check_dim("emulator covariance", self.output_dim(), cov.nrows())?;
        linalg::check_spd(&cov, "emulator covariance")?;
        self.output_cov = cov;
        Ok(self)
    }

    fn standardize(&self, x: &DVector<T>) -> DVector<T> {
        (x - &self.x_mean).component_div(&self.x_scale)
    }

    pub fn snapshot(&self) -> RffSnapshot {
        RffSnapshot {
            input_dim: self.input_dim(),
            output_dim: self.output_dim(),
            n_features: self.n_features(),
            frequencies: flat(self.frequencies.iter().copied()),
            phases: flat(self.phases.iter().copied()),
            weights: flat(self.weights.iter().copied()),
            trend: flat(self.trend.iter().copied()),
            lengthscales: flat(self.lengthscales.iter().copied()),
            nugget: self.nugget.as_f64(),
            x_mean: flat(self.x_mean.iter().copied()),
            x_scale: flat(self.x_scale.iter().copied()),
            y_mean: flat(self.y_mean.iter().copied()),
            y_scale: flat(self.y_scale.iter().copied()),
            output_cov: flat(self.output_cov.iter().copied()),
            scale_factor: self.scale_factor,
            cv_mse: self.cv_mse.clone(),
        }
    }

    pub fn from_snapshot(s: &RffSnapshot) -> Result<Self> {
        let (r, d, m) = (s.input_dim, s.output_dim, s.n_features);
        let vec = |v: &[f64], n: usize, what: &'static str| -> Result<DVector<T>> {
            check_dim(what, n, v.len())?;
            Ok(DVector::from_iterator(n, v.iter().map(|&x| T::of(x))))
        };
        let mat = |v: &[f64], rows: usize, cols: usize, what: &'static str| -> Result<DMatrix<T>> {
            check_dim(what, rows * cols, v.len())?;
            Ok(DMatrix::from_iterator(rows, cols, v.iter().map(|&x| T::of(x))))
        };
        Ok(Self {
            frequencies: mat(&s.frequencies, m, r, "frequencies")?,
            phases: vec(&s.phases, m, "phases")?,
            weights: mat(&s.weights, m, d, "weights")?,
            trend: mat(&s.trend, r + 1, d, "trend")?,
            lengthscales: vec(&s.lengthscales, r, "lengthscales")?,
            nugget: T::of(s.nugget),
            x_mean: vec(&s.x_mean, r, "input mean")?,
            x_scale: vec(&s.x_scale, r, "input scale")?,
            y_mean: vec(&s.y_mean, d, "output mean")?,
            y_scale: vec(&s.y_scale, d, "output scale")?,
            output_cov: mat(&s.output_cov, d, d, "output covariance")?,
            scale_factor: s.scale_factor,
            cv_mse: s.cv_mse.clone(),
        })
    }
}

/// `n x m` feature matrix of standardized inputs `z` (`r x n`).
fn features<T: Scalar>(z: &DMatrix<T>, omega: &DMatrix<T>, phases: &DVector<T>, ls: &DVector<T>) -> DMatrix<T> {
    let m = omega.nrows();
    let scaled = DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| z[(i, j)] / ls[i]);
    let mut arg = omega * scaled;
    let amp = (T::of(2.0) / T::of_usize(m)).sqrt();
    for mut col in arg.column_iter_mut() {
        for (k, v) in col.iter_mut().enumerate() {
            *v = (*v + phases[k]).cos() * amp;
        }
    }
    arg.transpose()
}

/// Ridge weights `m x s` for features `phi` (`n x m`) and targets `y` (`n x s`).
fn ridge<T: Scalar>(phi: &DMatrix<T>, y: &DMatrix<T>, nugget: T) -> Result<DMatrix<T>> {
    let (n, m) = phi.shape();
    if m <= n {
        let mut gram = phi.transpose() * phi;
        for i in 0..m {
            gram[(i, i)] += nugget;
        }
        linalg::solve_spd(&gram, &(phi.transpose() * y))
    } else {
        let mut gram = phi * phi.transpose();
        for i in 0..n {
            gram[(i, i)] += nugget;
        }
        Ok(phi.transpose() * linalg::solve_spd(&gram, y)?)
    }
}

/// `n x (r + 1)` design `[1, z^T]`.
fn affine_design<T: Scalar>(z: &DMatrix<T>) -> DMatrix<T> {
    DMatrix::from_fn(z.ncols(), z.nrows() + 1, |j, i| if i == 0 { T::one() } else { z[(i - 1, j)] })
}

/// Affine trend and random-feature weights on its residuals, with one
/// feature ridge per output column.
fn fit_two_stage<T: Scalar>(
    design: &DMatrix<T>,
    phi: &DMatrix<T>,
    y: &DMatrix<T>,
    nugget: T,
    ridges: &[T],
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let trend = ridge(design, y, nugget)?;
    let resid = y - design * &trend;
    let weights = if ridges.iter().all(|&l| l == ridges[0]) {
        ridge(phi, &resid, ridges[0])?
    } else {
        let cols = (0..y.ncols())
            .map(|k| ridge(phi, &resid.columns(k, 1).into_owned(), ridges[k]))
            .collect::<Result<Vec<_>>>()?;
        let mut w = DMatrix::zeros(phi.ncols(), y.ncols());
        for (k, c) in cols.iter().enumerate() {
            w.set_column(k, &c.column(0));
        }
        w
    };
    Ok((trend, weights))
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    v[(v.len() - 1) / 2]
}

/// Per-dimension median pairwise distance of standardized inputs, times
/// `sqrt(r)` so the combined squared distance is of order one.
fn median_lengthscales<T: Scalar>(z: &DMatrix<T>) -> DVector<T> {
    let (r, n) = z.shape();
    let n = n.min(400);
    let root_r = (r as f64).sqrt();
    DVector::from_fn(r, |i, _| {
        let mut d = Vec::with_capacity(n * (n - 1) / 2);
        for a in 0..n {
            for b in a + 1..n {
                d.push((z[(i, a)] - z[(i, b)]).as_f64().abs());
            }
        }
        let med = median(d);
        T::of(if med > 0.0 { med * root_r } else { root_r })
    })
}

/// Fits a random-feature regressor to inputs `xs` (`r x J`) and targets
/// `ys` (`s x J`); the lengthscale multiplier is picked by k-fold
/// cross-validated mean squared error.
pub fn rff_fit<T: Scalar>(
    xs: &DMatrix<T>,
    ys: &DMatrix<T>,
    opts: &RffOptions,
    rng: &mut dyn RngCore,
) -> Result<RffModel<T>> {
    let (r, n) = xs.shape();
    let s = ys.nrows();
    check_dim("emulator targets", n, ys.ncols())?;
    if n < 2 {
        return Err(Error::invalid("emulator needs at least two training points"));
    }
    if r == 0 || s == 0 || opts.n_features == 0 {
        return Err(Error::invalid("emulator dimensions must be positive"));
    }
    if opts.scale_grid.is_empty() || opts.scale_grid.iter().any(|&c| !(c > 0.0)) {
        return Err(Error::invalid("lengthscale grid must be non-empty and positive"));
    }
    if !(opts.nugget >= 0.0) {
        return Err(Error::invalid("emulator nugget must be non-negative"));
    }
    if !xs.iter().chain(ys.iter()).all(|v| v.is_finite_value()) {
        return Err(Error::NonFinite("emulator training data".into()));
    }
    let x_mean = linalg::column_mean(xs);
    let x_sd = linalg::covariance(xs).diagonal().map(|v| v.sqrt());
    if x_sd.iter().all(|&v| v == T::zero()) {
        return Err(Error::invalid("emulator inputs have no variance"));
    }
    let x_scale = x_sd.map(|v| if v > T::zero() { v } else { T::one() });
    let y_mean = linalg::column_mean(ys);
    let y_scale = linalg::covariance(ys)
        .diagonal()
        .map(|v| if v > T::zero() { v.sqrt() } else { T::one() });
    let z = DMatrix::from_fn(r, n, |i, j| (xs[(i, j)] - x_mean[i]) / x_scale[i]);
    let yz = DMatrix::from_fn(n, s, |j, i| (ys[(i, j)] - y_mean[i]) / y_scale[i]);

    let m = opts.n_features;
    let omega = rng::normal_matrix::<T>(m, r, rng);
    let two_pi = T::of(2.0 * std::f64::consts::PI);
    let phases = DVector::from_fn(m, |_, _| rng::uniform::<T>(rng) * two_pi);
    let base = median_lengthscales(&z);
    let nugget = T::of(opts.nugget);
    if opts.noise_variance.is_some_and(|v| !(v >= 0.0)) {
        return Err(Error::invalid("emulator noise variance must be non-negative"));
    }
    let noise = T::of(opts.noise_variance.unwrap_or(0.0));
    let ridges: Vec<T> = y_scale.iter().map(|&sd| nugget + noise / (sd * sd)).collect();

    let folds = opts.folds.clamp(2, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let fold_of: Vec<usize> = {
        let mut f = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            f[i] = pos * folds / n;
        }
        f
    };

    let design = affine_design(&z);
    let mut cv_mse = Vec::with_capacity(opts.scale_grid.len());
    for &c in &opts.scale_grid {
        let ls = &base * T::of(c);
        let phi = features(&z, &omega, &phases, &ls);
        let mut sse = 0.0;
        for k in 0..folds {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != k).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == k).collect();
            if test.is_empty() || train.is_empty() {
                continue;
            }
            let (b, w) = fit_two_stage(
                &design.select_rows(&train),
                &phi.select_rows(&train),
                &yz.select_rows(&train),
                nugget,
                &ridges,
            )?;
            let pred = design.select_rows(&test) * b + phi.select_rows(&test) * w;
            sse += (pred - yz.select_rows(&test)).norm_squared().as_f64();
        }
        cv_mse.push(sse / (n * s) as f64);
    }
    // First minimum wins; non-finite scores never do.
    let best = cv_mse
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .fold(None, |acc: Option<(usize, f64)>, (i, &v)| match acc {
            Some((_, b)) if b <= v => acc,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Solver("emulator cross-validation failed".into()))?;
    let scale_factor = opts.scale_grid[best];
    let lengthscales = &base * T::of(scale_factor);
    let phi = features(&z, &omega, &phases, &lengthscales);
    let (trend, weights) = fit_two_stage(&design, &phi, &yz, nugget, &ridges)?;
    Ok(RffModel {
        frequencies: omega,
        phases,
        weights,
        trend,
        lengthscales,
        nugget,
        x_mean,
        x_scale,
        y_mean,
        y_scale,
        output_cov: DMatrix::identity(s, s),
        scale_factor,
        cv_mse,
    })
}

/// Emulator mean at `x` and the constant predictive covariance.
pub fn rff_predict<T: Scalar>(model: &RffModel<T>, x: &DVector<T>) -> Result<(DVector<T>, DMatrix<T>)> {
    check_dim("emulator input", model.input_dim(), x.len())?;
    let z = DMatrix::from_column_slice(x.len(), 1, model.standardize(x).as_slice());
    let phi = features(&z, &model.frequencies, &model.phases, &model.lengthscales);
    let yz = (affine_design(&z) * &model.trend + phi * &model.weights).transpose();
    let mean = DVector::from_fn(model.output_dim(), |i, _| model.y_mean[i] + model.y_scale[i] * yz[(i, 0)]);
    Ok((mean, model.output_cov.clone()))
}

/// Emulator means at every column of `xs`.
pub fn rff_predict_batch<T: Scalar>(model: &RffModel<T>, xs: &DMatrix<T>) -> Result<DMatrix<T>> {
    check_dim("emulator input", model.input_dim(), xs.nrows())?;
    let z = DMatrix::from_fn(xs.nrows(), xs.ncols(), |i, j| (xs[(i, j)] - model.x_mean[i]) / model.x_scale[i]);
    let phi = features(&z, &model.frequencies, &model.phases, &model.lengthscales);
    let mut out = (affine_design(&z) * &model.trend + phi * &model.weights).transpose();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v = model.y_mean[i] + model.y_scale[i] * *v;
        }
    }
    Ok(out)
}

/// Pipeline settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CesConfig {
    pub ensemble_size: usize,
    /// Temperatures in `(0, 1]` at which the ensemble is recorded; the prior
    /// ensemble is always kept as well.
    pub alpha_stops: Vec<f64>,
    pub schedule: EkiSchedule,
    pub input_method: ReductionMethod,
    /// `None` picks output PCA for input PCA and the prior-based output
    /// space otherwise.
    pub output_method: Option<ReductionMethod>,
    pub r: usize,
    pub s: usize,
    pub subspace: SubspaceOptions,
    /// Recorded temperature whose ensemble trains the emulator.
    pub emulator_alpha: f64,
    pub rff: RffOptions,
    pub mcmc: RwmOptions,
    /// Keep every `thin`-th chain state for reconstruction.
    pub thin: usize,
}

impl Default for CesConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 200,
            alpha_stops: (1..=10).map(|k| k as f64 / 10.0).collect(),
            schedule: EkiSchedule::default(),
            input_method: ReductionMethod::Accumulated {
                alpha_min: 0.0,
                alpha_max: 1.0,
            },
            output_method: None,
            r: 8,
            s: 8,
            subspace: SubspaceOptions {
                pooled_linearization: true,
                ..SubspaceOptions::default()
            },
            emulator_alpha: 0.5,
            rff: RffOptions::default(),
            mcmc: RwmOptions::with_samples(20_000),
            thin: 10,
        }
    }
}

impl CesConfig {
    pub fn output_method(&self) -> ReductionMethod {
        self.output_method.unwrap_or(match self.input_method {
            ReductionMethod::Pca => ReductionMethod::Pca,
            _ => ReductionMethod::Lis { alpha: 0.0 },
        })
    }
}

/// Stream identifiers, one per stage; every stage draws from
/// `rng::stream(seed, id)`.
pub const STREAM_CALIBRATE: u64 = 1;
pub const STREAM_ENCODE: u64 = 2;
pub const STREAM_EMULATE: u64 = 3;
pub const STREAM_SAMPLE: u64 = 4;
pub const STREAM_RECONSTRUCT: u64 = 5;

/// Everything needed to rerun a pipeline and audit its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CesProvenance {
    pub seed: u64,
    pub streams: Vec<(String, u64)>,
    pub recorded_alphas: Vec<f64>,
    pub ensemble_size: usize,
    pub input_method: String,
    pub output_method: String,
    pub r: usize,
    pub s: usize,
    pub emulator_scale_factor: f64,
    pub emulator_cv_mse: Vec<f64>,
    pub mcmc_acceptance: f64,
    pub mcmc_nan_count: usize,
    pub mcmc_samples: usize,
    pub mcmc_burn_in: usize,
    pub thin: usize,
}

pub struct CesResult<T: Scalar> {
    pub config: CesConfig,
    pub space: SpacePair<T>,
    pub emulator: RffModel<T>,
    /// Chain over the whitened reduced coordinates.
    pub chain: McmcChain<T>,
    /// `d_x x n` reconstructed samples in original coordinates.
    pub full_samples: DMatrix<T>,
    pub ensemble: TemperedEnsemble<T>,
    pub provenance: CesProvenance,
}

impl<T: Scalar> CesResult<T> {
    pub fn posterior_mean(&self) -> DVector<T> {
        linalg::column_mean(&self.full_samples)
    }

    /// Writes `config.json`, `provenance.json`, `emulator.json`, CSV chains
    /// and binary bases into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::invalid(format!("{}: {e}", dir.display())))?;
        let json = |name: &str, value: &dyn erased::Json| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, value.to_json()?).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
        };
        json("config.json", &self.config)?;
        json("provenance.json", &self.provenance)?;
        json("emulator.json", &self.emulator.snapshot())?;
        let header = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        io::write_matrix_csv(&dir.join("chain.csv"), &self.chain.samples, &header("xr", self.chain.dim()))?;
        io::write_matrix_csv(
            &dir.join("full_samples.csv"),
            &self.full_samples.transpose(),
            &header("x", self.full_samples.nrows()),
        )?;
        io::write_matrix_bin(&dir.join("u_r.bin"), &self.space.original.u_r)?;
        io::write_matrix_bin(&dir.join("v_s.bin"), &self.space.original.v_s)?;
        io::write_matrix_bin(&dir.join("u_r_whitened.bin"), &self.space.whitened.u_r)?;
        io::write_matrix_bin(&dir.join("v_s_whitened.bin"), &self.space.whitened.v_s)?;
        Ok(())
    }
}

mod erased {
    use crate::error::{Error, Result};

    pub trait Json {
        fn to_json(&self) -> Result<String>;
    }

    impl<S: serde::Serialize> Json for S {
        fn to_json(&self) -> Result<String> {
            serde_json::to_string_pretty(self).map_err(|e| Error::InvalidInput(e.to_string()))
        }
    }
}

/// Runs the four stages on `p`:
/// tempered EKI in the full space, reduced space from the recorded
/// ensembles, emulator of the reduced map on the `emulator_alpha` ensemble,
/// and random-walk Metropolis on the emulated reduced posterior, lifted back
/// to the full space.
pub fn ces_run<T: Scalar>(p: &InverseProblem<T>, config: &CesConfig, seed: u64) -> Result<CesResult<T>> {
    let stops: Vec<T> = config.alpha_stops.iter().map(|&a| T::of(a)).collect();
    let ensemble = run_tempered_eki(
        p,
        config.ensemble_size,
        &stops,
        config.schedule,
        &mut rng::stream(seed, STREAM_CALIBRATE),
    )
    .map_err(|e| e.in_stage("calibrate"))?;

    let output_method = config.output_method();
    let encode = |rng: &mut dyn RngCore| -> Result<(SampleContext<'_, T>, SpacePair<T>)> {
        let ctx = SampleContext::new(p, &ensemble, config.subspace.clone(), rng)?;
        let pair = ctx.build(&config.input_method, &output_method, config.r, config.s)?;
        Ok((ctx, pair))
    };
    let (ctx, space) = encode(&mut rng::stream(seed, STREAM_ENCODE)).map_err(|e| e.in_stage("encode"))?;

    let emulate = || -> Result<RffModel<T>> {
        let k = ensemble
            .position(T::of(config.emulator_alpha))
            .ok_or_else(|| Error::invalid(format!("no ensemble recorded at {}", config.emulator_alpha)))?;
        let xw = ctx.transform.whiten_inputs(&ensemble.ensembles[k]);
        let gw = ctx.transform.whiten_outputs(&ensemble.evaluations[k]);
        let xr = space.whitened.u_r.transpose() * xw;
        let ys = space.whitened.v_s.transpose() * gw;
        // Whitened noise is the identity, so V_s^T Gamma V_s = I_s.
        let noise = space.whitened.v_s.transpose() * ctx.whitened.gamma() * &space.whitened.v_s;
        let mut rff = config.rff.clone();
        if rff.noise_variance.is_none() && (p.noisy_forward() || p.forward().is_stochastic()) {
            rff.noise_variance = Some(1.0);
        }
        let model = rff_fit(&xr, &ys, &rff, &mut rng::stream(seed, STREAM_EMULATE))?;
        model.with_output_cov(linalg::symmetrize(&noise))
    };
    let emulator = emulate().map_err(|e| e.in_stage("emulate"))?;

    let sample = || -> Result<McmcChain<T>> {
        let y_s = space.whitened.v_s.transpose() * ctx.whitened.y_dagger();
        let noise_chol = emulator
            .output_cov
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("emulator covariance"))?;
        let half = T::of(0.5);
        let log_density = |x_r: &DVector<T>, _: &mut dyn RngCore| -> Result<T> {
            let (mean, _) = rff_predict(&emulator, x_r)?;
            // Whitened prior: the marginal of x_r is standard normal.
            Ok(-half * (x_r.norm_squared() + linalg::inv_quad(&noise_chol, &(&y_s - mean))))
        };
        let last = ensemble.ensembles.len() - 1;
        let x0 = space.whitened.u_r.transpose() * linalg::column_mean(&ctx.transform.whiten_inputs(&ensemble.ensembles[last]));
        rwm_sample_with(log_density, &x0, &config.mcmc, &mut rng::stream(seed, STREAM_SAMPLE))
    };
    let chain = sample().map_err(|e| e.in_stage("sample"))?;

    let reconstruct = || -> Result<DMatrix<T>> {
        let cond = gaussian_conditional(ctx.whitened.gamma0(), &space.whitened.u_r, &space.whitened.u_perp)?;
        reconstruct_full_samples(
            &space.whitened,
            &cond,
            &chain.thinned_columns(config.thin.max(1)),
            Some(&ctx.transform),
            &mut rng::stream(seed, STREAM_RECONSTRUCT),
        )
    };
    let full_samples = reconstruct().map_err(|e| e.in_stage("reconstruct"))?;

    let provenance = CesProvenance {
        seed,
        streams: vec![
            ("calibrate".into(), STREAM_CALIBRATE),
            ("encode".into(), STREAM_ENCODE),
            ("emulate".into(), STREAM_EMULATE),
            ("sample".into(), STREAM_SAMPLE),
            ("reconstruct".into(), STREAM_RECONSTRUCT),
        ],
        recorded_alphas: ensemble.alphas.iter().map(|a| a.as_f64()).collect(),
        ensemble_size: config.ensemble_size,
        input_method: config.input_method.label(),
        output_method: output_method.label(),
        r: config.r,
        s: config.s,
        emulator_scale_factor: emulator.scale_factor,
        emulator_cv_mse: emulator.cv_mse.clone(),
        mcmc_acceptance: chain.acceptance_rate.as_f64(),
        mcmc_nan_count: chain.nan_count,
        mcmc_samples: config.mcmc.n_samples,
        mcmc_burn_in: config.mcmc.burn_in(),
        thin: config.thin.max(1),
    };
    drop(ctx);
    Ok(CesResult {
        config: config.clone(),
        space,
        emulator,
        chain,
        full_samples,
        ensemble,
        provenance,
    })
}
