//! Sweeps over reduced dimensions, temperatures, ensemble sizes and prior
//! scales, scored against a reference posterior.

use std::path::PathBuf;

use alis::bip::{gaussian_conditional, ReducedPosterior};
use alis::emulator::{ces_run, CesConfig};
use alis::linalg::column_mean;
use alis::metrics::{hellinger2_gaussian, hellinger2_snis_from_log_ratios, w2_gaussian_sq};
use alis::problems::{linear_posterior, linear_reduced_posterior, GaussianPosterior};
use alis::rng::{self, stream_id};
use alis::subspace::{ReductionMethod, SampleContext, SpacePair};
use alis::{InverseProblem64, Matrix, ReducedSpace64};
use anyhow::{anyhow, bail, Result};
use rand::RngCore;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Metric, Sweep};
use crate::instance::{required_alphas, tempered_samples, Instance};
use crate::reference::{load_or_build, Reference};

const TAG_SAMPLES: u64 = 1;
const TAG_METRIC: u64 = 2;
const TAG_CES: u64 = 3;

/// Execution settings that do not change results.
#[derive(Debug, Clone)]
pub struct RunEnv {
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
    pub cache_dir: PathBuf,
}

impl Default for RunEnv {
    fn default() -> Self {
        Self {
            jobs: None,
            cache_dir: PathBuf::from(".alis-cache"),
        }
    }
}

impl RunEnv {
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> Result<R> {
        match self.jobs {
            Some(n) => Ok(rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build()?.install(f)),
            None => Ok(f()),
        }
    }
}

/// One failed (point, method, replicate) evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub point: String,
    pub method: String,
    pub replicate: usize,
    pub message: String,
}

/// Per-point, per-method replicate values; `None` marks a failure.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub sweep_column: String,
    pub points: Vec<String>,
    pub methods: Vec<String>,
    /// `values[point][method][replicate]`
    pub values: Vec<Vec<Vec<Option<f64>>>>,
    pub failures: Vec<Failure>,
}

impl ExperimentReport {
    /// Lower median over replicates; empty when any replicate failed.
    pub fn cell(&self, point: usize, method: usize) -> Option<f64> {
        let reps = &self.values[point][method];
        let vals: Option<Vec<f64>> = reps.iter().copied().collect();
        lower_median(&vals?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(&self.sweep_column);
        for m in &self.methods {
            out.push_str(",err_");
            out.push_str(m);
        }
        out.push('\n');
        for (i, p) in self.points.iter().enumerate() {
            out.push_str(p);
            for j in 0..self.methods.len() {
                out.push(',');
                if let Some(v) = self.cell(i, j) {
                    out.push_str(&format_value(v));
                }
            }
            out.push('\n');
        }
        out
    }

    /// One line per failure, in sweep order.
    pub fn error_log(&self) -> String {
        self.failures
            .iter()
            .map(|f| format!("{}={} method={} replicate={}: {}\n", self.sweep_column, f.point, f.method, f.replicate, f.message))
            .collect()
    }
}

/// Lower median: the `floor((n - 1) / 2)`-th order statistic.
pub fn lower_median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

/// Shortest round-trip scientific notation.
pub fn format_value(v: f64) -> String {
    format!("{v:e}")
}

/// Method evaluated at sweep point `i` (temperature sweeps retarget `Lis`).
fn method_at(m: &ReductionMethod, sweep: &Sweep, i: usize) -> ReductionMethod {
    match (m, sweep) {
        (ReductionMethod::Lis { .. }, Sweep::Alpha { values, .. }) => ReductionMethod::Lis { alpha: values[i] },
        _ => *m,
    }
}

fn column_label(m: &ReductionMethod, sweep: &Sweep) -> String {
    match (m, sweep) {
        (ReductionMethod::Lis { .. }, Sweep::Alpha { .. }) => "lis".into(),
        _ => m.label(),
    }
}

/// Everything shared by the jobs of one problem instance.
struct Prepared {
    inst: Instance,
    exact: Option<GaussianPosterior<f64>>,
    reference: Option<Reference>,
}

pub fn run_experiment(cfg: &ExperimentConfig, env: &RunEnv) -> Result<ExperimentReport> {
    cfg.validate()?;
    let labels: Vec<String> = cfg.methods.iter().map(|m| column_label(m, &cfg.sweep)).collect();
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            bail!("duplicate method column {l}");
        }
    }
    let n_points = cfg.sweep.len();
    // Instance index of each sweep point.
    let (specs, point_instance): (Vec<_>, Vec<usize>) = match &cfg.sweep {
        Sweep::Gamma0 { values, .. } => (
            values.iter().map(|&g| cfg.problem.with_gamma0(g)).collect::<Result<Vec<_>>>()?,
            (0..n_points).collect(),
        ),
        _ => (vec![cfg.problem.clone()], vec![0; n_points]),
    };
    let cache_dir = cfg.reference.cache_dir.clone().unwrap_or_else(|| env.cache_dir.clone());
    let needs_reference = cfg.metric == Metric::Hellinger && !cfg.problem.is_linear();

    env.install(|| {
        let prepared = specs
            .par_iter()
            .map(|spec| {
                let inst = Instance::new(spec)?;
                let exact = match &inst.operator {
                    Some(a) => Some(linear_posterior(&inst.problem, a)?),
                    None => None,
                };
                let reference = if needs_reference {
                    Some(load_or_build(&inst, &cfg.reference, &cache_dir)?)
                } else {
                    None
                };
                Ok(Prepared { inst, exact, reference })
            })
            .collect::<Result<Vec<_>>>()?;

        // Points sharing one set of tempered samples.
        let groups: Vec<Vec<usize>> = if cfg.sweep.changes_samples() || cfg.metric == Metric::ParamError {
            (0..n_points).map(|i| vec![i]).collect()
        } else {
            vec![(0..n_points).collect()]
        };
        let jobs: Vec<(usize, usize)> = (0..groups.len())
            .flat_map(|g| (0..cfg.replicates).map(move |rep| (g, rep)))
            .collect();
        let results: Vec<Vec<(usize, Vec<Result<f64>>)>> = jobs
            .par_iter()
            .map(|&(g, rep)| run_group(cfg, &prepared[point_instance[groups[g][0]]], g, &groups[g], rep))
            .collect();

        let mut values = vec![vec![vec![None; cfg.replicates]; cfg.methods.len()]; n_points];
        let mut failed = Vec::new();
        for (&(_, rep), group) in jobs.iter().zip(results) {
            for (point, per_method) in group {
                for (m, res) in per_method.into_iter().enumerate() {
                    match res {
                        Ok(v) => values[point][m][rep] = Some(v),
                        Err(e) => failed.push((point, m, rep, format!("{e:#}"))),
                    }
                }
            }
        }
        failed.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
        let failures: Vec<Failure> = failed
            .into_iter()
            .map(|(point, m, replicate, message)| Failure {
                point: cfg.sweep.label(point),
                method: labels[m].clone(),
                replicate,
                message,
            })
            .collect();
        for f in &failures {
            log::error!("{}={} {} replicate {}: {}", cfg.sweep.column(), f.point, f.method, f.replicate, f.message);
        }
        Ok(ExperimentReport {
            sweep_column: cfg.sweep.column().to_string(),
            points: (0..n_points).map(|i| cfg.sweep.label(i)).collect(),
            methods: labels.clone(),
            values,
            failures,
        })
    })?
}

/// Draws one replicate of samples and scores every method at every point of
/// the group; a sampling failure fails the whole group.
fn run_group(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    group: usize,
    points: &[usize],
    rep: usize,
) -> Vec<(usize, Vec<Result<f64>>)> {
    if cfg.metric == Metric::ParamError {
        return points
            .iter()
            .map(|&i| (i, cfg.methods.iter().enumerate().map(|(m, method)| param_error(cfg, prep, i, m, method, rep)).collect()))
            .collect();
    }
    let fail_all = |e: anyhow::Error| {
        points
            .iter()
            .map(|&i| (i, cfg.methods.iter().map(|_| Err(anyhow!("sampling failed: {e:#}"))).collect()))
            .collect()
    };
    let mut r = rng::stream(cfg.seed, stream_id(&[TAG_SAMPLES, group as u64, rep as u64]));
    let source = match &cfg.sweep {
        Sweep::EnsembleSize { values, .. } => cfg.sampling.source.with_size(values[points[0]]),
        _ => cfg.sampling.source.clone(),
    };
    let alphas = required_alphas(&cfg.sampling.alphas, &cfg.methods, Some(&cfg.sweep));
    let samples = match tempered_samples(&prep.inst, &source, &alphas, &mut r) {
        Ok(s) => s,
        Err(e) => return fail_all(e),
    };
    let mut opts = cfg.subspace.clone();
    opts.gradient = cfg.gradient;
    let ctx = match SampleContext::new(&prep.inst.problem, &samples, opts, &mut r) {
        Ok(c) => c,
        Err(e) => return fail_all(e.into()),
    };
    let dims = (prep.inst.problem.input_dim(), prep.inst.problem.output_dim());
    let point_ranks: Vec<(usize, usize)> = points.iter().map(|&i| ranks(cfg, &prep.inst.problem, i)).collect();
    let mut per_point: Vec<Vec<Result<f64>>> = points.iter().map(|_| Vec::new()).collect();
    for (m, method) in cfg.methods.iter().enumerate() {
        // Temperature sweeps change the method from point to point.
        let nested = (!matches!(cfg.sweep, Sweep::Alpha { .. })).then(|| NestedBases::new(&ctx, method, &point_ranks, dims));
        for (k, &i) in points.iter().enumerate() {
            let mut mr = rng::stream(cfg.seed, stream_id(&[TAG_METRIC, i as u64, m as u64, rep as u64]));
            let (r, s) = point_ranks[k];
            let space = match &nested {
                Some(nb) => nb.space(&ctx, r, s, dims),
                None => {
                    let here = method_at(method, &cfg.sweep, i);
                    ctx.build(&here, &here, r, s).map_err(Into::into)
                }
            };
            per_point[k].push(space.and_then(|sp| score(cfg, prep, &ctx, &sp, &mut mr)));
        }
    }
    points.iter().copied().zip(per_point).collect()
}

/// Bases at the largest partial ranks of a sweep; smaller ranks are their
/// leading columns, which is exact because every basis construction is
/// nested (eigenvector prefixes and greedy output stages).
struct NestedBases {
    u: Result<Option<Matrix>, String>,
    v: Result<Option<Matrix>, String>,
}

impl NestedBases {
    fn new(ctx: &SampleContext<'_, f64>, method: &ReductionMethod, ranks: &[(usize, usize)], dims: (usize, usize)) -> Self {
        let r_max = ranks.iter().map(|rs| rs.0).filter(|&r| r < dims.0).max();
        let s_max = ranks.iter().map(|rs| rs.1).filter(|&s| s < dims.1).max();
        Self {
            u: r_max.map(|r| ctx.input_basis(method, r)).transpose().map_err(|e| e.to_string()),
            v: s_max.map(|s| ctx.output_basis(method, s)).transpose().map_err(|e| e.to_string()),
        }
    }

    fn space(&self, ctx: &SampleContext<'_, f64>, r: usize, s: usize, dims: (usize, usize)) -> Result<SpacePair<f64>> {
        let pick = |basis: &Result<Option<Matrix>, String>, k: usize, d: usize, side: &str| -> Result<Matrix> {
            if k > d {
                bail!("requested {k} {side} directions in dimension {d}");
            }
            if k == d {
                return Ok(Matrix::identity(d, d));
            }
            match basis {
                Ok(Some(b)) => Ok(b.columns(0, k).into_owned()),
                Ok(None) => unreachable!("partial ranks have a basis"),
                Err(e) => bail!("{side} basis: {e}"),
            }
        };
        let u = pick(&self.u, r, dims.0, "input")?;
        let v = pick(&self.v, s, dims.1, "output")?;
        Ok(ctx.pair(u, v)?)
    }
}

fn ranks(cfg: &ExperimentConfig, p: &InverseProblem64, point: usize) -> (usize, usize) {
    let (r, s) = cfg.sweep.ranks(point);
    (r.unwrap_or(p.input_dim()), s.unwrap_or(p.output_dim()))
}

fn score(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    ctx: &SampleContext<'_, f64>,
    space: &SpacePair<f64>,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    match (&prep.exact, &prep.inst.operator) {
        (Some(exact), Some(a)) => {
            let approx = linear_reduced_posterior(&prep.inst.problem, a, &space.original)?;
            Ok(match cfg.metric {
                Metric::W2 => w2_gaussian_sq(&approx, exact)?,
                _ => hellinger2_gaussian(&approx, exact)?,
            })
        }
        _ => {
            let reference = prep.reference.as_ref().ok_or_else(|| anyhow!("no reference chain"))?;
            snis_hellinger(&ctx.whitened, &space.whitened, reference, cfg.snis_samples, rng)
        }
    }
}

/// Importance-sampled squared Hellinger distance between the reduced and the
/// full posterior, both whitened. The prior cancels in the log ratio, which
/// is the one-draw reduced likelihood minus the full likelihood.
pub fn snis_hellinger(
    wp: &InverseProblem64,
    space: &ReducedSpace64,
    reference: &Reference,
    limit: Option<usize>,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let dx = wp.input_dim();
    let cond = gaussian_conditional(&Matrix::identity(dx, dx), &space.u_r, &space.u_perp)?;
    let rp = ReducedPosterior::new(wp, space, &cond)?;
    let n = limit.unwrap_or(usize::MAX).min(reference.samples.ncols());
    let mut ratios = Vec::with_capacity(n);
    for j in 0..n {
        let x = reference.samples.column(j).into_owned();
        let g = reference.evaluations.column(j).into_owned();
        let lifted = rp.lift(&(space.u_r.transpose() * &x), rng);
        let gl = wp.evaluate_clean(&lifted, rng)?;
        ratios.push(rp.log_reduced_likelihood_of_output(&gl) - wp.log_likelihood_of_output(&g));
    }
    Ok(hellinger2_snis_from_log_ratios(&ratios)?.value)
}

/// Distance from the true parameter to the mean of the emulated posterior.
fn param_error(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    point: usize,
    m: usize,
    method: &ReductionMethod,
    rep: usize,
) -> Result<f64> {
    let (r, s) = ranks(cfg, &prep.inst.problem, point);
    let mut ces = CesConfig {
        input_method: *method,
        output_method: if *method == ReductionMethod::Pca { Some(ReductionMethod::Pca) } else { cfg.ces.output_method },
        r,
        s,
        ..cfg.ces.clone()
    };
    ces.subspace.gradient = cfg.gradient;
    if let Sweep::EnsembleSize { values, .. } = &cfg.sweep {
        ces.ensemble_size = values[point];
    }
    let seed = rng::stream(cfg.seed, stream_id(&[TAG_CES, point as u64, m as u64, rep as u64])).next_u64();
    let result = ces_run(&prep.inst.problem, &ces, seed)?;
    Ok((column_mean(&result.full_samples) - &prep.inst.truth).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{SampleSource, SamplingConfig};
    use alis::problems::LinearProblemSpec;

    fn config(values: Vec<usize>, replicates: usize) -> ExperimentConfig {
        ExperimentConfig {
            name: "t".into(),
            problem: crate::config::ProblemSpec::Linear(LinearProblemSpec::new(8, 8, 3)),
            methods: vec![
                ReductionMethod::Pca,
                ReductionMethod::Lis { alpha: 0.0 },
                ReductionMethod::Lis { alpha: 1.0 },
            ],
            gradient: alis::reduction::GradientMode::Exact,
            sampling: SamplingConfig {
                source: SampleSource::Exact { n_per_alpha: 40 },
                alphas: vec![0.5, 1.0],
            },
            subspace: Default::default(),
            sweep: Sweep::Rank { values },
            metric: Metric::W2,
            replicates,
            seed: 5,
            output: None,
            reference: Default::default(),
            snis_samples: None,
            ces: Default::default(),
        }
    }

    #[test]
    fn lower_median_convention() {
        assert_eq!(lower_median(&[]), None);
        assert_eq!(lower_median(&[3.0]), Some(3.0));
        assert_eq!(lower_median(&[4.0, 1.0]), Some(1.0));
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), Some(2.0));
        assert_eq!(lower_median(&[5.0, 1.0, 3.0]), Some(3.0));
    }

    #[test]
    fn csv_shape_and_full_rank_row() {
        let rep = run_experiment(&config(vec![1, 2, 4, 8], 2), &RunEnv::default()).unwrap();
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "dim,err_pca,err_lis_0,err_lis_1");
        assert_eq!(lines.len(), 5);
        assert!(rep.failures.is_empty());
        for m in 1..3 {
            assert!(rep.cell(3, m).unwrap() < 1e-8);
        }
        // Every cell is filled and parses back.
        for l in &lines[1..] {
            assert!(l.split(',').skip(1).all(|c| c.parse::<f64>().is_ok()));
        }
    }

    #[test]
    fn failures_leave_empty_cells() {
        let rep = run_experiment(&config(vec![2, 9], 1), &RunEnv::default()).unwrap();
        assert_eq!(rep.failures.len(), 3);
        assert!(rep.to_csv().lines().nth(2).unwrap() == "9,,,");
        assert!(rep.error_log().contains("dim=9"));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let cfg = config(vec![2, 4], 3);
        let a = run_experiment(&cfg, &RunEnv { jobs: Some(1), ..RunEnv::default() }).unwrap();
        let b = run_experiment(&cfg, &RunEnv { jobs: Some(4), ..RunEnv::default() }).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn alpha_sweep_relabels_lis() {
        let mut cfg = config(vec![], 1);
        cfg.methods = vec![ReductionMethod::Pca, ReductionMethod::Lis { alpha: 0.5 }];
        cfg.sweep = Sweep::Alpha { values: vec![0.0, 0.25, 1.0], r: 2, s: 2 };
        let rep = run_experiment(&cfg, &RunEnv::default()).unwrap();
        assert!(rep.to_csv().starts_with("alpha,err_pca,err_lis\n0,"));
        // PCA ignores the temperature.
        assert_eq!(rep.cell(0, 0), rep.cell(2, 0));
        assert!(rep.failures.is_empty());
    }

    #[test]
    fn snis_is_zero_in_the_full_space() {
        use crate::config::ReferenceOptions;
        let inst = Instance::new(&crate::config::ProblemSpec::Linexp(LinearProblemSpec::new(3, 3, 1))).unwrap();
        let opts = ReferenceOptions { n_samples: 1000, thin: 10, pilot_ensemble: 20, ..Default::default() };
        let key = crate::reference::cache_key(&inst.spec, &opts);
        let reference = crate::reference::build(&inst, &opts, &key).unwrap();
        let (wp, _) = alis::bip::whiten_problem(&inst.problem).unwrap();
        let h = snis_hellinger(&wp, &ReducedSpace64::full(3, 3), &reference, None, &mut rng::stream(0, 0)).unwrap();
        assert!(h.abs() < 1e-12);
    }
}
