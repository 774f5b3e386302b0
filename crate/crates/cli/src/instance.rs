//! Problem instances and the tempered samples that feed the diagnostics.

use alis::bip::whiten_problem;
use alis::problems::{
    linear_tempered_posterior, make_darcy_problem, make_linear_problem, make_linexp_problem, make_lorenz_problem,
};
use alis::samplers::{run_tempered_eki, rwm_sample_with, RwmOptions, TemperedEnsemble};
use alis::subspace::ReductionMethod;
use alis::{InverseProblem64, Matrix, Vector};
use anyhow::{bail, Result};
use rand::RngCore;

use crate::config::{ProblemSpec, SampleSource, Sweep};

/// A concrete problem with the parameter that generated its data.
#[derive(Debug, Clone)]
pub struct Instance {
    pub spec: ProblemSpec,
    pub problem: InverseProblem64,
    /// Forward operator of linear problems.
    pub operator: Option<Matrix>,
    pub truth: Vector,
}

impl Instance {
    pub fn new(spec: &ProblemSpec) -> Result<Self> {
        let (problem, operator, truth) = match spec {
            ProblemSpec::Linear(s) => {
                let lp = make_linear_problem::<f64>(s)?;
                (lp.problem, Some(lp.a), lp.x_true)
            }
            ProblemSpec::Linexp(s) => {
                let lp = make_linexp_problem::<f64>(s)?;
                (lp.problem, None, lp.x_true)
            }
            ProblemSpec::Darcy(s) => {
                let dp = make_darcy_problem::<f64>(s)?;
                (dp.problem, None, dp.u_true)
            }
            ProblemSpec::Lorenz(s) => {
                let lp = make_lorenz_problem::<f64>(s)?;
                (lp.problem, None, lp.f_true)
            }
        };
        Ok(Self {
            spec: spec.clone(),
            problem,
            operator,
            truth,
        })
    }
}

/// Sorted positive temperatures: the configured ones plus those the methods
/// and the sweep refer to.
pub fn required_alphas(configured: &[f64], methods: &[ReductionMethod], sweep: Option<&Sweep>) -> Vec<f64> {
    let mut out: Vec<f64> = configured.to_vec();
    for m in methods {
        match *m {
            ReductionMethod::Pca => {}
            ReductionMethod::Lis { alpha } => out.push(alpha),
            ReductionMethod::Accumulated { alpha_min, alpha_max } => out.extend([alpha_min, alpha_max]),
        }
    }
    if let Some(Sweep::Alpha { values, .. }) = sweep {
        out.extend(values);
    }
    out.retain(|&a| a > 0.0);
    out.sort_by(f64::total_cmp);
    out.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    out
}

/// Samples and forward evaluations at temperature 0 and at every `alphas` stop.
pub fn tempered_samples(
    inst: &Instance,
    source: &SampleSource,
    alphas: &[f64],
    rng: &mut dyn RngCore,
) -> Result<TemperedEnsemble<f64>> {
    let p = &inst.problem;
    match source {
        SampleSource::Exact { n_per_alpha } => {
            let Some(a) = &inst.operator else {
                bail!("exact tempered draws need a linear problem");
            };
            let mut out = TemperedEnsemble {
                alphas: Vec::new(),
                ensembles: Vec::new(),
                evaluations: Vec::new(),
            };
            for alpha in std::iter::once(0.0).chain(alphas.iter().copied()) {
                let xs = linear_tempered_posterior(p, a, alpha)?.sample(*n_per_alpha, rng);
                out.evaluations.push(a * &xs);
                out.ensembles.push(xs);
                out.alphas.push(alpha);
            }
            Ok(out)
        }
        SampleSource::Eki { ensemble_size, schedule } => {
            Ok(run_tempered_eki(p, *ensemble_size, alphas, *schedule, rng)?)
        }
        SampleSource::Mcmc { n_per_alpha, thin, rwm } => mcmc_samples(inst, *n_per_alpha, *thin, rwm, alphas, rng),
    }
}

/// Random-walk chains on the whitened tempered posteriors, each started at
/// the mean of the previous temperature.
fn mcmc_samples(
    inst: &Instance,
    n: usize,
    thin: usize,
    rwm: &RwmOptions,
    alphas: &[f64],
    rng: &mut dyn RngCore,
) -> Result<TemperedEnsemble<f64>> {
    let p = &inst.problem;
    let (wp, transform) = whiten_problem(p)?;
    let thin = thin.max(1);
    let prior = p.sample_prior_matrix(n, rng);
    let mut out = TemperedEnsemble {
        alphas: vec![0.0],
        evaluations: vec![p.evaluate_batch(&prior, rng)?],
        ensembles: vec![prior],
    };
    let mut start = Vector::zeros(p.input_dim());
    for &alpha in alphas {
        let opts = RwmOptions {
            n_samples: n * thin,
            ..rwm.clone()
        };
        let chain = rwm_sample_with(
            |x: &Vector, r: &mut dyn RngCore| Ok(-0.5 * x.norm_squared() + alpha * wp.log_likelihood(x, r)?),
            &start,
            &opts,
            rng,
        )?;
        let xw = chain.thinned_columns(thin).columns(0, n).into_owned();
        start = chain.mean();
        let xs = transform.unwhiten_inputs(&xw);
        out.evaluations.push(p.evaluate_batch(&xs, rng)?);
        out.ensembles.push(xs);
        out.alphas.push(alpha);
    }
    Ok(out)
}
