//! JSON experiment configurations.

use std::path::{Path, PathBuf};

use alis::emulator::CesConfig;
use alis::output_opt::ScfOptions;
use alis::problems::{DarcySpec, LinearProblemSpec, LorenzSpec};
use alis::reduction::GradientMode;
use alis::samplers::{EkiSchedule, RwmOptions};
use alis::subspace::{ReductionMethod, SubspaceOptions};
use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Benchmark problem behind an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    Linear(LinearProblemSpec),
    Linexp(LinearProblemSpec),
    Darcy(DarcySpec),
    Lorenz(LorenzSpec),
}

impl ProblemSpec {
    pub fn is_linear(&self) -> bool {
        matches!(self, ProblemSpec::Linear(_))
    }

    /// Same problem with prior scale `gamma0`; only the linear families have one.
    pub fn with_gamma0(&self, gamma0: f64) -> Result<Self> {
        Ok(match self {
            ProblemSpec::Linear(s) => ProblemSpec::Linear(LinearProblemSpec { gamma0_scale: gamma0, ..s.clone() }),
            ProblemSpec::Linexp(s) => ProblemSpec::Linexp(LinearProblemSpec { gamma0_scale: gamma0, ..s.clone() }),
            _ => bail!("only linear and linexp problems have a prior scale to sweep"),
        })
    }
}

/// Where the tempered samples behind the diagnostics come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleSource {
    /// Independent draws of the exact tempered posteriors (linear problems).
    Exact { n_per_alpha: usize },
    /// Stochastic EKI stopped at every temperature.
    Eki {
        ensemble_size: usize,
        #[serde(default)]
        schedule: EkiSchedule,
    },
    /// One random-walk chain per temperature in whitened coordinates.
    Mcmc {
        n_per_alpha: usize,
        #[serde(default = "default_thin")]
        thin: usize,
        #[serde(default)]
        rwm: RwmOptions,
    },
}

impl SampleSource {
    pub fn size(&self) -> usize {
        match self {
            SampleSource::Exact { n_per_alpha } | SampleSource::Mcmc { n_per_alpha, .. } => *n_per_alpha,
            SampleSource::Eki { ensemble_size, .. } => *ensemble_size,
        }
    }

    pub fn with_size(&self, n: usize) -> Self {
        let mut out = self.clone();
        match &mut out {
            SampleSource::Exact { n_per_alpha } | SampleSource::Mcmc { n_per_alpha, .. } => *n_per_alpha = n,
            SampleSource::Eki { ensemble_size, .. } => *ensemble_size = n,
        }
        out
    }
}

fn default_thin() -> usize {
    10
}

fn default_alphas() -> Vec<f64> {
    (1..=10).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub source: SampleSource,
    /// Positive temperatures to record; the prior and every temperature a
    /// method needs are added automatically.
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
}

/// Swept quantity, one CSV row per value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variable", rename_all = "snake_case")]
pub enum Sweep {
    /// `r = s`
    Rank { values: Vec<usize> },
    /// Input rank; the output is kept whole unless `s` is set.
    InputRank {
        values: Vec<usize>,
        #[serde(default)]
        s: Option<usize>,
    },
    /// Output rank; the input is kept whole unless `r` is set.
    OutputRank {
        values: Vec<usize>,
        #[serde(default)]
        r: Option<usize>,
    },
    /// Temperature of every single-temperature method.
    Alpha { values: Vec<f64>, r: usize, s: usize },
    /// Samples per temperature (or EKI ensemble size).
    EnsembleSize { values: Vec<usize>, r: usize, s: usize },
    /// Prior scale of the linear families.
    Gamma0 { values: Vec<f64>, r: usize, s: usize },
}

impl Sweep {
    pub fn len(&self) -> usize {
        match self {
            Sweep::Rank { values } | Sweep::InputRank { values, .. } | Sweep::OutputRank { values, .. } => values.len(),
            Sweep::EnsembleSize { values, .. } => values.len(),
            Sweep::Alpha { values, .. } | Sweep::Gamma0 { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First CSV column name.
    pub fn column(&self) -> &'static str {
        match self {
            Sweep::Rank { .. } | Sweep::InputRank { .. } | Sweep::OutputRank { .. } => "dim",
            Sweep::Alpha { .. } => "alpha",
            Sweep::EnsembleSize { .. } => "ensemble_size",
            Sweep::Gamma0 { .. } => "gamma0",
        }
    }

    /// Sweep value as printed in the first CSV column.
    pub fn label(&self, i: usize) -> String {
        match self {
            Sweep::Rank { values } | Sweep::InputRank { values, .. } | Sweep::OutputRank { values, .. } => {
                values[i].to_string()
            }
            Sweep::EnsembleSize { values, .. } => values[i].to_string(),
            Sweep::Alpha { values, .. } | Sweep::Gamma0 { values, .. } => values[i].to_string(),
        }
    }

    /// `(r, s)` at point `i`, with `None` meaning the full dimension.
    pub fn ranks(&self, i: usize) -> (Option<usize>, Option<usize>) {
        match self {
            Sweep::Rank { values } => (Some(values[i]), Some(values[i])),
            Sweep::InputRank { values, s } => (Some(values[i]), *s),
            Sweep::OutputRank { values, r } => (*r, Some(values[i])),
            Sweep::Alpha { r, s, .. } | Sweep::EnsembleSize { r, s, .. } | Sweep::Gamma0 { r, s, .. } => {
                (Some(*r), Some(*s))
            }
        }
    }

    /// Whether the tempered samples differ between sweep points.
    pub fn changes_samples(&self) -> bool {
        matches!(self, Sweep::EnsembleSize { .. } | Sweep::Gamma0 { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Squared Wasserstein-2 distance to the exact posterior (linear problems).
    W2,
    /// Squared Hellinger distance: closed form for linear problems, importance
    /// sampling against a cached reference chain otherwise.
    Hellinger,
    /// Distance from the true parameter to the emulated posterior mean.
    ParamError,
}

/// Full-space reference chain for the importance-sampled Hellinger distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceOptions {
    pub n_samples: usize,
    pub thin: usize,
    pub n_burn: Option<usize>,
    /// Ensemble size of the EKI run whose mean starts the chain.
    pub pilot_ensemble: usize,
    /// Overrides the command-line cache directory.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        Self {
            n_samples: 200_000,
            thin: 10,
            n_burn: None,
            pilot_ensemble: 100,
            cache_dir: None,
        }
    }
}

/// Configuration of `alis run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub problem: ProblemSpec,
    pub methods: Vec<ReductionMethod>,
    #[serde(default)]
    pub gradient: GradientMode,
    pub sampling: SamplingConfig,
    /// The gradient mode above takes precedence over the one in here.
    #[serde(default)]
    pub subspace: SubspaceOptions,
    pub sweep: Sweep,
    pub metric: Metric,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub reference: ReferenceOptions,
    /// Reference draws used per importance-sampling estimate (all by default).
    #[serde(default)]
    pub snis_samples: Option<usize>,
    /// Pipeline settings for the parameter-error metric; the methods, ranks
    /// and sweep override the corresponding fields.
    #[serde(default)]
    pub ces: CesConfig,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_replicates() -> usize {
    1
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            bail!("no reduction methods");
        }
        if self.sweep.is_empty() {
            bail!("empty sweep grid");
        }
        if self.replicates == 0 {
            bail!("replicates must be at least 1");
        }
        check_methods(&self.methods)?;
        if self.sampling.alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            bail!("sampling temperatures must lie in (0, 1]");
        }
        if let Sweep::Alpha { values, .. } = &self.sweep {
            if values.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
                bail!("swept temperatures must lie in [0, 1]");
            }
        }
        if let Sweep::Gamma0 { values, .. } = &self.sweep {
            if values.iter().any(|&g| !(g > 0.0)) {
                bail!("swept prior scales must be positive");
            }
            self.problem.with_gamma0(1.0)?;
        }
        if self.sampling.source.size() == 0 {
            bail!("sample source needs at least one sample");
        }
        match self.metric {
            Metric::W2 if !self.problem.is_linear() => {
                bail!("the Wasserstein metric needs a linear problem")
            }
            Metric::ParamError if !matches!(self.sweep, Sweep::Rank { .. } | Sweep::EnsembleSize { .. }) => {
                bail!("the parameter error supports rank and ensemble-size sweeps")
            }
            _ => {}
        }
        if matches!(self.sampling.source, SampleSource::Exact { .. }) && !self.problem.is_linear() {
            bail!("exact tempered draws need a linear problem");
        }
        Ok(())
    }
}

fn check_methods(methods: &[ReductionMethod]) -> Result<()> {
    for m in methods {
        match *m {
            ReductionMethod::Pca => {}
            ReductionMethod::Lis { alpha } if (0.0..=1.0).contains(&alpha) => {}
            ReductionMethod::Accumulated { alpha_min, alpha_max }
                if 0.0 <= alpha_min && alpha_min <= alpha_max && alpha_max <= 1.0 => {}
            _ => bail!("method {} has temperatures outside [0, 1]", m.label()),
        }
    }
    Ok(())
}

/// Configuration of `alis compare-optimizers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub problem: ProblemSpec,
    /// Output objective; PCA has none.
    pub method: ReductionMethod,
    #[serde(default)]
    pub gradient: GradientMode,
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub subspace: SubspaceOptions,
    pub s_values: Vec<usize>,
    #[serde(default)]
    pub scf: ScfOptions,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s_values.is_empty() || self.s_values.contains(&0) {
            bail!("output ranks must be a non-empty list of positive integers");
        }
        if self.method == ReductionMethod::Pca {
            bail!("PCA has no output objective to optimize");
        }
        check_methods(std::slice::from_ref(&self.method))?;
        if self.sampling.alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            bail!("sampling temperatures must lie in (0, 1]");
        }
        if matches!(self.sampling.source, SampleSource::Exact { .. }) && !self.problem.is_linear() {
            bail!("exact tempered draws need a linear problem");
        }
        Ok(())
    }
}

/// Configuration of `alis ces`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CesRunConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub ces: CesConfig,
    #[serde(default)]
    pub seed: u64,
    /// Result directory.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

pub fn load<C: DeserializeOwned>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
