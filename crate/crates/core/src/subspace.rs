//! Reduced spaces from tempered sample sets, shared by the experiment drivers
//! and the emulation pipeline.

use nalgebra::DMatrix;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::bip::{unwhiten_basis, whiten_problem, InverseProblem, ReducedSpace, WhitenTransform};
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::output_opt::{optimize_incremental, output_basis_alpha0, ObjectiveContext, OptOptions};
use crate::reduction::{
    accumulate_h, default_nugget, estimate_h_alpha, input_basis, output_covariance, pca_basis,
    quadrature_weights, statistical_linearization, DiagnosticMatrix, GradientMode, GradientProvider,
    QuadratureWeights,
};
use crate::samplers::TemperedEnsemble;
use crate::Scalar;

/// How a basis is chosen on one side of the problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReductionMethod {
    /// Leading prior principal components.
    Pca,
    /// Likelihood-informed subspace at one temperature.
    Lis { alpha: f64 },
    /// Diagnostic averaged over the recorded temperatures in `[alpha_min, alpha_max]`.
    Accumulated { alpha_min: f64, alpha_max: f64 },
}

impl ReductionMethod {
    /// Short column label, e.g. `pca`, `lis_0.5`, `acc_0_1`.
    pub fn label(&self) -> String {
        match self {
            ReductionMethod::Pca => "pca".into(),
            ReductionMethod::Lis { alpha } => format!("lis_{alpha}"),
            ReductionMethod::Accumulated { alpha_min, alpha_max } => format!("acc_{alpha_min}_{alpha_max}"),
        }
    }
}

/// Options for [`build_space`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubspaceOptions {
    pub gradient: GradientMode,
    /// Ridge for statistical linearization; `None` picks [`default_nugget`].
    pub nugget: Option<f64>,
    /// Linearize at each temperature from every member recorded up to it.
    pub pooled_linearization: bool,
    /// Members per temperature used for the diagnostics (random subset).
    pub subsample: Option<usize>,
    pub quadrature: QuadratureWeights,
    pub optimizer: OptOptions,
    /// Diagnostic residuals from noise-free re-evaluations of the members
    /// rather than the evaluations recorded by the sampler. The linearization
    /// always uses the recorded ones.
    pub clean_residuals: bool,
}

impl Default for SubspaceOptions {
    fn default() -> Self {
        Self {
            gradient: GradientMode::StatisticalLinearization,
            nugget: None,
            pooled_linearization: false,
            subsample: None,
            quadrature: QuadratureWeights::Equal,
            optimizer: OptOptions::default(),
            clean_residuals: false,
        }
    }
}

/// Bases for the same reduced variables in whitened and original coordinates.
#[derive(Debug, Clone)]
pub struct SpacePair<T: Scalar> {
    pub whitened: ReducedSpace<T>,
    pub original: ReducedSpace<T>,
}

/// Tempered samples of one problem, whitened once and reused for every method.
pub struct SampleContext<'a, T: Scalar> {
    pub problem: &'a InverseProblem<T>,
    pub whitened: InverseProblem<T>,
    pub transform: WhitenTransform<T>,
    /// Temperatures with whitened members and whitened evaluations.
    stages: Vec<Stage<T>>,
    /// Prior-stage evaluations in original coordinates, for output PCA.
    prior_evaluations: Option<DMatrix<T>>,
    opts: SubspaceOptions,
}

struct Stage<T: Scalar> {
    alpha: T,
    xs: DMatrix<T>,
    gs: DMatrix<T>,
    grads: GradientProvider<T>,
}

impl<'a, T: Scalar> SampleContext<'a, T> {
    /// `samples` holds members and evaluations in original coordinates.
    pub fn new(
        problem: &'a InverseProblem<T>,
        samples: &TemperedEnsemble<T>,
        opts: SubspaceOptions,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let (whitened, transform) = whiten_problem(problem)?;
        let mut stages = Vec::with_capacity(samples.alphas.len());
        let mut pooled_x: Option<DMatrix<T>> = None;
        let mut pooled_g: Option<DMatrix<T>> = None;
        for ((&alpha, xs), gs) in samples.alphas.iter().zip(&samples.ensembles).zip(&samples.evaluations) {
            check_dim("sample dimension", problem.input_dim(), xs.nrows())?;
            check_dim("evaluation dimension", problem.output_dim(), gs.nrows())?;
            let xw = transform.whiten_inputs(xs);
            let gw = transform.whiten_outputs(gs);
            let (xw, gw) = match opts.subsample {
                Some(k) if k < xw.ncols() => {
                    let idx = rand::seq::index::sample(rng, xw.ncols(), k).into_vec();
                    (xw.select_columns(&idx), gw.select_columns(&idx))
                }
                _ => (xw, gw),
            };
            if opts.pooled_linearization {
                pooled_x = Some(match pooled_x {
                    Some(p) => hcat(&p, &xw),
                    None => xw.clone(),
                });
                pooled_g = Some(match pooled_g {
                    Some(p) => hcat(&p, &gw),
                    None => gw.clone(),
                });
            }
            let grads = match opts.gradient {
                GradientMode::Exact => GradientProvider::exact(&whitened, &xw)?,
                GradientMode::StatisticalLinearization => {
                    let (lx, lg) = match (&pooled_x, &pooled_g) {
                        (Some(px), Some(pg)) => (px, pg),
                        _ => (&xw, &gw),
                    };
                    let nugget = match opts.nugget {
                        Some(n) => T::of(n),
                        None => default_nugget(&whitened, lx.ncols()),
                    };
                    GradientProvider::Shared(statistical_linearization(lx, lg, nugget)?)
                }
            };
            let gs = if opts.clean_residuals {
                whitened.evaluate_batch_clean(&xw, rng)?
            } else {
                gw
            };
            stages.push(Stage { alpha, xs: xw, gs, grads });
        }
        if stages.is_empty() {
            return Err(Error::invalid("no tempered samples"));
        }
        let prior_evaluations = samples
            .position(T::zero())
            .map(|i| samples.evaluations[i].clone());
        Ok(Self {
            problem,
            whitened,
            transform,
            stages,
            prior_evaluations,
            opts,
        })
    }

    pub fn alphas(&self) -> Vec<T> {
        self.stages.iter().map(|s| s.alpha).collect()
    }

    fn stage(&self, alpha: f64) -> Result<&Stage<T>> {
        self.stages
            .iter()
            .find(|s| (s.alpha.as_f64() - alpha).abs() < 1e-9)
            .ok_or_else(|| Error::invalid(format!("no samples recorded at temperature {alpha}")))
    }

    fn stages_in(&self, lo: f64, hi: f64) -> Result<Vec<&Stage<T>>> {
        let sel: Vec<&Stage<T>> = self
            .stages
            .iter()
            .filter(|s| s.alpha.as_f64() >= lo - 1e-9 && s.alpha.as_f64() <= hi + 1e-9)
            .collect();
        if sel.is_empty() {
            return Err(Error::invalid(format!("no samples recorded in [{lo}, {hi}]")));
        }
        Ok(sel)
    }

    fn diagnostic(&self, stage: &Stage<T>) -> Result<DiagnosticMatrix<T>> {
        estimate_h_alpha(&stage.xs, &stage.gs, &stage.grads, &self.whitened, stage.alpha)
    }

    fn context(&self, stage: &Stage<T>) -> Result<ObjectiveContext<T>> {
        ObjectiveContext::new(
            &stage.grads,
            &stage.gs,
            self.whitened.y_dagger(),
            self.whitened.gamma(),
            stage.alpha,
        )
    }

    fn weights(&self, stages: &[&Stage<T>]) -> Result<Vec<f64>> {
        quadrature_weights(
            &stages.iter().map(|s| s.alpha.as_f64()).collect::<Vec<_>>(),
            &self.opts.quadrature,
        )
    }

    /// Diagnostic matrix behind an input method (none for PCA).
    pub fn input_diagnostic(&self, method: &ReductionMethod) -> Result<Option<DiagnosticMatrix<T>>> {
        match *method {
            ReductionMethod::Pca => Ok(None),
            ReductionMethod::Lis { alpha } => self.diagnostic(self.stage(alpha)?).map(Some),
            ReductionMethod::Accumulated { alpha_min, alpha_max } => {
                let stages = self.stages_in(alpha_min, alpha_max)?;
                let pairs = stages
                    .iter()
                    .map(|s| Ok((s.alpha, self.diagnostic(s)?)))
                    .collect::<Result<Vec<_>>>()?;
                let w = self.weights(&stages)?;
                accumulate_h(&pairs, &QuadratureWeights::Custom(w)).map(Some)
            }
        }
    }

    /// Whitened input basis of rank `r`.
    pub fn input_basis(&self, method: &ReductionMethod, r: usize) -> Result<DMatrix<T>> {
        let dx = self.problem.input_dim();
        if r > dx {
            return Err(Error::invalid(format!("requested {r} input directions in dimension {dx}")));
        }
        if r == dx {
            return Ok(DMatrix::identity(dx, dx));
        }
        match method {
            ReductionMethod::Pca => {
                let u = pca_basis(self.problem.gamma0(), r)?;
                unwhiten_basis(&u, &self.transform.input_inv)
            }
            _ => input_basis(&self.input_diagnostic(method)?.expect("diagnostic methods"), r),
        }
    }

    /// Whitened output basis of rank `s`.
    pub fn output_basis(&self, method: &ReductionMethod, s: usize) -> Result<DMatrix<T>> {
        let dy = self.problem.output_dim();
        if s > dy {
            return Err(Error::invalid(format!("requested {s} output directions in dimension {dy}")));
        }
        if s == dy {
            return Ok(DMatrix::identity(dy, dy));
        }
        match *method {
            ReductionMethod::Pca => {
                let gs = self
                    .prior_evaluations
                    .as_ref()
                    .ok_or_else(|| Error::invalid("output PCA needs samples at temperature 0"))?;
                let v = pca_basis(&output_covariance(gs, self.problem.gamma()), s)?;
                unwhiten_basis(&v, &self.transform.output_inv)
            }
            ReductionMethod::Lis { alpha } if alpha == 0.0 => {
                output_basis_alpha0(&self.objective_context(method)?, s)
            }
            _ => Ok(optimize_incremental(&self.objective_context(method)?, s, &self.opts.optimizer)?.v),
        }
    }

    /// Whitened output objective behind a diagnostic method; accumulated
    /// methods combine the per-temperature objectives with quadrature weights.
    pub fn objective_context(&self, method: &ReductionMethod) -> Result<ObjectiveContext<T>> {
        match *method {
            ReductionMethod::Pca => Err(Error::invalid("PCA has no output objective")),
            ReductionMethod::Lis { alpha } => self.context(self.stage(alpha)?),
            ReductionMethod::Accumulated { alpha_min, alpha_max } => {
                let stages = self.stages_in(alpha_min, alpha_max)?;
                let contexts = stages.iter().map(|st| self.context(st)).collect::<Result<Vec<_>>>()?;
                let w: Vec<T> = self.weights(&stages)?.into_iter().map(T::of).collect();
                ObjectiveContext::accumulate(&contexts, &w)
            }
        }
    }

    /// Reduced space from an input and an output method.
    pub fn build(
        &self,
        input: &ReductionMethod,
        output: &ReductionMethod,
        r: usize,
        s: usize,
    ) -> Result<SpacePair<T>> {
        let u = self.input_basis(input, r)?;
        let v = self.output_basis(output, s)?;
        self.pair(u, v)
    }

    /// Whitened bases and their original-coordinate counterparts.
    pub fn pair(&self, u_bar: DMatrix<T>, v_bar: DMatrix<T>) -> Result<SpacePair<T>> {
        let u = unwhiten_basis(&u_bar, &self.transform.input_fwd)?;
        let v = unwhiten_basis(&v_bar, &self.transform.output_fwd)?;
        Ok(SpacePair {
            whitened: ReducedSpace::new(u_bar, v_bar, true)?,
            original: ReducedSpace::new(u, v, false)?,
        })
    }
}

fn hcat<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Reduced space for one method applied to both sides.
pub fn build_space<T: Scalar>(
    problem: &InverseProblem<T>,
    samples: &TemperedEnsemble<T>,
    method: &ReductionMethod,
    r: usize,
    s: usize,
    opts: SubspaceOptions,
    rng: &mut dyn RngCore,
) -> Result<SpacePair<T>> {
    SampleContext::new(problem, samples, opts, rng)?.build(method, method, r, s)
}

/// Largest principal angle between the column spaces of two spaces' inputs.
pub fn input_angle<T: Scalar>(a: &ReducedSpace<T>, b: &ReducedSpace<T>) -> T {
    linalg::max_principal_angle(&a.u_r, &b.u_r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{linear_reduced_posterior, linear_tempered_posterior, make_linear_problem, LinearProblemSpec};
    use crate::reduction::df_lis_matrix;
    use crate::rng;
    use crate::metrics::w2_gaussian_sq;
    use crate::problems::linear_posterior;

    fn exact_samples(lp: &crate::problems::LinearProblem<f64>, alphas: &[f64], n: usize, seed: u64) -> TemperedEnsemble<f64> {
        let mut r = rng::stream(seed, 0);
        let mut ens = TemperedEnsemble {
            alphas: vec![],
            ensembles: vec![],
            evaluations: vec![],
        };
        for &a in alphas {
            let post = linear_tempered_posterior(&lp.problem, &lp.a, a).unwrap();
            let xs = post.sample(n, &mut r);
            ens.alphas.push(a);
            ens.evaluations.push(&lp.a * &xs);
            ens.ensembles.push(xs);
        }
        ens
    }

    #[test]
    fn full_rank_spaces_are_exact() {
        let lp = make_linear_problem::<f64>(&LinearProblemSpec::new(10, 10, 3)).unwrap();
        let ens = exact_samples(&lp, &[0.0, 0.5, 1.0], 50, 1);
        let opts = SubspaceOptions {
            gradient: GradientMode::Exact,
            ..Default::default()
        };
        let ctx = SampleContext::new(&lp.problem, &ens, opts, &mut rng::stream(0, 0)).unwrap();
        let full = linear_posterior(&lp.problem, &lp.a).unwrap();
        for m in [
            ReductionMethod::Pca,
            ReductionMethod::Lis { alpha: 0.5 },
            ReductionMethod::Accumulated { alpha_min: 0.0, alpha_max: 1.0 },
        ] {
            let pair = ctx.build(&m, &m, 10, 10).unwrap();
            let red = linear_reduced_posterior(&lp.problem, &lp.a, &pair.original).unwrap();
            assert!(w2_gaussian_sq(&full, &red).unwrap() < 1e-8, "{}", m.label());
        }
    }

    #[test]
    fn prior_diagnostic_matches_direct_formula() {
        let lp = make_linear_problem::<f64>(&LinearProblemSpec::new(6, 4, 2)).unwrap();
        let ens = exact_samples(&lp, &[0.0], 30, 2);
        let opts = SubspaceOptions {
            gradient: GradientMode::Exact,
            ..Default::default()
        };
        let ctx = SampleContext::new(&lp.problem, &ens, opts, &mut rng::stream(0, 0)).unwrap();
        let h = ctx.input_diagnostic(&ReductionMethod::Lis { alpha: 0.0 }).unwrap().unwrap();
        let grads = GradientProvider::exact(&ctx.whitened, &ctx.transform.whiten_inputs(&ens.ensembles[0])).unwrap();
        let direct = df_lis_matrix(&grads, ctx.whitened.gamma(), 30).unwrap();
        assert!((&h.h - &direct).amax() < 1e-12);
    }

    #[test]
    fn informed_spaces_beat_pca_on_linear_problem() {
        let lp = make_linear_problem::<f64>(&LinearProblemSpec::new(20, 20, 5)).unwrap();
        let ens = exact_samples(&lp, &[0.0, 0.5, 1.0], 200, 3);
        let opts = SubspaceOptions {
            gradient: GradientMode::Exact,
            ..Default::default()
        };
        let ctx = SampleContext::new(&lp.problem, &ens, opts, &mut rng::stream(0, 0)).unwrap();
        let full = linear_posterior(&lp.problem, &lp.a).unwrap();
        let err = |m: ReductionMethod| {
            let pair = ctx.build(&m, &m, 6, 6).unwrap();
            w2_gaussian_sq(&full, &linear_reduced_posterior(&lp.problem, &lp.a, &pair.original).unwrap()).unwrap()
        };
        let pca = err(ReductionMethod::Pca);
        let lis1 = err(ReductionMethod::Lis { alpha: 1.0 });
        assert!(lis1 < pca, "{lis1} vs {pca}");
    }

    #[test]
    fn subsampling_and_pooling_run() {
        let lp = make_linear_problem::<f64>(&LinearProblemSpec::new(8, 6, 1)).unwrap();
        let ens = exact_samples(&lp, &[0.0, 0.5, 1.0], 40, 4);
        let opts = SubspaceOptions {
            subsample: Some(15),
            pooled_linearization: true,
            ..Default::default()
        };
        let ctx = SampleContext::new(&lp.problem, &ens, opts, &mut rng::stream(0, 0)).unwrap();
        let m = ReductionMethod::Accumulated { alpha_min: 0.0, alpha_max: 1.0 };
        let pair = ctx.build(&m, &ReductionMethod::Lis { alpha: 0.0 }, 3, 2).unwrap();
        assert!(linalg::is_orthonormal(&pair.original.u_r, 1e-10));
        assert_eq!(pair.whitened.s(), 2);
        assert!(ctx.build(&ReductionMethod::Lis { alpha: 0.3 }, &m, 3, 2).is_err());
    }

    #[test]
    fn labels_are_distinct() {
        let labels = [
            ReductionMethod::Pca.label(),
            ReductionMethod::Lis { alpha: 0.5 }.label(),
            ReductionMethod::Accumulated { alpha_min: 0.0, alpha_max: 1.0 }.label(),
        ];
        assert_eq!(labels, ["pca", "lis_0.5", "acc_0_1"]);
    }

    #[test]
    fn clean_residuals_replace_recorded_evaluations() {
        let lp = make_linear_problem::<f64>(&LinearProblemSpec::new(5, 4, 2)).unwrap();
        let mut ens = exact_samples(&lp, &[0.0, 1.0], 20, 3);
        let mut r = rng::stream(4, 0);
        for g in &mut ens.evaluations {
            *g += rng::normal_matrix::<f64>(4, 20, &mut r);
        }
        let noisy = SubspaceOptions { gradient: GradientMode::Exact, ..Default::default() };
        let clean = SubspaceOptions { clean_residuals: true, ..noisy.clone() };
        let a = SampleContext::new(&lp.problem, &ens, noisy, &mut rng::stream(0, 0)).unwrap();
        let b = SampleContext::new(&lp.problem, &ens, clean, &mut rng::stream(0, 0)).unwrap();
        for (sa, sb) in a.stages.iter().zip(&b.stages) {
            let exact = b.whitened.evaluate_batch_clean(&sb.xs, &mut r).unwrap();
            assert!((&sb.gs - &exact).amax() < 1e-10);
            assert!((&sa.gs - &exact).amax() > 1e-3);
        }
    }
}
