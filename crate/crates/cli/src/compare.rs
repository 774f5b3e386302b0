//! Side-by-side runs of the three output-subspace optimizers on one objective.

use alis::linalg::max_principal_angle;
use alis::output_opt::{optimize_full, optimize_incremental, optimize_nepv};
use alis::rng::{self, stream_id};
use alis::subspace::SampleContext;
use anyhow::Result;

use crate::config::CompareConfig;
use crate::experiment::format_value;
use crate::instance::{required_alphas, tempered_samples, Instance};

const TAG_SAMPLES: u64 = 11;
const TAG_SCF: u64 = 12;

/// Objective values, iteration counts and agreement per output rank.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub s: usize,
    pub j_full: f64,
    pub j_incremental: f64,
    pub j_nepv: f64,
    pub iters_full: usize,
    /// Summed over the stages of the nested prefix.
    pub iters_incremental: usize,
    pub iters_nepv: usize,
    /// Stages of the prefix that fell back to sphere descent.
    pub fallbacks_nepv: usize,
    pub full_converged: bool,
    pub incremental_converged: bool,
    pub angle_full_incremental: f64,
    pub angle_nepv_incremental: f64,
}

pub const COMPARE_HEADER: &str = "s,j_full,j_incremental,j_nepv,iters_full,iters_incremental,iters_nepv,\
fallbacks_nepv,full_converged,incremental_converged,angle_full_incremental,angle_nepv_incremental";

pub fn to_csv(rows: &[CompareRow]) -> String {
    let mut out = format!("{COMPARE_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.s,
            format_value(r.j_full),
            format_value(r.j_incremental),
            format_value(r.j_nepv),
            r.iters_full,
            r.iters_incremental,
            r.iters_nepv,
            r.fallbacks_nepv,
            u8::from(r.full_converged),
            u8::from(r.incremental_converged),
            format_value(r.angle_full_incremental),
            format_value(r.angle_nepv_incremental),
        ));
    }
    out
}

/// Runs incremental and SCF once up to the largest rank and the Grassmann
/// descent at every rank, started from the incremental prefix so that it can
/// only improve on it.
pub fn compare_optimizers(cfg: &CompareConfig) -> Result<Vec<CompareRow>> {
    cfg.validate()?;
    let inst = Instance::new(&cfg.problem)?;
    let mut r = rng::stream(cfg.seed, stream_id(&[TAG_SAMPLES]));
    let alphas = required_alphas(&cfg.sampling.alphas, std::slice::from_ref(&cfg.method), None);
    let samples = tempered_samples(&inst, &cfg.sampling.source, &alphas, &mut r)?;
    let mut opts = cfg.subspace.clone();
    opts.gradient = cfg.gradient;
    let optimizer = opts.optimizer;
    let ctx = SampleContext::new(&inst.problem, &samples, opts, &mut r)?;
    let objective = ctx.objective_context(&cfg.method)?;
    let s_max = *cfg.s_values.iter().max().expect("validated non-empty");
    let inc = optimize_incremental(&objective, s_max, &optimizer)?;
    let nepv = optimize_nepv(&objective, s_max, &cfg.scf, &mut rng::stream(cfg.seed, stream_id(&[TAG_SCF])))?;
    cfg.s_values
        .iter()
        .map(|&s| {
            let v_inc = inc.prefix(s);
            let full = optimize_full(&objective, s, Some(&v_inc), &optimizer)?;
            Ok(CompareRow {
                s,
                j_full: full.j,
                j_incremental: inc.stage_j[s - 1],
                j_nepv: nepv.stage_j[s - 1],
                iters_full: full.iterations,
                iters_incremental: inc.stage_iterations[..s].iter().sum(),
                iters_nepv: nepv.iterations[..s].iter().sum(),
                fallbacks_nepv: nepv.converged[..s].iter().filter(|c| !**c).count(),
                full_converged: full.status.is_stationary(),
                incremental_converged: inc.stage_status[..s].iter().all(|st| st.is_stationary()),
                angle_full_incremental: max_principal_angle(&full.v, &v_inc),
                angle_nepv_incremental: max_principal_angle(&nepv.prefix(s), &v_inc),
            })
        })
        .collect()
}
