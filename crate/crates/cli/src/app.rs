//! Command-line front end.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use crate::ces::{run_ces, save};
use crate::compare::{compare_optimizers, to_csv};
use crate::config::{load, CesRunConfig, CompareConfig, ExperimentConfig, Metric, Sweep};
use crate::experiment::{run_experiment, RunEnv};
use crate::instance::Instance;
use crate::plots_data::parse_sweep_csv;
use crate::reference;

#[derive(Debug, Parser)]
#[command(name = "alis", version, about = "Likelihood-informed subspace experiments")]
pub struct Cli {
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output file (directory for `ces`); stdout when neither this nor the
    /// configuration names one.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Reference-chain cache.
    #[arg(long, global = true, default_value = ".alis-cache")]
    pub cache_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Runs a sweep and writes one CSV row per sweep point.
    Run { config: PathBuf },
    /// Compares the Grassmann, incremental and SCF output optimizers.
    CompareOptimizers { config: PathBuf },
    /// Runs the calibrate-emulate-sample pipeline.
    Ces { config: PathBuf },
    /// Manages cached reference chains.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// Validates a sweep CSV and summarizes it.
    CheckCsv { file: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum CacheAction {
    /// Builds the reference chains a run configuration needs.
    Build { config: PathBuf },
    /// Lists cached chains.
    List,
    /// Deletes every cached chain.
    Clear,
}

/// Runs the parsed command; the result is the process exit code, nonzero
/// when any sweep point failed.
pub fn execute(cli: Cli) -> Result<i32> {
    let env = RunEnv {
        jobs: cli.jobs,
        cache_dir: cli.cache_dir.clone(),
    };
    match &cli.command {
        Command::Run { config } => {
            let mut cfg: ExperimentConfig = load(config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let out = cli.out.clone().or_else(|| cfg.output.clone());
            let report = run_experiment(&cfg, &env)?;
            emit(out.as_deref(), &report.to_csv())?;
            if !report.failures.is_empty() {
                let log = report.error_log();
                match &out {
                    Some(path) => write(&path.with_extension("errors.log"), &log)?,
                    None => eprint!("{log}"),
                }
                return Ok(1);
            }
            Ok(0)
        }
        Command::CompareOptimizers { config } => {
            let mut cfg: CompareConfig = load(config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let out = cli.out.clone().or_else(|| cfg.output.clone());
            let rows = env.install(|| compare_optimizers(&cfg))??;
            emit(out.as_deref(), &to_csv(&rows))?;
            Ok(0)
        }
        Command::Ces { config } => {
            let mut cfg: CesRunConfig = load(config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let outcome = env.install(|| run_ces(&cfg))??;
            match cli.out.clone().or_else(|| cfg.output.clone()) {
                Some(dir) => save(&outcome, &dir)?,
                None => print!("{}", outcome.summary_csv),
            }
            Ok(0)
        }
        Command::Cache { action } => cache(action, &env),
        Command::CheckCsv { file } => {
            let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
            let t = parse_sweep_csv(&text).with_context(|| format!("checking {}", file.display()))?;
            println!(
                "{} rows over {}, methods {}, {} failed cells",
                t.x.len(),
                t.sweep_column,
                t.methods.join(" "),
                t.failed_cells()
            );
            Ok(i32::from(t.failed_cells() > 0))
        }
    }
}

fn cache(action: &CacheAction, env: &RunEnv) -> Result<i32> {
    match action {
        CacheAction::Build { config } => {
            let cfg: ExperimentConfig = load(config)?;
            cfg.validate()?;
            if cfg.metric != Metric::Hellinger || cfg.problem.is_linear() {
                println!("configuration needs no reference chain");
                return Ok(0);
            }
            let specs = match &cfg.sweep {
                Sweep::Gamma0 { values, .. } => values.iter().map(|&g| cfg.problem.with_gamma0(g)).collect::<Result<Vec<_>>>()?,
                _ => vec![cfg.problem.clone()],
            };
            let dir = cfg.reference.cache_dir.clone().unwrap_or_else(|| env.cache_dir.clone());
            for spec in specs {
                let inst = Instance::new(&spec)?;
                let r = env.install(|| reference::load_or_build(&inst, &cfg.reference, &dir))??;
                println!("{} {} samples, acceptance {:.3}", r.meta.key, r.meta.kept, r.meta.acceptance_rate);
            }
            Ok(0)
        }
        CacheAction::List => {
            for m in reference::list(&env.cache_dir)? {
                println!(
                    "{} {} samples (chain {}, thin {}), acceptance {:.3}",
                    m.key,
                    m.kept,
                    m.n_samples,
                    m.thin,
                    m.acceptance_rate
                );
            }
            Ok(0)
        }
        CacheAction::Clear => {
            let n = reference::clear(&env.cache_dir)?;
            println!("removed {n} files from {}", env.cache_dir.display());
            Ok(0)
        }
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
