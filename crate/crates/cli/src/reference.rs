//! Full-space reference chains, cached on disk under a hash of everything
//! that determines them.

use std::fs;
use std::path::{Path, PathBuf};

use alis::bip::whiten_problem;
use alis::io::{read_matrix_bin, write_matrix_bin};
use alis::linalg::column_mean;
use alis::rng;
use alis::samplers::{run_tempered_eki, rwm_sample_with, EkiSchedule, RwmOptions};
use alis::{Matrix, Vector};
use anyhow::{Context, Result};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ProblemSpec, ReferenceOptions};
use crate::instance::Instance;

/// Bumped whenever the chain construction changes.
const FORMAT: u32 = 1;

/// Thinned draws of the whitened posterior and their whitened evaluations.
#[derive(Debug, Clone)]
pub struct Reference {
    pub samples: Matrix,
    pub evaluations: Matrix,
    pub meta: ReferenceMeta,
}

/// Contents of `<key>.json` next to the matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMeta {
    pub key: String,
    pub problem: ProblemSpec,
    pub n_samples: usize,
    pub thin: usize,
    pub n_burn: usize,
    pub pilot_ensemble: usize,
    pub acceptance_rate: f64,
    pub kept: usize,
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    format: u32,
    problem: &'a ProblemSpec,
    n_samples: usize,
    thin: usize,
    n_burn: usize,
    pilot_ensemble: usize,
}

/// Hex SHA-256 of the problem and chain settings; the cache directory is
/// not part of it.
pub fn cache_key(problem: &ProblemSpec, opts: &ReferenceOptions) -> String {
    let material = KeyMaterial {
        format: FORMAT,
        problem,
        n_samples: opts.n_samples,
        thin: opts.thin.max(1),
        n_burn: burn(opts),
        pilot_ensemble: opts.pilot_ensemble,
    };
    let json = serde_json::to_vec(&material).expect("key material serializes");
    hex::encode(Sha256::digest(json))
}

fn burn(opts: &ReferenceOptions) -> usize {
    opts.n_burn.unwrap_or(opts.n_samples / 5)
}

fn paths(dir: &Path, key: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{key}.samples.bin")),
        dir.join(format!("{key}.evals.bin")),
        dir.join(format!("{key}.json")),
    )
}

/// Cached chain for `inst`, built and stored on a miss.
pub fn load_or_build(inst: &Instance, opts: &ReferenceOptions, dir: &Path) -> Result<Reference> {
    let key = cache_key(&inst.spec, opts);
    if let Some(r) = load(dir, &key)? {
        log::info!("reference chain {key} loaded from cache");
        return Ok(r);
    }
    log::info!("building reference chain {key}");
    let r = build(inst, opts, &key)?;
    store(dir, &r)?;
    Ok(r)
}

pub fn load(dir: &Path, key: &str) -> Result<Option<Reference>> {
    let (s, e, m) = paths(dir, key);
    if !(s.exists() && e.exists() && m.exists()) {
        return Ok(None);
    }
    let meta: ReferenceMeta = serde_json::from_str(&fs::read_to_string(&m)?)
        .with_context(|| format!("parsing {}", m.display()))?;
    Ok(Some(Reference {
        samples: read_matrix_bin(&s)?,
        evaluations: read_matrix_bin(&e)?,
        meta,
    }))
}

fn store(dir: &Path, r: &Reference) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let (s, e, m) = paths(dir, &r.meta.key);
    write_matrix_bin(&s, &r.samples)?;
    write_matrix_bin(&e, &r.evaluations)?;
    // Metadata last: its presence marks a complete entry.
    fs::write(&m, serde_json::to_string_pretty(&r.meta)?)?;
    Ok(())
}

/// Random-walk chain on the whitened posterior, started at the mean of a
/// short EKI run; every random draw is seeded from the key.
pub fn build(inst: &Instance, opts: &ReferenceOptions, key: &str) -> Result<Reference> {
    let seed = u64::from_str_radix(&key[..16], 16).context("malformed cache key")?;
    let (wp, _) = whiten_problem(&inst.problem)?;
    let start = if opts.pilot_ensemble >= 3 {
        let pilot = run_tempered_eki(&wp, opts.pilot_ensemble, &[1.0], EkiSchedule::Uniform(10), &mut rng::stream(seed, 1))?;
        column_mean(pilot.ensembles.last().expect("final stage"))
    } else {
        Vector::zeros(wp.input_dim())
    };
    let rwm = RwmOptions {
        n_samples: opts.n_samples,
        n_burn: Some(burn(opts)),
        ..RwmOptions::default()
    };
    let mut r = rng::stream(seed, 2);
    let chain = rwm_sample_with(
        |x: &Vector, rr: &mut dyn RngCore| Ok(-0.5 * x.norm_squared() + wp.log_likelihood(x, rr)?),
        &start,
        &rwm,
        &mut r,
    )?;
    let samples = chain.thinned_columns(opts.thin.max(1));
    let evaluations = wp.evaluate_batch_clean(&samples, &mut r)?;
    Ok(Reference {
        meta: ReferenceMeta {
            key: key.to_string(),
            problem: inst.spec.clone(),
            n_samples: opts.n_samples,
            thin: opts.thin.max(1),
            n_burn: burn(opts),
            pilot_ensemble: opts.pilot_ensemble,
            acceptance_rate: chain.acceptance_rate,
            kept: samples.ncols(),
        },
        samples,
        evaluations,
    })
}

/// Metadata of every complete cache entry, sorted by key.
pub fn list(dir: &Path) -> Result<Vec<ReferenceMeta>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let meta: ReferenceMeta = serde_json::from_str(&fs::read_to_string(&path)?)
                .with_context(|| format!("parsing {}", path.display()))?;
            out.push(meta);
        }
    }
    out.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(out)
}

/// Removes every cache file; returns how many were deleted.
pub fn clear(dir: &Path) -> Result<usize> {
    let mut n = 0;
    if !dir.exists() {
        return Ok(0);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
        if name.ends_with(".samples.bin") || name.ends_with(".evals.bin") || name.ends_with(".json") {
            fs::remove_file(&path)?;
            n += 1;
        }
    }
    Ok(n)
}
