//! Convolutional dictionary learning by alternating minimization.
//!
//! Each outer iteration solves the sparse coding problem with the
//! distributed solver (warm-started from the previous code), reduces the
//! sufficient statistics over the same worker grid and takes a projected
//! gradient step on the dictionary. The run stops when the objective
//! changes by less than `nu * max(1, E)`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::csc::CscContext;
use crate::dict::{compute_sufficient_stats, pgd_update, LineSearchConfig};
use crate::error::{Error, Result};
use crate::grid::{make_grid, Partition};
use crate::par::Execution;
use crate::runtime::{run_dicodile_z_with, RunOptions, Scheduler};
use crate::tensor::{convolve, lambda_max, objective, ActivationMap, Dictionary, Domain, Signal};
use crate::tensor::io::SigArray;

/// How the first dictionary is drawn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Standard normal entries, atoms normalized.
    #[default]
    Gaussian,
    /// Random patches of the signal, normalized.
    Patches,
}

impl FromStr for InitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(InitMode::Gaussian),
            "patches" => Ok(InitMode::Patches),
            _ => Err(Error::Config(format!("unknown init mode {s:?} (expected gaussian or patches)"))),
        }
    }
}

fn default_lambda_frac() -> f64 {
    0.1
}
fn default_nu() -> f64 {
    1e-4
}
fn default_max_outer() -> usize {
    50
}
fn default_workers() -> usize {
    1
}

/// Settings of a learning run. Reads from a flat TOML table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdlConfig {
    /// Number of atoms `K`.
    pub atoms: usize,
    /// Atom support `L`, one size per signal axis.
    pub support: Vec<usize>,
    /// Absolute regularization. Takes precedence over `lambda_frac`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Regularization as a fraction of `lambda_max` at the initial
    /// dictionary.
    #[serde(default = "default_lambda_frac")]
    pub lambda_frac: f64,
    /// Sparse coding tolerance; the solver default when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    /// Relative stopping threshold on the objective change.
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default)]
    pub init: InitMode,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub partition: Partition,
    #[serde(default)]
    pub scheduler: Scheduler,
    #[serde(default)]
    pub seed: u64,
    /// Redraw atoms left unused by the sparse code from the worst
    /// reconstructed patch.
    #[serde(default)]
    pub resample_unused: bool,
    /// Writes a checkpoint after every outer iteration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(skip)]
    pub line_search: LineSearchConfig,
}

impl CdlConfig {
    pub fn new(atoms: usize, support: &[usize]) -> Self {
        CdlConfig {
            atoms,
            support: support.to_vec(),
            lambda: None,
            lambda_frac: default_lambda_frac(),
            eps: None,
            nu: default_nu(),
            max_outer: default_max_outer(),
            init: InitMode::default(),
            workers: default_workers(),
            partition: Partition::default(),
            scheduler: Scheduler::default(),
            seed: 0,
            resample_unused: false,
            checkpoint_dir: None,
            line_search: LineSearchConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: CdlConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.atoms == 0 {
            return Err(Error::Config("atoms must be > 0".into()));
        }
        if self.support.is_empty() || self.support.contains(&0) {
            return Err(Error::Config(format!("bad support {:?}", self.support)));
        }
        if !(self.lambda_frac > 0.0 && self.lambda_frac <= 1.0) {
            return Err(Error::Config(format!("lambda_frac must be in (0, 1], got {}", self.lambda_frac)));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda must be >= 0, got {l}")));
            }
        }
        if let Some(e) = self.eps {
            if !(e > 0.0) {
                return Err(Error::Config(format!("eps must be > 0, got {e}")));
            }
        }
        if !(self.nu > 0.0) {
            return Err(Error::Config(format!("nu must be > 0, got {}", self.nu)));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be > 0".into()));
        }
        self.line_search.validate()
    }

    fn support_domain(&self, x: &Signal) -> Result<Domain> {
        if self.support.len() != x.domain().dims() {
            return Err(Error::Config(format!(
                "support {:?} has {} axes, the signal has {}",
                self.support,
                self.support.len(),
                x.domain().dims()
            )));
        }
        let s = Domain::new(&self.support)?;
        if !x.domain().fits(&s) {
            return Err(Error::Config(format!("support {:?} does not fit in {:?}", self.support, x.domain().sizes())));
        }
        Ok(s)
    }
}

fn normalize(a: &mut [f64]) {
    let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        a.iter_mut().for_each(|v| *v /= n);
    }
}

/// Copies the `support`-shaped patch of `x` at `pos` into `dst`.
fn extract_patch(x: &Signal, support: &Domain, pos: crate::tensor::Pos, dst: &mut [f64]) {
    let p = x.channels();
    for (i, tau) in support.region().positions().enumerate() {
        let v = [0, 1, 2].map(|a| pos[a] + tau[a]);
        for c in 0..p {
            dst[i * p + c] = x.get(v, c);
        }
    }
}

/// First dictionary of a run, deterministic in `seed`.
pub fn init_dictionary(x: &Signal, atoms: usize, support: &Domain, mode: InitMode, seed: u64) -> Result<Dictionary> {
    if atoms == 0 {
        return Err(Error::Config("atoms must be > 0".into()));
    }
    if support.dims() != x.domain().dims() || !x.domain().fits(support) {
        return Err(Error::Shape(format!(
            "support {:?} does not fit in {:?}",
            support.sizes(),
            x.domain().sizes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Dictionary::zeros(atoms, x.channels(), *support);
    match mode {
        InitMode::Gaussian => {
            for v in d.data_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        InitMode::Patches => {
            let coding = x.domain().coding_region(support);
            if coding.len() < atoms {
                return Err(Error::Config(format!(
                    "only {} patch positions for {atoms} atoms",
                    coding.len()
                )));
            }
            let picks = rand::seq::index::sample(&mut rng, coding.len(), atoms);
            let shape = coding.shape();
            for (k, idx) in picks.into_iter().enumerate() {
                let local = [idx / (shape[1] * shape[2]), (idx / shape[2]) % shape[1], idx % shape[2]];
                let pos = [0, 1, 2].map(|a| coding.lo[a] + local[a]);
                extract_patch(x, support, pos, d.atom_mut(k));
            }
        }
    }
    for k in 0..atoms {
        normalize(d.atom_mut(k));
    }
    Ok(d)
}

/// Seconds spent in each phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub csc: f64,
    pub stats: f64,
    pub dict: f64,
    pub total: f64,
}

/// One outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub iteration: usize,
    /// Objective after the sparse coding step.
    pub objective_csc: f64,
    /// Objective after the dictionary step.
    pub objective: f64,
    pub csc_converged: bool,
    pub accepted: u64,
    pub soft_locked: u64,
    pub messages: u64,
    pub pgd_steps: usize,
    pub pgd_stalled: bool,
    pub nnz: usize,
    pub resampled: Vec<usize>,
    pub t_csc: f64,
    pub t_stats: f64,
    pub t_dict: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdlResult {
    pub dictionary: Dictionary,
    pub z: ActivationMap,
    pub lambda: f64,
    pub lambda_max: f64,
    /// Objective at the starting point.
    pub initial_objective: f64,
    /// Objective after each outer iteration.
    pub trace: Vec<f64>,
    pub records: Vec<OuterRecord>,
    pub converged: bool,
    pub timing: Timing,
}

impl CdlResult {
    /// One JSON object per outer iteration, newline separated.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// `||X - Z * D|| / ||X||`.
pub fn relative_reconstruction_error(x: &Signal, z: &ActivationMap, d: &Dictionary) -> Result<f64> {
    let r = convolve(z, d)?.sub(x)?;
    let n = x.sq_norm();
    Ok(if n == 0.0 { r.sq_norm().sqrt() } else { (r.sq_norm() / n).sqrt() })
}

/// Saved state of a run between outer iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dictionary: Dictionary,
    pub z: ActivationMap,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Outer iterations completed.
    pub iteration: usize,
    pub lambda: f64,
    pub lambda_max: f64,
    pub initial_objective: f64,
    pub trace: Vec<f64>,
    pub dictionary: String,
    pub activations: String,
}

const MANIFEST: &str = "manifest.json";

impl Checkpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        SigArray::from(&self.dictionary).save(dir.join(&self.manifest.dictionary))?;
        SigArray::from(&self.z).save(dir.join(&self.manifest.activations))?;
        let tmp = dir.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&self.manifest)?)?;
        fs::rename(tmp, dir.join(MANIFEST))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
        let dictionary = Dictionary::try_from(SigArray::load(dir.join(&manifest.dictionary))?)?;
        let z = ActivationMap::try_from(SigArray::load(dir.join(&manifest.activations))?)?;
        if z.atoms() != dictionary.atoms() {
            return Err(Error::Format("checkpoint dictionary and code disagree on K".into()));
        }
        Ok(Checkpoint { dictionary, z, manifest })
    }
}

/// Where a run starts.
#[derive(Debug, Clone)]
pub enum Start {
    /// Draw the dictionary from the configured init mode.
    Init,
    /// Start from a given dictionary and `Z = 0`.
    Dictionary(Dictionary),
    /// Continue a saved run.
    Resume(Checkpoint),
}

/// Learns a dictionary for `x`.
pub fn fit(x: &Signal, cfg: &CdlConfig) -> Result<CdlResult> {
    fit_from(x, cfg, Start::Init)
}

/// Windowed energy of `r` at every coding position, best first, keeping
/// picks at least one support apart.
fn worst_patches(r: &Signal, support: &Domain, count: usize) -> Vec<crate::tensor::Pos> {
    let coding = r.domain().coding_region(support);
    let l = support.shape();
    let p = r.channels();
    let mut scored: Vec<(f64, crate::tensor::Pos)> = coding
        .positions()
        .map(|w| {
            let e = support
                .region()
                .positions()
                .map(|t| {
                    let v = [0, 1, 2].map(|a| w[a] + t[a]);
                    (0..p).map(|c| r.get(v, c).powi(2)).sum::<f64>()
                })
                .sum::<f64>();
            (e, w)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut picks: Vec<crate::tensor::Pos> = Vec::new();
    for (_, w) in scored {
        if picks.len() == count {
            break;
        }
        if picks.iter().all(|q| (0..3).any(|a| q[a].abs_diff(w[a]) >= l[a])) {
            picks.push(w);
        }
    }
    picks
}

fn resample_unused(x: &Signal, z: &ActivationMap, d: &mut Dictionary) -> Result<Vec<usize>> {
    let unused: Vec<usize> = (0..d.atoms())
        .filter(|&k| z.channel(k).iter().all(|v| *v == 0.0))
        .collect();
    if unused.is_empty() {
        return Ok(unused);
    }
    let r = x.sub(&convolve(z, d)?)?;
    let support = *d.support();
    let picks = worst_patches(&r, &support, unused.len());
    for (&k, pos) in unused.iter().zip(picks) {
        extract_patch(&r, &support, pos, d.atom_mut(k));
        normalize(d.atom_mut(k));
    }
    Ok(unused)
}

/// Learns a dictionary for `x` from the given starting point.
pub fn fit_from(x: &Signal, cfg: &CdlConfig, start: Start) -> Result<CdlResult> {
    cfg.validate()?;
    let t0 = Instant::now();
    let support = cfg.support_domain(x)?;
    let (mut d, mut z, resume) = match start {
        Start::Init => (
            init_dictionary(x, cfg.atoms, &support, cfg.init, cfg.seed)?,
            ActivationMap::zeros(*x.domain(), cfg.atoms),
            None,
        ),
        Start::Dictionary(d) => {
            let z = ActivationMap::zeros(*x.domain(), d.atoms());
            (d, z, None)
        }
        Start::Resume(c) => (c.dictionary, c.z, Some(c.manifest)),
    };
    if d.atoms() != cfg.atoms || *d.support() != support {
        return Err(Error::Config("starting dictionary does not match atoms/support".into()));
    }
    d.check_compatible(x.domain(), x.channels())?;
    if *z.domain() != *x.domain() {
        return Err(Error::Shape("starting code does not match the signal".into()));
    }
    let (lambda, lmax, initial_objective, mut trace, first) = match resume {
        Some(m) => (m.lambda, m.lambda_max, m.initial_objective, m.trace, m.iteration),
        None => {
            let lmax = lambda_max(x, &d)?;
            let lambda = cfg.lambda.unwrap_or(cfg.lambda_frac * lmax);
            let e0 = objective(x, &z, &d, lambda)?;
            (lambda, lmax, e0, Vec::new(), 0)
        }
    };
    let grid = make_grid(x.domain(), cfg.workers, &support, cfg.partition)?;
    let mut result = CdlResult {
        dictionary: d.clone(),
        z: z.clone(),
        lambda,
        lambda_max: lmax,
        initial_objective,
        trace: Vec::new(),
        records: Vec::new(),
        converged: false,
        timing: Timing::default(),
    };
    let mut prev = trace.last().copied().unwrap_or(initial_objective);
    for q in first..cfg.max_outer {
        let eps = match cfg.eps {
            Some(e) => e,
            None => CscContext::for_signal(x, &d)?.default_tolerance(lambda),
        };
        let opts = RunOptions {
            scheduler: cfg.scheduler,
            seed: cfg.seed.wrapping_add(q as u64),
            ..RunOptions::default()
        };
        let t = Instant::now();
        let (zn, rs) = run_dicodile_z_with(x, &d, lambda, &grid, eps, &opts, Some(&z))?;
        let t_csc = t.elapsed().as_secs_f64();
        z = zn;
        let l1 = z.l1_norm();
        let t = Instant::now();
        let st = compute_sufficient_stats(&z, x, &grid, Execution::default())?;
        let t_stats = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let pgd = pgd_update(&d, &st.phi, &st.psi, st.x_sqnorm, &cfg.line_search)?;
        d = pgd.dictionary;
        let resampled = if cfg.resample_unused { resample_unused(x, &z, &mut d)? } else { Vec::new() };
        let t_dict = t.elapsed().as_secs_f64();
        // Resampled atoms carry no activation, so F is unchanged.
        let e = pgd.objective + lambda * l1;
        if !e.is_finite() {
            return Err(Error::NonFinite(format!("objective at outer iteration {q}")));
        }
        trace.push(e);
        result.timing.csc += t_csc;
        result.timing.stats += t_stats;
        result.timing.dict += t_dict;
        result.records.push(OuterRecord {
            iteration: q,
            objective_csc: pgd.initial_objective + lambda * l1,
            objective: e,
            csc_converged: rs.converged,
            accepted: rs.accepted,
            soft_locked: rs.soft_locked,
            messages: rs.messages,
            pgd_steps: pgd.steps.len(),
            pgd_stalled: pgd.stalled,
            nnz: z.nnz(),
            resampled,
            t_csc,
            t_stats,
            t_dict,
        });
        if let Some(dir) = &cfg.checkpoint_dir {
            Checkpoint {
                dictionary: d.clone(),
                z: z.clone(),
                manifest: Manifest {
                    iteration: q + 1,
                    lambda,
                    lambda_max: lmax,
                    initial_objective,
                    trace: trace.clone(),
                    dictionary: "dictionary.sig".into(),
                    activations: "activations.sig".into(),
                },
            }
            .save(dir)?;
        }
        let done = (prev - e).abs() < cfg.nu * prev.abs().max(1.0);
        prev = e;
        if done {
            result.converged = true;
            break;
        }
    }
    result.dictionary = d;
    result.z = z;
    result.trace = trace;
    result.timing.total = t0.elapsed().as_secs_f64();
    Ok(result)
}
