//! Distributed sparse coding: `W` workers, each running locally greedy
//! coordinate descent on its sub-domain, exchanging border updates and
//! arbitrating them with soft-locks.
//!
//! Two backends run the same worker code: real threads connected by
//! channels, and a deterministic round-based scheduler for protocol tests.

mod consensus;
mod deterministic;
mod message;
mod threaded;
mod worker;

use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use consensus::{convergence_consensus, Consensus, ConsensusTable, PauseRecord};
pub use deterministic::{RoundQueue, Simulation};
pub use message::{AbortReason, ControlMessage, Message, Outbox, Transport, UpdateMessage};
pub use worker::{divergence_threshold, CommitRecord, Shared, Status, WorkerState, WorkerStats};

use crate::csc::CscContext;
use crate::error::{Error, Result};
use crate::grid::WorkerGrid;
use crate::par::{self, Execution};
use crate::tensor::{objective, ActivationMap, ConvOptions, Dictionary, Signal};

/// Environment variable overriding the default worker count.
pub const WORKERS_ENV: &str = "CONVDL_WORKERS";

/// `CONVDL_WORKERS` if set to a positive integer, else the number of
/// available cores.
pub fn default_workers() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{WORKERS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    /// One thread per worker.
    #[default]
    Async,
    /// Seeded single-threaded rounds.
    Deterministic,
}

impl FromStr for Scheduler {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "async" => Ok(Scheduler::Async),
            "deterministic" => Ok(Scheduler::Deterministic),
            _ => Err(Error::Config(format!("unknown scheduler {s:?} (expected async or deterministic)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub scheduler: Scheduler,
    /// Interleaving seed of the deterministic scheduler.
    pub seed: u64,
    pub soft_locks: bool,
    /// Probability that a worker takes part in a deterministic round.
    pub participation: f64,
    /// Cell visits allowed per worker.
    pub max_iter: u64,
    /// Workers stop when `|Z|` exceeds `factor / max_k ||D_k||_inf`.
    pub divergence_factor: f64,
    pub record_commits: bool,
    pub timeout: Option<Duration>,
    pub conv: ConvOptions,
    pub exec: Execution,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            scheduler: Scheduler::Async,
            seed: 0,
            soft_locks: true,
            participation: 1.0,
            max_iter: 100_000_000,
            divergence_factor: 50.0,
            record_commits: false,
            timeout: None,
            conv: ConvOptions::default(),
            exec: Execution::Parallel,
        }
    }
}

/// Summary of a distributed run. Serializes to the fields shared with the
/// command line tools; the per-worker details are kept in memory only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub workers: usize,
    pub grid: Vec<usize>,
    pub accepted: u64,
    pub soft_locked: u64,
    /// Update messages.
    pub messages: u64,
    pub t_sec: f64,
    pub objective: f64,
    #[serde(skip)]
    pub converged: bool,
    #[serde(skip)]
    pub rounds: u64,
    #[serde(skip)]
    pub per_worker: Vec<WorkerStats>,
    #[serde(skip)]
    pub commits: Vec<CommitRecord>,
}

impl RunStats {
    /// Accepted updates over all border arbitrations and interior commits.
    pub fn acceptance_rate(&self) -> f64 {
        let n = self.accepted + self.soft_locked;
        if n == 0 {
            1.0
        } else {
            self.accepted as f64 / n as f64
        }
    }

    pub fn iterations(&self) -> u64 {
        self.per_worker.iter().map(|w| w.iterations).sum()
    }
}

/// Builds the shared state and the workers of a run.
pub fn prepare(
    x: &Signal,
    d: &Dictionary,
    lambda: f64,
    grid: &WorkerGrid,
    eps: f64,
    opts: &RunOptions,
    warm: Option<&ActivationMap>,
) -> Result<(Shared, Vec<WorkerState>)> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be > 0, got {eps}")));
    }
    if grid.domain() != x.domain() || grid.support() != d.support() {
        return Err(Error::Shape("grid was built for another domain or support".into()));
    }
    if let Some(w) = warm {
        if w.domain() != x.domain() || w.atoms() != d.atoms() {
            return Err(Error::Shape("warm start does not match the problem".into()));
        }
    }
    let sh = Shared {
        ctx: CscContext::for_signal(x, d)?,
        grid: grid.clone(),
        lambda,
        eps,
        soft_locks: opts.soft_locks,
        threshold: divergence_threshold(d, opts.divergence_factor),
        max_iter: opts.max_iter,
        record_commits: opts.record_commits,
    };
    let conv = ConvOptions { exec: Execution::Sequential, ..opts.conv };
    let workers = par::map_range(opts.exec, grid.workers(), |w| WorkerState::new(&sh, x, w, warm, conv))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok((sh, workers))
}

/// Solves `min_Z 1/2 ||X - Z * D||^2 + lambda ||Z||_1` over `grid`.
pub fn run_dicodile_z(
    x: &Signal,
    d: &Dictionary,
    lambda: f64,
    grid: &WorkerGrid,
    eps: f64,
    opts: &RunOptions,
) -> Result<(ActivationMap, RunStats)> {
    run_dicodile_z_with(x, d, lambda, grid, eps, opts, None)
}

/// Like [`run_dicodile_z`], warm-started from `warm`.
pub fn run_dicodile_z_with(
    x: &Signal,
    d: &Dictionary,
    lambda: f64,
    grid: &WorkerGrid,
    eps: f64,
    opts: &RunOptions,
    warm: Option<&ActivationMap>,
) -> Result<(ActivationMap, RunStats)> {
    let start = Instant::now();
    let (sh, workers) = prepare(x, d, lambda, grid, eps, opts, warm)?;
    let (workers, rounds) = match opts.scheduler {
        Scheduler::Async => (threaded::run(&sh, workers, opts.timeout)?, 0),
        Scheduler::Deterministic => {
            let mut sim = Simulation::new(&sh, workers, opts.seed, opts.participation);
            sim.run()?;
            let r = sim.round();
            (sim.into_workers(), r)
        }
    };
    let t_sec = start.elapsed().as_secs_f64();
    finish(x, d, lambda, &sh, workers, rounds, t_sec)
}

/// Assembles `Z` and the statistics of terminated workers.
pub fn finish(
    x: &Signal,
    d: &Dictionary,
    lambda: f64,
    sh: &Shared,
    mut workers: Vec<WorkerState>,
    rounds: u64,
    t_sec: f64,
) -> Result<(ActivationMap, RunStats)> {
    for w in &workers {
        if let Some(AbortReason::Diverged { worker, value, threshold }) = w.abort_reason() {
            if w.status() == Status::Diverged {
                return Err(Error::Diverged {
                    worker: *worker,
                    value: *value,
                    threshold: *threshold,
                });
            }
        }
    }
    for w in &workers {
        if let Some(AbortReason::Protocol { worker, reason }) = w.abort_reason() {
            return Err(Error::Protocol {
                worker: *worker,
                reason: reason.clone(),
            });
        }
    }
    let mut z = ActivationMap::zeros(*x.domain(), d.atoms());
    let mut stats = RunStats {
        workers: workers.len(),
        grid: sh.grid.counts().to_vec(),
        t_sec,
        rounds,
        converged: workers.iter().all(|w| w.status() == Status::Done),
        ..RunStats::default()
    };
    for w in &mut workers {
        w.finish_stats();
        w.write_into(&mut z);
        stats.accepted += w.stats.accepted;
        stats.soft_locked += w.stats.soft_locked;
        stats.messages += w.stats.messages;
        stats.per_worker.push(w.stats.clone());
        stats.commits.append(&mut w.commits);
    }
    stats.objective = objective(x, &z, d, lambda)?;
    Ok((z, stats))
}

#[cfg(test)]
mod tests;
