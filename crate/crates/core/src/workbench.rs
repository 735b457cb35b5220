//! Synthetic data, desk-scale presets and benchmark runners.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::csc::{solve, CscContext, SelectionStrategy};
use crate::error::{Error, Result};
use crate::grid::{make_grid, max_workers, Partition};
use crate::runtime::{run_dicodile_z, RunOptions, Scheduler};
use crate::tensor::io::SigArray;
use crate::tensor::{convolve, lambda_max, ActivationMap, Dictionary, Domain, Signal};

/// Parameters of a Bernoulli-Gaussian synthetic problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Signal sizes `T`, one per axis.
    pub sizes: Vec<usize>,
    pub channels: usize,
    pub atoms: usize,
    /// Atom support `L`.
    pub support: Vec<usize>,
    /// Probability that a coordinate `(k, w)` is active.
    pub rho: f64,
    pub mean: f64,
    pub std: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must be in [0, 1], got {}", self.rho)));
        }
        if self.sizes.is_empty() || self.sizes.len() != self.support.len() {
            return Err(Error::Config("sizes and support need the same number of axes".into()));
        }
        if self.sizes.contains(&0) || self.support.contains(&0) || self.channels == 0 || self.atoms == 0 {
            return Err(Error::Config("all sizes must be positive".into()));
        }
        if self.sizes.iter().zip(&self.support).any(|(t, l)| l > t) {
            return Err(Error::Config("support does not fit in the signal".into()));
        }
        if !(self.std >= 0.0 && self.noise_std >= 0.0) {
            return Err(Error::Config("standard deviations must be >= 0".into()));
        }
        Ok(())
    }
}

/// A generated problem with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub x: Signal,
    pub dictionary: Dictionary,
    pub z: ActivationMap,
}

/// `X = Z* * D* + noise`, with unit-norm Gaussian atoms and
/// Bernoulli-Gaussian activations on the coding region.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let support = Domain::new(&spec.support)?;
    let domain = Domain::new(&spec.sizes)?;
    let mut d = Dictionary::zeros(spec.atoms, spec.channels, support);
    for k in 0..spec.atoms {
        let a = d.atom_mut(k);
        a.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        a.iter_mut().for_each(|v| *v /= n);
    }
    let value = Normal::new(spec.mean, spec.std).map_err(|e| Error::Config(e.to_string()))?;
    let mut z = ActivationMap::zeros(domain, spec.atoms);
    for w in domain.coding_region(&support).positions() {
        for k in 0..spec.atoms {
            if rng.random_bool(spec.rho) {
                z.set(k, w, value.sample(&mut rng));
            }
        }
    }
    let mut x = convolve(&z, &d)?;
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        x.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    Ok(Synthetic { x, dictionary: d, z })
}

/// Writes `x.sig`, `dictionary.sig`, `z.sig` and `manifest.json` to `dir`.
pub fn save_synthetic(dir: impl AsRef<Path>, spec: &SyntheticSpec, data: &Synthetic) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    SigArray::from(&data.x).save(dir.join("x.sig"))?;
    SigArray::from(&data.dictionary).save(dir.join("dictionary.sig"))?;
    SigArray::from(&data.z).save(dir.join("z.sig"))?;
    let manifest = serde_json::json!({
        "spec": spec,
        "files": {"signal": "x.sig", "dictionary": "dictionary.sig", "activations": "z.sig"},
    });
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Named problem sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "1d-tiny")]
    OneDTiny,
    /// Full-size one dimensional problem.
    #[serde(rename = "1d-small")]
    OneDSmall,
    #[serde(rename = "2d-tiny")]
    TwoDTiny,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::OneDTiny, Preset::OneDSmall, Preset::TwoDTiny];

    pub fn name(self) -> &'static str {
        match self {
            Preset::OneDTiny => "1d-tiny",
            Preset::OneDSmall => "1d-small",
            Preset::TwoDTiny => "2d-tiny",
        }
    }

    /// Needs `--full` on the command line.
    pub fn is_full(self) -> bool {
        self == Preset::OneDSmall
    }

    pub fn spec(self, seed: u64) -> SyntheticSpec {
        let (sizes, channels, atoms, support) = match self {
            Preset::OneDTiny => (vec![64 * 16], 7, 5, vec![16]),
            Preset::OneDSmall => (vec![150 * 250], 7, 25, vec![250]),
            Preset::TwoDTiny => (vec![128, 128], 1, 5, vec![8, 8]),
        };
        SyntheticSpec {
            sizes,
            channels,
            atoms,
            support,
            rho: 0.007,
            mean: 0.0,
            std: 10.0,
            noise_std: 1.0,
            seed,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?} (expected 1d-tiny, 1d-small or 2d-tiny)")))
    }
}

/// A smooth gray image in `[0, 1]`: random Gaussian blobs over a
/// low-frequency background.
pub fn synthetic_image(height: usize, width: usize, seed: u64) -> Result<Signal> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dom = Domain::new(&[height, width])?;
    let mut img = Signal::zeros(dom, 1);
    let (h, w) = (height as f64, width as f64);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..2.5) * std::f64::consts::TAU / h,
                rng.random_range(0.5..2.5) * std::f64::consts::TAU / w,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.1..0.3),
            )
        })
        .collect();
    let blobs: Vec<(f64, f64, f64, f64)> = (0..12)
        .map(|_| {
            (
                rng.random_range(0.0..h),
                rng.random_range(0.0..w),
                rng.random_range(4.0..14.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    for i in 0..height {
        for j in 0..width {
            let (y, x) = (i as f64, j as f64);
            let mut v: f64 = waves.iter().map(|(a, b, c, m)| m * (a * y + b * x + c).sin()).sum();
            for (cy, cx, s, m) in &blobs {
                v += m * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp();
            }
            img.set([i, j, 0], 0, v);
        }
    }
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    img.data_mut().iter_mut().for_each(|v| *v = (*v - lo) / span);
    Ok(img)
}

/// One timed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub scenario: String,
    pub workers: usize,
    pub strategy: String,
    pub repeat: usize,
    pub runtime: f64,
    pub objective: f64,
    pub iterations: u64,
    pub accepted: u64,
    pub soft_locked: u64,
    pub messages: u64,
    pub converged: bool,
}

/// A worker count left out of a scaling sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub workers: usize,
    pub reason: String,
}

/// Mean over the repeats of one `(workers, strategy)` group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub workers: usize,
    pub strategy: String,
    pub repeats: usize,
    pub mean_runtime: f64,
    pub mean_objective: f64,
    pub all_converged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub scenario: String,
    pub runs: Vec<BenchRun>,
    pub skipped: Vec<Skipped>,
    /// Largest worker count the partition can host, for scaling sweeps.
    pub max_workers: Option<usize>,
}

/// JSON schema of a [`BenchRun`] row.
pub fn run_schema() -> serde_json::Value {
    let int = serde_json::json!({"type": "integer", "minimum": 0});
    let num = serde_json::json!({"type": "number"});
    let string = serde_json::json!({"type": "string"});
    serde_json::json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "BenchRun",
        "type": "object",
        "additionalProperties": false,
        "required": ["scenario", "workers", "strategy", "repeat", "runtime", "objective",
                     "iterations", "accepted", "soft_locked", "messages", "converged"],
        "properties": {
            "scenario": string, "workers": int, "strategy": string, "repeat": int,
            "runtime": {"type": "number", "minimum": 0}, "objective": num,
            "iterations": int, "accepted": int, "soft_locked": int, "messages": int,
            "converged": {"type": "boolean"}
        }
    })
}

/// Checks a JSON row against [`run_schema`]. Only the keywords used there
/// are understood.
pub fn validate_run(row: &serde_json::Value) -> Result<()> {
    let schema = run_schema();
    let bad = |m: String| Err(Error::Format(m));
    let Some(obj) = row.as_object() else {
        return bad("row is not an object".into());
    };
    let props = schema["properties"].as_object().expect("schema has properties");
    for key in schema["required"].as_array().expect("schema has required") {
        let key = key.as_str().unwrap_or_default();
        if !obj.contains_key(key) {
            return bad(format!("missing field {key}"));
        }
    }
    for (key, v) in obj {
        let Some(p) = props.get(key) else {
            return bad(format!("unexpected field {key}"));
        };
        let ok = match p["type"].as_str() {
            Some("integer") => v.as_u64().is_some(),
            Some("number") => v.as_f64().is_some_and(|x| p.get("minimum").and_then(|m| m.as_f64()).map_or(true, |m| x >= m)),
            Some("string") => v.is_string(),
            Some("boolean") => v.is_boolean(),
            _ => false,
        };
        if !ok {
            return bad(format!("field {key} does not match its schema: {v}"));
        }
    }
    Ok(())
}

const CSV_HEADER: &str = "scenario,workers,strategy,repeat,runtime,objective,iterations,accepted,soft_locked,messages,converged";

impl BenchResult {
    pub fn summary(&self) -> Vec<BenchSummary> {
        let mut out: Vec<BenchSummary> = Vec::new();
        for r in &self.runs {
            match out.iter_mut().find(|s| s.workers == r.workers && s.strategy == r.strategy) {
                Some(s) => {
                    s.repeats += 1;
                    s.mean_runtime += r.runtime;
                    s.mean_objective += r.objective;
                    s.all_converged &= r.converged;
                }
                None => out.push(BenchSummary {
                    workers: r.workers,
                    strategy: r.strategy.clone(),
                    repeats: 1,
                    mean_runtime: r.runtime,
                    mean_objective: r.objective,
                    all_converged: r.converged,
                }),
            }
        }
        for s in &mut out {
            s.mean_runtime /= s.repeats as f64;
            s.mean_objective /= s.repeats as f64;
        }
        out
    }

    pub fn mean_runtime(&self, workers: usize, strategy: &str) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|s| s.workers == workers && s.strategy == strategy)
            .map(|s| s.mean_runtime)
    }

    /// Locally greedy has the smallest mean runtime.
    pub fn lgcd_fastest(&self) -> bool {
        let s = self.summary();
        let Some(lgcd) = s.iter().find(|r| r.strategy == "lgcd") else {
            return false;
        };
        s.iter().all(|r| r.strategy == "lgcd" || lgcd.mean_runtime < r.mean_runtime)
    }

    /// Largest relative gap between the mean objectives.
    pub fn objective_spread(&self) -> f64 {
        let objs: Vec<f64> = self.summary().iter().map(|s| s.mean_objective).collect();
        let lo = objs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = objs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if objs.is_empty() {
            0.0
        } else {
            (hi - lo) / lo.abs().max(f64::MIN_POSITIVE)
        }
    }

    /// Mean runtime never increases with the worker count.
    pub fn monotone(&self) -> bool {
        let mut s = self.summary();
        s.sort_by_key(|r| r.workers);
        s.windows(2).all(|w| w[1].mean_runtime <= w[0].mean_runtime)
    }

    /// One row per run. Floats use the shortest representation that
    /// parses back to the same value.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{},{},{:?},{:?},{},{},{},{},{}",
                r.scenario,
                r.workers,
                r.strategy,
                r.repeat,
                r.runtime,
                r.objective,
                r.iterations,
                r.accepted,
                r.soft_locked,
                r.messages,
                r.converged
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Vec<BenchRun>> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Format("unexpected CSV header".into()));
        }
        let bad = |e: String| Error::Format(format!("bad CSV row: {e}"));
        lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 11 {
                    return Err(bad(l.to_string()));
                }
                Ok(BenchRun {
                    scenario: f[0].to_string(),
                    workers: f[1].parse().map_err(|_| bad(l.to_string()))?,
                    strategy: f[2].to_string(),
                    repeat: f[3].parse().map_err(|_| bad(l.to_string()))?,
                    runtime: f[4].parse().map_err(|_| bad(l.to_string()))?,
                    objective: f[5].parse().map_err(|_| bad(l.to_string()))?,
                    iterations: f[6].parse().map_err(|_| bad(l.to_string()))?,
                    accepted: f[7].parse().map_err(|_| bad(l.to_string()))?,
                    soft_locked: f[8].parse().map_err(|_| bad(l.to_string()))?,
                    messages: f[9].parse().map_err(|_| bad(l.to_string()))?,
                    converged: f[10].parse().map_err(|_| bad(l.to_string()))?,
                })
            })
            .collect()
    }
}

/// A sparse coding problem to benchmark.
#[derive(Debug, Clone)]
pub struct Problem {
    pub name: String,
    pub x: Signal,
    pub dictionary: Dictionary,
    pub lambda: f64,
}

impl Problem {
    /// The preset's synthetic signal with its true dictionary and
    /// `lambda = frac * lambda_max`.
    pub fn from_preset(preset: Preset, seed: u64, frac: f64) -> Result<Self> {
        let s = generate_synthetic(&preset.spec(seed))?;
        let lambda = frac * lambda_max(&s.x, &s.dictionary)?;
        Ok(Problem {
            name: preset.name().into(),
            x: s.x,
            dictionary: s.dictionary,
            lambda,
        })
    }

    /// Default tolerance scaled by `factor`.
    pub fn tolerance(&self, factor: f64) -> Result<f64> {
        Ok(CscContext::for_signal(&self.x, &self.dictionary)?.default_tolerance(self.lambda) * factor)
    }
}

fn check_repeats(repeats: usize) -> Result<()> {
    if repeats < 3 {
        return Err(Error::Config(format!("means need at least 3 repeats, got {repeats}")));
    }
    Ok(())
}

/// The three single-process strategies.
pub fn strategies(seed: u64) -> [SelectionStrategy; 3] {
    [
        SelectionStrategy::Greedy,
        SelectionStrategy::Randomized { seed },
        SelectionStrategy::locally_greedy(),
    ]
}

/// Runs the three selection strategies to the same tolerance.
pub fn bench_strategies(problem: &Problem, eps: f64, repeats: usize) -> Result<BenchResult> {
    check_repeats(repeats)?;
    let mut res = BenchResult {
        scenario: format!("{}-strategies", problem.name),
        ..BenchResult::default()
    };
    for rep in 0..repeats {
        for strat in strategies(rep as u64) {
            let t = Instant::now();
            let (z, log) = solve(&problem.x, &problem.dictionary, problem.lambda, strat.clone(), eps, u64::MAX)?;
            let runtime = t.elapsed().as_secs_f64();
            res.runs.push(BenchRun {
                scenario: res.scenario.clone(),
                workers: 1,
                strategy: strat.name().into(),
                repeat: rep,
                runtime,
                objective: crate::tensor::objective(&problem.x, &z, &problem.dictionary, problem.lambda)?,
                iterations: log.iterations,
                accepted: log.updates,
                soft_locked: 0,
                messages: 0,
                converged: log.converged,
            });
        }
    }
    Ok(res)
}

/// Mean seconds per selection step, from the runtime difference between
/// runs capped at `n` and `2n` steps from `Z = 0` (best of `repeats`).
pub fn iteration_cost(problem: &Problem, strategy: &SelectionStrategy, n: u64, repeats: usize) -> Result<f64> {
    let time = |steps: u64| -> Result<(f64, u64)> {
        let mut best = (f64::INFINITY, 0);
        for _ in 0..repeats.max(1) {
            let t = Instant::now();
            let (_, log) = solve(&problem.x, &problem.dictionary, problem.lambda, strategy.clone(), 1e-300, steps)?;
            let dt = t.elapsed().as_secs_f64();
            if dt < best.0 {
                best = (dt, log.iterations);
            }
        }
        Ok(best)
    };
    let (ta, ia) = time(n)?;
    let (tb, ib) = time(2 * n)?;
    if ib <= ia {
        return Err(Error::Config(format!("solver converged within {ia} steps; lower lambda or n")));
    }
    Ok(((tb - ta) / (ib - ia) as f64).max(0.0))
}

/// Distributed runtime against the number of workers. Worker counts the
/// partition cannot host are skipped.
pub fn bench_scaling(
    problem: &Problem,
    eps: f64,
    workers: &[usize],
    partition: Partition,
    repeats: usize,
    opts: &RunOptions,
) -> Result<BenchResult> {
    check_repeats(repeats)?;
    let name = match partition {
        Partition::Grid => "grid",
        Partition::Line => "line",
    };
    let mut res = BenchResult {
        scenario: format!("{}-scaling-{name}", problem.name),
        ..BenchResult::default()
    };
    let limit = max_workers(problem.x.domain(), problem.dictionary.support(), partition);
    res.max_workers = Some(limit);
    for &w in workers {
        let grid = match make_grid(problem.x.domain(), w, problem.dictionary.support(), partition) {
            Ok(g) => g,
            Err(e) => {
                res.skipped.push(Skipped {
                    workers: w,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        for rep in 0..repeats {
            let o = RunOptions {
                seed: opts.seed.wrapping_add(rep as u64),
                ..opts.clone()
            };
            let t = Instant::now();
            let (_, s) = run_dicodile_z(&problem.x, &problem.dictionary, problem.lambda, &grid, eps, &o)?;
            let runtime = t.elapsed().as_secs_f64();
            res.runs.push(BenchRun {
                scenario: res.scenario.clone(),
                workers: w,
                strategy: match o.scheduler {
                    Scheduler::Async => "dicodile-async".into(),
                    Scheduler::Deterministic => "dicodile-deterministic".into(),
                },
                repeat: rep,
                runtime,
                objective: s.objective,
                iterations: s.iterations(),
                accepted: s.accepted,
                soft_locked: s.soft_locked,
                messages: s.messages,
                converged: s.converged,
            });
        }
    }
    Ok(res)
}
