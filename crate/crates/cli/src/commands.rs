use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use convdl::cdl::{fit_from, CdlConfig, Checkpoint, Start};
use convdl::csc::CscContext;
use convdl::grid::{make_grid, max_workers, Partition, WorkerGrid};
use convdl::runtime::{default_workers, run_dicodile_z, RunOptions, Scheduler};
use convdl::tensor::io::{load_png, SigArray};
use convdl::tensor::{lambda_max, Dictionary, Signal};
use convdl::verify;
use convdl::workbench::{
    bench_scaling, bench_strategies, generate_synthetic, save_synthetic, synthetic_image, BenchResult, Preset,
    Problem, SyntheticSpec,
};

use crate::{BenchKind, Common, Input, Oracle};

#[derive(Debug)]
pub enum CliError {
    Lib(convdl::Error),
    NotConverged(String),
    Failed(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Lib(e) => e.fmt(f),
            CliError::NotConverged(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<convdl::Error> for CliError {
    fn from(e: convdl::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl CliError {
    /// Error kind and process exit code.
    pub fn classify(&self) -> (&'static str, u8) {
        use convdl::Error as E;
        match self {
            CliError::Lib(E::Config(_) | E::InfeasibleGrid { .. } | E::Shape(_) | E::EmptyRegion(_)) => ("config", 2),
            CliError::Lib(E::Format(_) | E::Json(_) | E::Image(_)) => ("input", 2),
            CliError::Lib(E::Diverged { .. }) => ("diverged", 3),
            CliError::NotConverged(_) => ("not_converged", 4),
            CliError::Lib(E::Io(_)) => ("io", 1),
            CliError::Lib(_) => ("runtime", 1),
            CliError::Failed(_) => ("failed", 1),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn config_err(m: impl Into<String>) -> CliError {
    CliError::Lib(convdl::Error::Config(m.into()))
}

fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn config_or_default<T: DeserializeOwned + Default>(c: &Common) -> Result<T> {
    c.config.as_deref().map_or_else(|| Ok(T::default()), load_toml)
}

fn preset(c: &Common, name: &str) -> Result<Preset> {
    let p: Preset = name.parse()?;
    if p.is_full() && !c.full {
        return Err(config_err(format!("preset {name} is full size; pass --full")));
    }
    Ok(p)
}

fn scheduler(c: &Common) -> Result<Scheduler> {
    Ok(c.scheduler.as_deref().unwrap_or("async").parse()?)
}

fn partition(s: Option<&str>) -> Result<Partition> {
    Ok(s.unwrap_or("grid").parse()?)
}

fn workers(c: &Common) -> Result<usize> {
    match c.workers {
        Some(0) => Err(config_err("--workers must be positive")),
        Some(w) => Ok(w),
        None => Ok(default_workers()?),
    }
}

fn out_dir(c: &Common) -> Result<&Path> {
    fs::create_dir_all(&c.out_dir)?;
    Ok(&c.out_dir)
}

fn write_json(path: PathBuf, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn dump_grid(c: &Common, grid: &WorkerGrid) -> Result<()> {
    if c.dump_grid {
        write_json(out_dir(c)?.join("grid.json"), &grid.layout())?;
    }
    Ok(())
}

/// The signal and, for presets, the ground-truth dictionary.
fn load_input(c: &Common, input: &Input) -> Result<(Signal, Option<Dictionary>, Option<Preset>)> {
    match (&input.input, &input.preset) {
        (Some(path), None) => {
            let x = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                load_png(path, input.gray)?
            } else {
                Signal::try_from(SigArray::load(path)?)?
            };
            Ok((x, None, None))
        }
        (None, Some(name)) => {
            let p = preset(c, name)?;
            let s = generate_synthetic(&p.spec(c.seed.unwrap_or(0)))?;
            Ok((s.x, Some(s.dictionary), Some(p)))
        }
        _ => Err(config_err("give exactly one of --input or --preset")),
    }
}

pub fn make_data(c: &Common, name: &str, image: bool) -> Result<ExitCode> {
    let mut spec = match &c.config {
        Some(path) => load_toml::<SyntheticSpec>(path)?,
        None => preset(c, name)?.spec(0),
    };
    if let Some(seed) = c.seed {
        spec.seed = seed;
    }
    let dir = out_dir(c)?;
    if image {
        if spec.sizes.len() != 2 {
            return Err(config_err("--image needs a two dimensional preset"));
        }
        let img = synthetic_image(spec.sizes[0], spec.sizes[1], spec.seed)?;
        SigArray::from(&img).save(dir.join("x.sig"))?;
        let manifest = serde_json::json!({"image": {"sizes": spec.sizes, "seed": spec.seed}, "files": {"signal": "x.sig"}});
        write_json(dir.join("manifest.json"), &manifest)?;
    } else {
        let s = generate_synthetic(&spec)?;
        save_synthetic(dir, &spec, &s)?;
    }
    println!("{}", serde_json::json!({"out_dir": dir, "sizes": spec.sizes, "seed": spec.seed}));
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodeParams {
    pub lambda: Option<f64>,
    pub lambda_frac: Option<f64>,
    pub eps: Option<f64>,
    pub max_iter: Option<u64>,
    pub partition: Option<String>,
}

pub fn encode(c: &Common, input: &Input, dict: Option<&Path>, flags: EncodeParams, soft_locks: bool) -> Result<ExitCode> {
    let file: EncodeParams = config_or_default(c)?;
    let (x, truth, _) = load_input(c, input)?;
    let d = match (dict, truth) {
        (Some(p), _) => Dictionary::try_from(SigArray::load(p)?)?,
        (None, Some(d)) => d,
        (None, None) => return Err(config_err("--dictionary is required with --input")),
    };
    let lmax = lambda_max(&x, &d)?;
    let lambda = match (flags.lambda.or(file.lambda), flags.lambda_frac.or(file.lambda_frac)) {
        (Some(l), _) => l,
        (None, frac) => frac.unwrap_or(0.1) * lmax,
    };
    let eps = match flags.eps.or(file.eps) {
        Some(e) => e,
        None => CscContext::for_signal(&x, &d)?.default_tolerance(lambda),
    };
    let part = partition(flags.partition.as_deref().or(file.partition.as_deref()))?;
    let grid = make_grid(x.domain(), workers(c)?, d.support(), part)?;
    dump_grid(c, &grid)?;
    let mut opts = RunOptions {
        scheduler: scheduler(c)?,
        seed: c.seed.unwrap_or(0),
        soft_locks,
        ..RunOptions::default()
    };
    if let Some(m) = flags.max_iter.or(file.max_iter) {
        opts.max_iter = m;
    }
    let (z, stats) = run_dicodile_z(&x, &d, lambda, &grid, eps, &opts)?;
    let dir = out_dir(c)?;
    SigArray::from(&z).save(dir.join("z.sig"))?;
    write_json(dir.join("stats.json"), &stats)?;
    let mut line = serde_json::to_value(&stats)?;
    line["lambda"] = lambda.into();
    line["lambda_max"] = lmax.into();
    line["nnz"] = z.nnz().into();
    line["converged"] = stats.converged.into();
    println!("{line}");
    if !stats.converged {
        return Err(CliError::NotConverged(format!(
            "sparse coding stopped at the iteration limit after {} cell visits",
            stats.iterations()
        )));
    }
    Ok(ExitCode::SUCCESS)
}

pub struct LearnFlags {
    pub atoms: Option<usize>,
    pub support: Option<Vec<usize>>,
    pub max_outer: Option<usize>,
    pub lambda_frac: Option<f64>,
    pub init: Option<String>,
    pub partition: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub resume: bool,
}

pub fn learn(c: &Common, input: &Input, f: LearnFlags) -> Result<ExitCode> {
    let (x, _, preset) = load_input(c, input)?;
    let mut cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            CdlConfig::from_toml(&text)?
        }
        None => {
            let (k, l) = match preset {
                Some(p) => {
                    let s = p.spec(0);
                    (s.atoms, s.support)
                }
                None => (
                    f.atoms.ok_or_else(|| config_err("--atoms is required without --config or --preset"))?,
                    f.support.clone().ok_or_else(|| config_err("--support is required without --config or --preset"))?,
                ),
            };
            CdlConfig { workers: workers(c)?, ..CdlConfig::new(k, &l) }
        }
    };
    if let Some(k) = f.atoms {
        cfg.atoms = k;
    }
    if let Some(l) = f.support {
        cfg.support = l;
    }
    if let Some(m) = f.max_outer {
        cfg.max_outer = m;
    }
    if let Some(frac) = f.lambda_frac {
        cfg.lambda_frac = frac;
        cfg.lambda = None;
    }
    if let Some(i) = &f.init {
        cfg.init = i.parse()?;
    }
    if let Some(p) = &f.partition {
        cfg.partition = p.parse()?;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(s) = &c.scheduler {
        cfg.scheduler = s.parse()?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if f.checkpoint.is_some() {
        cfg.checkpoint_dir = f.checkpoint.clone();
    }
    cfg.validate()?;
    if c.dump_grid {
        let support = convdl::tensor::Domain::new(&cfg.support)?;
        let grid = make_grid(x.domain(), cfg.workers, &support, cfg.partition)?;
        dump_grid(c, &grid)?;
    }
    let start = match (&f.checkpoint, f.resume) {
        (Some(dir), true) => Start::Resume(Checkpoint::load(dir)?),
        _ => Start::Init,
    };
    let r = fit_from(&x, &cfg, start)?;
    let dir = out_dir(c)?;
    SigArray::from(&r.dictionary).save(dir.join("dictionary.sig"))?;
    SigArray::from(&r.z).save(dir.join("z.sig"))?;
    let mut log = Vec::new();
    r.write_jsonl(&mut log)?;
    fs::write(dir.join("trace.jsonl"), log)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let summary = serde_json::json!({
        "lambda": r.lambda,
        "lambda_max": r.lambda_max,
        "initial_objective": r.initial_objective,
        "trace": r.trace,
        "converged": r.converged,
        "outer_iterations": r.trace.len(),
        "nnz": r.z.nnz(),
    });
    write_json(dir.join("result.json"), &summary)?;
    println!("{summary}");
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifyParams {
    trials: Option<usize>,
}

pub fn verify(c: &Common, all: bool, oracle: Option<Oracle>, trials: Option<usize>) -> Result<ExitCode> {
    let file: VerifyParams = config_or_default(c)?;
    let seed = c.seed.unwrap_or(0);
    let n = trials.or(file.trials).unwrap_or(100);
    let reports = match (all, oracle) {
        (true, _) => verify::run_all(seed)?,
        (false, Some(Oracle::CostDelta)) => vec![verify::check_cost_delta(seed, n)?],
        (false, Some(Oracle::Interference)) => vec![verify::check_interference(seed, n)?],
        (false, Some(Oracle::Lasso)) => vec![verify::check_lasso_equivalence(seed, n)?],
        (false, Some(Oracle::Acceptance)) => {
            let mut r = verify::run_all(seed)?;
            r.retain(|r| r.name == "acceptance");
            r
        }
        (false, None) => return Err(config_err("give --all or --oracle")),
    };
    for r in &reports {
        println!("{}", serde_json::to_string(r)?);
    }
    write_json(out_dir(c)?.join("verify.json"), &reports)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::Failed(format!("oracles failed: {}", failed.join(", "))));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchParams {
    pub preset: Option<String>,
    pub repeats: Option<usize>,
    pub workers_list: Option<Vec<usize>>,
    pub split: Option<String>,
    pub eps_factor: Option<f64>,
}

pub fn bench(c: &Common, kind: BenchKind, f: BenchParams) -> Result<ExitCode> {
    let file: BenchParams = config_or_default(c)?;
    let default_preset = match kind {
        BenchKind::Strategies => "1d-tiny",
        BenchKind::Scaling => "2d-tiny",
    };
    let p = preset(c, f.preset.as_deref().or(file.preset.as_deref()).unwrap_or(default_preset))?;
    let seed = c.seed.unwrap_or(0);
    let problem = Problem::from_preset(p, seed, 0.1)?;
    let repeats = f.repeats.or(file.repeats).unwrap_or(5);
    let eps = problem.tolerance(f.eps_factor.or(file.eps_factor).unwrap_or(1e-2))?;
    let (res, extra): (BenchResult, serde_json::Value) = match kind {
        BenchKind::Strategies => {
            let r = bench_strategies(&problem, eps, repeats)?;
            let extra = serde_json::json!({"lgcd_fastest": r.lgcd_fastest(), "objective_spread": r.objective_spread()});
            (r, extra)
        }
        BenchKind::Scaling => {
            let split = partition(f.split.as_deref().or(file.split.as_deref()))?;
            let list = f.workers_list.or(file.workers_list).unwrap_or_else(|| vec![1, 2, 4, 9, 16]);
            let opts = RunOptions {
                scheduler: scheduler(c)?,
                seed,
                ..RunOptions::default()
            };
            let r = bench_scaling(&problem, eps, &list, split, repeats, &opts)?;
            let dom = problem.x.domain();
            let sup = problem.dictionary.support();
            let extra = serde_json::json!({
                "monotone": r.monotone(),
                "max_workers_grid": max_workers(dom, sup, Partition::Grid),
                "max_workers_line": max_workers(dom, sup, Partition::Line),
            });
            (r, extra)
        }
    };
    let dir = out_dir(c)?;
    fs::write(dir.join("bench.csv"), res.to_csv())?;
    write_json(dir.join("bench.json"), &res)?;
    let summary = serde_json::json!({"scenario": res.scenario, "summary": res.summary(), "skipped": res.skipped, "checks": extra});
    println!("{summary}");
    Ok(ExitCode::SUCCESS)
}
