//! Single-process coordinate descent for convolutional sparse coding.
//!
//! The solver keeps the auxiliary variable
//! `beta_k[w] = ((X - Z * D + Z_k[w] e_w * D_k) * D~_k)[w]`, which makes the
//! optimal one-coordinate update closed form,
//! `Z'_k[w] = ST(beta_k[w], lambda) / ||D_k||^2`, and cheap to maintain: an
//! update at `w0` only changes `beta` on the neighborhood
//! `prod [w0_i - L_i + 1, w0_i + L_i[`.
//!
//! Activations live on the coding region, the positions where an atom fits
//! entirely inside the domain. Entries of `Z` outside it stay zero.

mod slab;

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub(crate) use slab::Slab;

use crate::error::{Error, Result};
use crate::tensor::{
    convolve, correlate, objective, soft_threshold, ActivationMap, AtomCross, ConvOptions,
    Dictionary, Domain, Pos, Region, Signal, MAX_DIMS,
};

/// Quantities derived once from a dictionary and the signal domain.
#[derive(Debug, Clone)]
pub struct CscContext {
    dictionary: Dictionary,
    domain: Domain,
    coding: Region,
    sq_norms: Vec<f64>,
    cross: AtomCross,
    frozen: Vec<usize>,
}

impl CscContext {
    pub fn new(d: &Dictionary, domain: &Domain, channels: usize) -> Result<Self> {
        d.check_compatible(domain, channels)?;
        let sq_norms = d.sq_norms();
        let frozen = (0..d.atoms()).filter(|&k| sq_norms[k] == 0.0).collect();
        Ok(CscContext {
            dictionary: d.clone(),
            domain: *domain,
            coding: domain.coding_region(d.support()),
            sq_norms,
            cross: AtomCross::new(d),
            frozen,
        })
    }

    pub fn for_signal(x: &Signal, d: &Dictionary) -> Result<Self> {
        Self::new(d, x.domain(), x.channels())
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.dictionary
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn support(&self) -> &Domain {
        self.dictionary.support()
    }

    pub fn atoms(&self) -> usize {
        self.dictionary.atoms()
    }

    /// Positions that carry activations.
    pub fn coding(&self) -> &Region {
        &self.coding
    }

    pub fn sq_norms(&self) -> &[f64] {
        &self.sq_norms
    }

    pub fn cross(&self) -> &AtomCross {
        &self.cross
    }

    /// Atoms with zero norm. Their activations are never updated.
    pub fn frozen_atoms(&self) -> &[usize] {
        &self.frozen
    }

    /// Default stopping tolerance `1e-2 * lambda / max_k ||D_k||^2`.
    pub fn default_tolerance(&self, lambda: f64) -> f64 {
        let m = self.sq_norms.iter().cloned().fold(0.0, f64::max);
        if m == 0.0 || lambda == 0.0 {
            return 1e-10;
        }
        (1e-2 * lambda / m).max(1e-12)
    }
}

/// The auxiliary variable `beta`, shaped like the activations.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxBeta(pub ActivationMap);

impl AuxBeta {
    pub fn get(&self, k: usize, pos: Pos) -> f64 {
        self.0.get(k, pos)
    }

    pub fn map(&self) -> &ActivationMap {
        &self.0
    }
}

/// A proposed coordinate update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateUpdate {
    pub atom: usize,
    pub pos: Pos,
    /// Value before the update.
    pub old: f64,
    /// `ST(beta, lambda) / ||D_k||^2`.
    pub new: f64,
    /// `new - old`.
    pub delta: f64,
}

impl CandidateUpdate {
    pub fn magnitude(&self) -> f64 {
        self.delta.abs()
    }
}

/// Disjoint boxes covering a region, visited cyclically by the locally
/// greedy strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct SubPartition {
    cells: Vec<Region>,
}

impl SubPartition {
    /// Boxes of edge `cell[i]` along each axis; the last box on an axis
    /// absorbs the remainder.
    pub fn new(region: &Region, cell: Pos) -> Self {
        let shape = region.shape();
        let mut bounds: Vec<Vec<(usize, usize)>> = Vec::with_capacity(MAX_DIMS);
        for i in 0..MAX_DIMS {
            let c = cell[i].max(1);
            let m = (shape[i] / c).max(1);
            let mut axis = Vec::with_capacity(m);
            for j in 0..m {
                let lo = region.lo[i] + j * c;
                let hi = if j + 1 == m { region.hi[i] } else { lo + c };
                axis.push((lo, hi));
            }
            bounds.push(axis);
        }
        let mut cells = Vec::new();
        for &(a0, a1) in &bounds[0] {
            for &(b0, b1) in &bounds[1] {
                for &(c0, c1) in &bounds[2] {
                    cells.push(Region::new([a0, b0, c0], [a1, b1, c1]));
                }
            }
        }
        SubPartition { cells }
    }

    /// Cells of edge `2 L_i`, i.e. of size `2^d |Theta|`.
    pub fn for_support(region: &Region, support: &Domain) -> Self {
        let l = support.shape();
        let mut cell = [1; MAX_DIMS];
        for i in 0..support.dims() {
            cell[i] = 2 * l[i];
        }
        Self::new(region, cell)
    }

    /// A single cell covering `region` (plain greedy selection).
    pub fn single(region: &Region) -> Self {
        SubPartition {
            cells: vec![*region],
        }
    }

    /// One cell per position (cyclic selection).
    pub fn unit(region: &Region) -> Self {
        Self::new(region, [1; MAX_DIMS])
    }

    pub fn cells(&self) -> &[Region] {
        &self.cells
    }

    /// Cells clipped to `clip`, dropping the empty ones.
    pub fn clipped(&self, clip: &Region) -> Vec<Region> {
        self.cells
            .iter()
            .map(|c| c.intersect(clip))
            .filter(|c| !c.is_empty())
            .collect()
    }
}

/// How the next coordinate is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum SelectionStrategy {
    /// Largest `|dZ|` over the whole domain.
    Greedy,
    /// Uniform over `(k, w)`, seeded.
    Randomized { seed: u64 },
    /// Greedy within one cell at a time, cells visited cyclically. `None`
    /// uses cells of size `2^d |Theta|`.
    LocallyGreedy { partition: Option<SubPartition> },
}

impl SelectionStrategy {
    pub fn locally_greedy() -> Self {
        SelectionStrategy::LocallyGreedy { partition: None }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SelectionStrategy::Greedy => "greedy",
            SelectionStrategy::Randomized { .. } => "randomized",
            SelectionStrategy::LocallyGreedy { .. } => "lgcd",
        }
    }
}

/// One convergence checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub t_sec: f64,
    pub max_dz: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLog {
    pub records: Vec<LogRecord>,
    pub converged: bool,
    /// Selection steps performed (cell visits for the locally greedy
    /// strategy).
    pub iterations: u64,
    /// Coordinate updates applied.
    pub updates: u64,
    pub frozen_atoms: Vec<usize>,
    pub t_sec: f64,
}

impl ConvergenceLog {
    /// One JSON object per checkpoint, newline separated.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.records.last().map(|r| r.objective)
    }
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub strategy: SelectionStrategy,
    /// Stopping tolerance on `|dZ|`; `None` uses
    /// [`CscContext::default_tolerance`].
    pub eps: Option<f64>,
    pub max_iter: u64,
    /// Checkpoint period in selection steps for the greedy and randomized
    /// strategies. The locally greedy strategy checkpoints once per pass.
    pub checkpoint_every: u64,
    pub conv: ConvOptions,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            strategy: SelectionStrategy::locally_greedy(),
            eps: None,
            max_iter: 100_000_000,
            checkpoint_every: 1000,
            conv: ConvOptions::default(),
        }
    }
}

fn z_beta_maps(ctx: &CscContext, slab: Slab) -> (ActivationMap, AuxBeta) {
    let dom = *ctx.domain();
    let k = ctx.atoms();
    (
        ActivationMap::from_vec(dom, k, slab.z).expect("slab covers the domain"),
        AuxBeta(ActivationMap::from_vec(dom, k, slab.beta).expect("slab covers the domain")),
    )
}

/// `Z = 0`, `beta = X * D~`.
pub fn init_state(x: &Signal, d: &Dictionary) -> Result<(ActivationMap, AuxBeta)> {
    let ctx = CscContext::for_signal(x, d)?;
    let slab = Slab::init(&ctx, x, x.domain().region(), None, ConvOptions::default())?;
    Ok(z_beta_maps(&ctx, slab))
}

/// The coordinate of `region` with the largest `|dZ|`.
pub fn best_candidate(
    ctx: &CscContext,
    region: &Region,
    z: &ActivationMap,
    beta: &AuxBeta,
    lambda: f64,
) -> Result<CandidateUpdate> {
    slab::best_on(ctx, lambda, &z.domain().region(), z.data(), beta.0.data(), region).ok_or_else(|| {
        Error::EmptyRegion(format!("{region:?} holds no coding positions"))
    })
}

/// Applies `u` to `Z` and maintains `beta` incrementally.
pub fn apply_update(ctx: &CscContext, z: &mut ActivationMap, beta: &mut AuxBeta, u: &CandidateUpdate) {
    let region = z.domain().region();
    slab::apply_on(ctx, &region, z.data_mut(), beta.0.data_mut(), u.atom, u.pos, u.delta);
}

/// Cost decrease `E(before) - E(after)` of a single update, in closed form:
/// `||D_k||^2 / 2 (z^2 - z'^2) - beta (z - z') + lambda (|z| - |z'|)`.
pub fn cost_delta(ctx: &CscContext, u: &CandidateUpdate, beta: &AuxBeta, lambda: f64) -> f64 {
    cost_delta_raw(
        ctx.sq_norms()[u.atom],
        beta.get(u.atom, u.pos),
        u.old,
        u.old + u.delta,
        lambda,
    )
}

#[inline]
pub(crate) fn cost_delta_raw(sq_norm: f64, beta: f64, z: f64, znew: f64, lambda: f64) -> f64 {
    0.5 * sq_norm * (z * z - znew * znew) - beta * (z - znew) + lambda * (z.abs() - znew.abs())
}

/// `beta` recomputed from its definition for a given `Z`:
/// `(X - Z * D) * D~ + ||D_k||^2 Z`.
pub fn beta_from_scratch(x: &Signal, d: &Dictionary, z: &ActivationMap) -> Result<AuxBeta> {
    let r = x.sub(&convolve(z, d)?)?;
    let mut b = correlate(&r, d)?;
    let norms = d.sq_norms();
    let n = x.domain().len();
    for (i, v) in b.data_mut().iter_mut().enumerate() {
        *v += norms[i / n] * z.data()[i];
    }
    Ok(AuxBeta(b))
}

/// `max |Z_k[w] - ST(beta_k[w], lambda) / ||D_k||^2|` over the coding
/// region, with `beta` recomputed from scratch.
pub fn fixed_point_residual(x: &Signal, d: &Dictionary, z: &ActivationMap, lambda: f64) -> Result<f64> {
    let ctx = CscContext::for_signal(x, d)?;
    let beta = beta_from_scratch(x, d, z)?;
    let mut m = 0.0f64;
    for k in 0..d.atoms() {
        let nk = ctx.sq_norms()[k];
        if nk == 0.0 {
            continue;
        }
        for pos in ctx.coding().positions() {
            let v = soft_threshold(beta.get(k, pos), lambda) / nk;
            m = m.max((v - z.get(k, pos)).abs());
        }
    }
    Ok(m)
}

/// Solves `min_Z 1/2 ||X - Z * D||^2 + lambda ||Z||_1` from `Z = 0`.
pub fn solve(
    x: &Signal,
    d: &Dictionary,
    lambda: f64,
    strategy: SelectionStrategy,
    eps: f64,
    max_iter: u64,
) -> Result<(ActivationMap, ConvergenceLog)> {
    let opts = SolveOptions {
        strategy,
        eps: Some(eps),
        max_iter,
        ..SolveOptions::default()
    };
    solve_with(x, d, lambda, &opts, None)
}

/// Like [`solve`], optionally warm-started from `warm`.
pub fn solve_with(
    x: &Signal,
    d: &Dictionary,
    lambda: f64,
    opts: &SolveOptions,
    warm: Option<&ActivationMap>,
) -> Result<(ActivationMap, ConvergenceLog)> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let ctx = CscContext::for_signal(x, d)?;
    let eps = opts.eps.unwrap_or_else(|| ctx.default_tolerance(lambda));
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be > 0, got {eps}")));
    }
    if let Some(w) = warm {
        if w.domain() != x.domain() || w.atoms() != d.atoms() {
            return Err(Error::Shape("warm start does not match the problem".into()));
        }
    }
    let start = Instant::now();
    let mut slab = Slab::init(&ctx, x, x.domain().region(), warm, opts.conv)?;
    let mut obj = match warm {
        Some(w) => objective(x, w, d, lambda)?,
        None => 0.5 * x.sq_norm(),
    };
    let mut log = ConvergenceLog {
        frozen_atoms: ctx.frozen_atoms().to_vec(),
        ..ConvergenceLog::default()
    };
    let mut runner = Runner {
        ctx: &ctx,
        lambda,
        eps,
        slab: &mut slab,
        obj: &mut obj,
        log: &mut log,
        start,
    };
    match &opts.strategy {
        SelectionStrategy::Greedy => {
            let cells = vec![*ctx.coding()];
            runner.locally_greedy(&cells, opts.max_iter);
        }
        SelectionStrategy::LocallyGreedy { partition } => {
            let part = partition
                .clone()
                .unwrap_or_else(|| SubPartition::for_support(&x.domain().region(), d.support()));
            let cells = part.clipped(ctx.coding());
            runner.locally_greedy(&cells, opts.max_iter);
        }
        SelectionStrategy::Randomized { seed } => {
            runner.randomized(*seed, opts.max_iter, opts.checkpoint_every);
        }
    }
    log.t_sec = start.elapsed().as_secs_f64();
    let (z, _) = z_beta_maps(&ctx, slab);
    Ok((z, log))
}

struct Runner<'a> {
    ctx: &'a CscContext,
    lambda: f64,
    eps: f64,
    slab: &'a mut Slab,
    obj: &'a mut f64,
    log: &'a mut ConvergenceLog,
    start: Instant,
}

impl Runner<'_> {
    fn commit(&mut self, u: &CandidateUpdate) {
        let k = u.atom;
        let b = self.slab.beta_at(k, u.pos);
        let z = self.slab.z_at(k, u.pos);
        *self.obj -= cost_delta_raw(self.ctx.sq_norms()[k], b, z, z + u.delta, self.lambda);
        self.slab.apply(self.ctx, k, u.pos, u.delta);
        self.log.updates += 1;
    }

    fn checkpoint(&mut self, max_dz: f64) {
        self.log.records.push(LogRecord {
            iter: self.log.iterations,
            t_sec: self.start.elapsed().as_secs_f64(),
            max_dz,
            objective: *self.obj,
        });
    }

    /// Cells visited cyclically; a cell whose best `|dZ|` is below `eps` is
    /// skipped. Converged after a full pass of skipped cells.
    fn locally_greedy(&mut self, cells: &[Region], max_iter: u64) {
        if cells.is_empty() {
            self.log.converged = true;
            self.checkpoint(0.0);
            return;
        }
        let mut quiet = 0usize;
        let mut pass_max = 0.0f64;
        let mut m = 0usize;
        loop {
            if self.log.iterations >= max_iter {
                self.checkpoint(pass_max);
                return;
            }
            self.log.iterations += 1;
            let cand = self.slab.best_in(self.ctx, self.lambda, &cells[m]);
            let mag = cand.map_or(0.0, |c| c.magnitude());
            pass_max = pass_max.max(mag);
            match cand {
                Some(c) if mag >= self.eps => {
                    self.commit(&c);
                    quiet = 0;
                }
                _ => quiet += 1,
            }
            m += 1;
            if m == cells.len() {
                m = 0;
                self.checkpoint(pass_max);
                pass_max = 0.0;
            }
            if quiet >= cells.len() {
                self.log.converged = true;
                if m != 0 {
                    self.checkpoint(pass_max);
                }
                return;
            }
        }
    }

    /// Uniform random coordinates; every `K |coding|` draws a full scan
    /// decides convergence.
    fn randomized(&mut self, seed: u64, max_iter: u64, checkpoint_every: u64) {
        let coding = *self.ctx.coding();
        let cs = coding.shape();
        let k_n = self.ctx.atoms();
        let epoch = (k_n * coding.len()) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut since_scan = 0u64;
        loop {
            if since_scan >= epoch || epoch == 0 {
                since_scan = 0;
                let m = self.slab.max_delta(self.ctx, self.lambda, &coding);
                if m < self.eps {
                    self.log.converged = true;
                    self.checkpoint(m);
                    return;
                }
            }
            if self.log.iterations >= max_iter {
                self.checkpoint(f64::NAN);
                return;
            }
            self.log.iterations += 1;
            since_scan += 1;
            let k = rng.random_range(0..k_n);
            let mut pos = [0; MAX_DIMS];
            for i in 0..MAX_DIMS {
                pos[i] = coding.lo[i] + rng.random_range(0..cs[i]);
            }
            let (znew, dz) = self.slab.proposal(self.ctx, self.lambda, k, pos);
            if dz != 0.0 {
                let u = CandidateUpdate {
                    atom: k,
                    pos,
                    old: znew - dz,
                    new: znew,
                    delta: dz,
                };
                self.commit(&u);
            }
            if checkpoint_every > 0 && self.log.iterations % checkpoint_every == 0 {
                self.checkpoint(dz.abs());
            }
        }
    }
}
