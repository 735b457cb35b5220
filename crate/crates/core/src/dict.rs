//! Dictionary update from sufficient statistics.
//!
//! For a fixed sparse code `Z` the data-fit term
//! `F(D) = 1/2 ||X - Z * D||^2` only depends on two small arrays:
//!
//! * `phi[k][k'][tau] = sum_w Z_k[w] Z_k'[w + tau]`, `tau` in `prod ]-L_i, L_i[`,
//! * `psi[k][p][tau] = sum_w Z_k[w] X_p[w + tau]`, `tau` in `Theta`,
//!
//! plus `||X||^2`. Their size does not depend on the signal, so once they
//! are reduced from the workers the projected gradient descent on `D` runs
//! on a single thread.
//!
//! The identities hold for codes that vanish outside the coding region, as
//! produced by the sparse coding solvers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::WorkerGrid;
use crate::par::{self, Execution};
use crate::tensor::{ActivationMap, Dictionary, Domain, Region, Signal, MAX_DIMS};

/// `phi`, the restricted autocorrelation `Z~ * Z`.
///
/// Layout: `[k][k'][tau + L - 1]`, lag index row-major over `2L_i - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramPhi {
    atoms: usize,
    support: Domain,
    data: Vec<f64>,
}

impl GramPhi {
    pub fn zeros(atoms: usize, support: Domain) -> Self {
        let n = support.lag_shape().iter().product::<usize>();
        GramPhi {
            atoms,
            support,
            data: vec![0.0; atoms * atoms * n],
        }
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn support(&self) -> &Domain {
        &self.support
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn lag_len(&self) -> usize {
        self.support.lag_shape().iter().product()
    }

    /// Lag slice of the pair `(k, k2)`.
    pub fn pair(&self, k: usize, k2: usize) -> &[f64] {
        let n = self.lag_len();
        let b = (k * self.atoms + k2) * n;
        &self.data[b..b + n]
    }

    /// `phi[k][k2][tau]`, zero outside the lag domain.
    pub fn get(&self, k: usize, k2: usize, tau: [isize; MAX_DIMS]) -> f64 {
        let l = self.support.shape();
        let lag = self.support.lag_shape();
        let mut idx = [0usize; MAX_DIMS];
        for i in 0..MAX_DIMS {
            let v = tau[i] + l[i] as isize - 1;
            if v < 0 || v as usize >= lag[i] {
                return 0.0;
            }
            idx[i] = v as usize;
        }
        self.pair(k, k2)[Region::new([0; MAX_DIMS], lag).local(idx)]
    }

    fn add(&mut self, other: &GramPhi) {
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// `psi`, the restriction of `Z~ * X` to `Theta`. Same layout as a
/// [`Dictionary`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossPsi(pub Dictionary);

impl CrossPsi {
    pub fn data(&self) -> &[f64] {
        self.0.data()
    }
}

/// Everything the dictionary step needs from `Z` and `X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub phi: GramPhi,
    pub psi: CrossPsi,
    /// `||X||^2`.
    pub x_sqnorm: f64,
}

fn check_inputs(z: &ActivationMap, x: &Signal, support: &Domain) -> Result<()> {
    if z.domain() != x.domain() {
        return Err(Error::Shape("activation and signal domains differ".into()));
    }
    if !x.domain().fits(support) {
        return Err(Error::Shape(format!(
            "atom support {:?} does not fit in {:?}",
            support.sizes(),
            x.domain().sizes()
        )));
    }
    Ok(())
}

/// Partial statistics of the positions `w` in `part`.
///
/// Reads `Z` on `part` grown by `L - 1` and `X` on `part` grown by `L`.
pub fn partial_stats(z: &ActivationMap, x: &Signal, support: &Domain, part: &Region) -> SufficientStats {
    let kn = z.atoms();
    let p = x.channels();
    let dom = *x.domain();
    let full = dom.region();
    let l = support.shape();
    let lag_shape = support.lag_shape();
    let lag_region = Region::new([0; MAX_DIMS], lag_shape);
    let nlag = lag_region.len();
    let theta = support.region();
    let mut phi = GramPhi::zeros(kn, *support);
    let mut psi = Dictionary::zeros(kn, p, *support);
    let xd = x.data();
    let x_sqnorm = part
        .positions()
        .map(|w| {
            let b = dom.flat(w) * p;
            xd[b..b + p].iter().map(|v| v * v).sum::<f64>()
        })
        .sum();
    for k in 0..kn {
        let zk = z.channel(k);
        for w in part.positions() {
            let val = zk[dom.flat(w)];
            if val == 0.0 {
                continue;
            }
            let lo = [0, 1, 2].map(|i| w[i].saturating_sub(l[i] - 1));
            let hi = [0, 1, 2].map(|i| (w[i] + l[i]).min(full.hi[i]));
            let hood = Region::new(lo, hi);
            for k2 in 0..kn {
                let zk2 = z.channel(k2);
                let base = (k * kn + k2) * nlag;
                for v in hood.positions() {
                    let o = zk2[dom.flat(v)];
                    if o != 0.0 {
                        let lag = [0, 1, 2].map(|i| v[i] + l[i] - 1 - w[i]);
                        phi.data[base + lag_region.local(lag)] += val * o;
                    }
                }
            }
            let atom = psi.atom_mut(k);
            for tau in theta.positions() {
                let v = [0, 1, 2].map(|i| w[i] + tau[i]);
                if !full.contains(v) {
                    continue;
                }
                let src = dom.flat(v) * p;
                let dst = theta.local(tau) * p;
                for c in 0..p {
                    atom[dst + c] += val * xd[src + c];
                }
            }
        }
    }
    SufficientStats {
        phi,
        psi: CrossPsi(psi),
        x_sqnorm,
    }
}

/// Statistics of the whole problem, computed per worker of `grid` and summed
/// in worker order.
pub fn compute_sufficient_stats(
    z: &ActivationMap,
    x: &Signal,
    grid: &WorkerGrid,
    exec: Execution,
) -> Result<SufficientStats> {
    let support = grid.support();
    check_inputs(z, x, support)?;
    if grid.domain() != x.domain() {
        return Err(Error::Shape("grid was built for another domain".into()));
    }
    let parts = par::map_range(exec, grid.workers(), |w| {
        partial_stats(z, x, support, &grid.sub_domain(w))
    });
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("a grid has at least one worker");
    for s in it {
        acc.phi.add(&s.phi);
        acc.psi
            .0
            .data_mut()
            .iter_mut()
            .zip(s.psi.data())
            .for_each(|(a, b)| *a += b);
        acc.x_sqnorm += s.x_sqnorm;
    }
    Ok(acc)
}

/// `(phi, psi)` for `Z` and `X`, reduced over the workers of `grid`.
pub fn compute_stats(z: &ActivationMap, x: &Signal, grid: &WorkerGrid) -> Result<(GramPhi, CrossPsi)> {
    let s = compute_sufficient_stats(z, x, grid, Execution::default())?;
    Ok((s.phi, s.psi))
}

fn check_stats(d: &Dictionary, phi: &GramPhi, psi: &CrossPsi) -> Result<()> {
    if phi.atoms != d.atoms() || phi.support != *d.support() {
        return Err(Error::Shape("phi does not match the dictionary".into()));
    }
    if psi.0.atoms() != d.atoms() || psi.0.channels() != d.channels() || psi.0.support() != d.support() {
        return Err(Error::Shape("psi does not match the dictionary".into()));
    }
    Ok(())
}

/// `(phi * D)_k[tau] = sum_k' sum_u phi[k][k'][tau - u] D_k'[u]`.
fn phi_conv(d: &Dictionary, phi: &GramPhi) -> Dictionary {
    let kn = d.atoms();
    let p = d.channels();
    let theta = d.support().region();
    let l = d.support().shape();
    let lag_region = Region::new([0; MAX_DIMS], d.support().lag_shape());
    let mut out = Dictionary::zeros(kn, p, *d.support());
    for k in 0..kn {
        for k2 in 0..kn {
            let ph = phi.pair(k, k2);
            let src = d.atom(k2);
            let dst = out.atom_mut(k);
            for tau in theta.positions() {
                let o = theta.local(tau) * p;
                for u in theta.positions() {
                    let lag = [0, 1, 2].map(|i| tau[i] + l[i] - 1 - u[i]);
                    let g = ph[lag_region.local(lag)];
                    if g == 0.0 {
                        continue;
                    }
                    let s = theta.local(u) * p;
                    for c in 0..p {
                        dst[o + c] += g * src[s + c];
                    }
                }
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `grad F(D) = phi * D - psi`.
pub fn gradient_d(d: &Dictionary, phi: &GramPhi, psi: &CrossPsi) -> Result<Dictionary> {
    check_stats(d, phi, psi)?;
    let mut g = phi_conv(d, phi);
    g.data_mut().iter_mut().zip(psi.data()).for_each(|(a, b)| *a -= b);
    Ok(g)
}

/// `F(Z, D) = 1/2 (||X||^2 - 2 <psi, D> + <D, phi * D>)`.
pub fn objective_from_stats(d: &Dictionary, phi: &GramPhi, psi: &CrossPsi, x_sqnorm: f64) -> Result<f64> {
    check_stats(d, phi, psi)?;
    let pd = phi_conv(d, phi);
    Ok(0.5 * (x_sqnorm - 2.0 * dot(psi.data(), d.data()) + dot(d.data(), pd.data())))
}

/// Scales every atom with `||D_k|| > 1` back onto the unit sphere.
pub fn project_unit_ball(d: &Dictionary) -> Dictionary {
    let mut out = d.clone();
    project_in_place(&mut out);
    out
}

fn project_in_place(d: &mut Dictionary) {
    for k in 0..d.atoms() {
        let a = d.atom_mut(k);
        let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1.0 {
            a.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Largest eigenvalue of `D -> phi * D`, by power iteration.
pub fn operator_norm_estimate(phi: &GramPhi, channels: usize, iterations: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = Dictionary::zeros(phi.atoms, channels, phi.support);
    v.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    let mut est = 0.0;
    for _ in 0..iterations.max(1) {
        let n = dot(v.data(), v.data()).sqrt();
        if n == 0.0 {
            return 0.0;
        }
        v.data_mut().iter_mut().for_each(|x| *x /= n);
        let av = phi_conv(&v, phi);
        est = dot(av.data(), v.data());
        v = av;
    }
    est.max(0.0)
}

/// Projected gradient descent parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearchConfig {
    /// First trial step; `None` uses the inverse of the estimated
    /// Lipschitz constant.
    pub initial_step: Option<f64>,
    pub shrink: f64,
    /// Sufficient-decrease constant.
    pub armijo: f64,
    pub max_backtracks: usize,
    pub max_iter: usize,
    /// Stops once `F` decreases by less than `tol * max(1, F)`.
    pub tol: f64,
    pub power_iterations: usize,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        LineSearchConfig {
            initial_step: None,
            shrink: 0.5,
            armijo: 1e-4,
            max_backtracks: 30,
            max_iter: 200,
            tol: 1e-10,
            power_iterations: 20,
        }
    }
}

impl LineSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::Config(format!("shrink must be in (0, 1), got {}", self.shrink)));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(Error::Config(format!("armijo constant must be in (0, 1), got {}", self.armijo)));
        }
        if let Some(s) = self.initial_step {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("initial step must be > 0, got {s}")));
            }
        }
        Ok(())
    }
}

/// One accepted PGD step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdStep {
    pub iteration: usize,
    pub step: f64,
    pub backtracks: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgdOutcome {
    pub dictionary: Dictionary,
    pub steps: Vec<PgdStep>,
    pub initial_objective: f64,
    pub objective: f64,
    /// The first iterate found no step with sufficient decrease.
    pub stalled: bool,
}

/// Minimizes `F(Z, .)` over the product of unit balls.
pub fn pgd_update(
    d: &Dictionary,
    phi: &GramPhi,
    psi: &CrossPsi,
    x_sqnorm: f64,
    cfg: &LineSearchConfig,
) -> Result<PgdOutcome> {
    cfg.validate()?;
    check_stats(d, phi, psi)?;
    let f0 = objective_from_stats(d, phi, psi, x_sqnorm)?;
    let mut out = PgdOutcome {
        dictionary: d.clone(),
        steps: Vec::new(),
        initial_objective: f0,
        objective: f0,
        stalled: false,
    };
    let step0 = match cfg.initial_step {
        Some(s) => s,
        None => {
            let lip = operator_norm_estimate(phi, d.channels(), cfg.power_iterations);
            if lip <= 0.0 {
                return Ok(out);
            }
            1.0 / lip
        }
    };
    let mut cur = d.clone();
    let mut f = f0;
    for it in 0..cfg.max_iter {
        let g = gradient_d(&cur, phi, psi)?;
        if g.data().iter().all(|v| *v == 0.0) {
            break;
        }
        let mut step = step0;
        let mut accepted = None;
        for bt in 0..=cfg.max_backtracks {
            let mut trial = cur.clone();
            trial
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a -= step * b);
            project_in_place(&mut trial);
            let moved: f64 = cur.data().iter().zip(trial.data()).zip(g.data()).map(|((a, b), gg)| (a - b) * gg).sum();
            let ft = objective_from_stats(&trial, phi, psi, x_sqnorm)?;
            if !ft.is_finite() {
                return Err(Error::NonFinite("dictionary objective".into()));
            }
            if moved <= 0.0 {
                // The projected step does not move: stationary.
                break;
            }
            if ft <= f - cfg.armijo * moved {
                accepted = Some((trial, ft, bt, step));
                break;
            }
            step *= cfg.shrink;
        }
        let Some((trial, ft, bt, step)) = accepted else {
            out.stalled = it == 0;
            break;
        };
        let decrease = f - ft;
        cur = trial;
        f = ft;
        out.steps.push(PgdStep {
            iteration: it,
            step,
            backtracks: bt,
            objective: ft,
        });
        if decrease < cfg.tol * f.abs().max(1.0) {
            break;
        }
    }
    out.dictionary = cur;
    out.objective = f;
    Ok(out)
}
