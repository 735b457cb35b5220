//! Brute-force oracles for the solver and the protocol.
//!
//! Every check draws seeded random instances, compares the implementation
//! with an independent computation and reports the worst relative error.
//! The dense LASSO oracle and the neighborhood counting deliberately avoid
//! the convolution and grid code they check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::csc::{beta_from_scratch, cost_delta, solve, CandidateUpdate, CscContext, SelectionStrategy};
use crate::error::Result;
use crate::grid::{acceptance_bound, interference_delta, make_grid, Partition, WorkerGrid};
use crate::tensor::{lambda_max, objective, soft_threshold, ActivationMap, Dictionary, Domain, Pos, Region, Signal};

/// Outcome of one oracle check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub seed: u64,
    pub trials: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// The trial with the largest error, enough to replay it.
    pub worst: serde_json::Value,
    /// Extra findings of the check.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

impl OracleReport {
    fn new(name: &str, seed: u64, tolerance: f64) -> Self {
        OracleReport {
            name: name.into(),
            seed,
            trials: 0,
            max_rel_error: 0.0,
            tolerance,
            passed: true,
            worst: serde_json::Value::Null,
            details: serde_json::Value::Null,
        }
    }

    fn record(&mut self, err: f64, instance: impl FnOnce() -> serde_json::Value) {
        self.trials += 1;
        if !(err <= self.max_rel_error) {
            self.max_rel_error = err;
            self.worst = instance();
        }
        self.passed = self.max_rel_error < self.tolerance;
    }
}

fn dom(s: &[usize]) -> Domain {
    Domain::new(s).expect("positive sizes")
}

fn random_dictionary(rng: &mut ChaCha8Rng, k: usize, p: usize, support: Domain) -> Dictionary {
    let mut d = Dictionary::zeros(k, p, support);
    for a in 0..k {
        let atom = d.atom_mut(a);
        atom.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let n = atom.iter().map(|v| v * v).sum::<f64>().sqrt();
        atom.iter_mut().for_each(|v| *v /= n);
    }
    d
}

fn random_signal(rng: &mut ChaCha8Rng, domain: Domain, p: usize) -> Signal {
    let mut x = Signal::zeros(domain, p);
    x.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    x
}

fn random_code(rng: &mut ChaCha8Rng, domain: Domain, support: &Domain, k: usize, rate: f64) -> ActivationMap {
    let mut z = ActivationMap::zeros(domain, k);
    for w in domain.coding_region(support).positions() {
        for a in 0..k {
            if rng.random_bool(rate) {
                z.set(a, w, rng.random_range(-1.0..1.0));
            }
        }
    }
    z
}

fn random_pos(rng: &mut ChaCha8Rng, r: &Region) -> Pos {
    [0, 1, 2].map(|i| rng.random_range(r.lo[i]..r.hi[i]))
}

/// Shapes of a small random instance, alternating between one and two
/// dimensions.
fn small_shapes(rng: &mut ChaCha8Rng, trial: usize) -> (Vec<usize>, Vec<usize>, usize, usize) {
    if trial % 2 == 0 {
        let l = rng.random_range(2..8);
        (vec![rng.random_range(3 * l..60)], vec![l], rng.random_range(1..4), rng.random_range(1..3))
    } else {
        let l = [rng.random_range(2..4), rng.random_range(2..4)];
        (
            vec![rng.random_range(3 * l[0]..14), rng.random_range(3 * l[1]..14)],
            l.to_vec(),
            rng.random_range(1..3),
            rng.random_range(1..3),
        )
    }
}

/// Closed-form single-update cost change against the difference of two
/// objective evaluations.
pub fn check_cost_delta(seed: u64, trials: usize) -> Result<OracleReport> {
    let mut rep = OracleReport::new("cost_delta", seed, 1e-10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let (sizes, support, k, p) = small_shapes(&mut rng, t);
        let sup = dom(&support);
        let d = random_dictionary(&mut rng, k, p, sup);
        let x = random_signal(&mut rng, dom(&sizes), p);
        let z = random_code(&mut rng, dom(&sizes), &sup, k, 0.2);
        let lambda = rng.random_range(0.0..0.5);
        let ctx = CscContext::for_signal(&x, &d)?;
        let beta = beta_from_scratch(&x, &d, &z)?;
        let atom = rng.random_range(0..k);
        let pos = random_pos(&mut rng, &x.domain().coding_region(&sup));
        let old = z.get(atom, pos);
        let new = match t % 3 {
            0 if t == 0 => old,
            0 => rng.random_range(-2.0..2.0),
            _ => soft_threshold(beta.get(atom, pos), lambda) / ctx.sq_norms()[atom],
        };
        let u = CandidateUpdate {
            atom,
            pos,
            old,
            new,
            delta: new - old,
        };
        let closed = cost_delta(&ctx, &u, &beta, lambda);
        let mut after = z.clone();
        after.set(atom, pos, new);
        let direct = objective(&x, &z, &d, lambda)? - objective(&x, &after, &d, lambda)?;
        if t == 0 && (closed != 0.0 || direct != 0.0) {
            rep.record(f64::INFINITY, || json!({"trial": 0, "closed": closed, "direct": direct}));
        }
        let err = (closed - direct).abs() / direct.abs().max(1.0);
        rep.record(err, || {
            json!({"trial": t, "sizes": sizes, "support": support, "atoms": k, "channels": p,
                   "lambda": lambda, "atom": atom, "pos": pos, "old": old, "new": new,
                   "closed": closed, "direct": direct})
        });
    }
    Ok(rep)
}

/// Decomposition of the cost change of simultaneous updates into
/// individual changes minus interference, against direct evaluation.
///
/// Even trials cluster the updates around one position so that their
/// neighborhoods overlap; odd trials spread them apart, where the
/// interference must vanish exactly.
pub fn check_interference(seed: u64, trials: usize) -> Result<OracleReport> {
    let mut rep = OracleReport::new("interference", seed, 1e-10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nonzero_clusters = 0usize;
    let mut exact_zero_spread = true;
    for t in 0..trials {
        let d1 = t % 4 < 2;
        let (sizes, support) = if d1 { (vec![120], vec![6]) } else { (vec![30, 30], vec![4, 3]) };
        let clustered = t % 2 == 0;
        let (k, p) = (rng.random_range(1..4), rng.random_range(1..3));
        let sup = dom(&support);
        let d = random_dictionary(&mut rng, k, p, sup);
        let x = random_signal(&mut rng, dom(&sizes), p);
        let z = random_code(&mut rng, dom(&sizes), &sup, k, 0.1);
        let lambda = rng.random_range(0.0..0.3);
        let ctx = CscContext::for_signal(&x, &d)?;
        let beta = beta_from_scratch(&x, &d, &z)?;
        let coding = x.domain().coding_region(&sup);
        let l = sup.shape();
        let n = 2 + t / 2 % 4;
        let mut ups: Vec<(usize, Pos, f64)> = Vec::new();
        let center = random_pos(&mut rng, &coding);
        let mut guard = 0;
        while ups.len() < n && guard < 10_000 {
            guard += 1;
            let atom = rng.random_range(0..k);
            let pos = if clustered {
                let lo = [0, 1, 2].map(|i| center[i].saturating_sub(l[i] - 1).max(coding.lo[i]));
                let hi = [0, 1, 2].map(|i| (center[i] + l[i]).min(coding.hi[i]));
                random_pos(&mut rng, &Region::new(lo, hi))
            } else {
                random_pos(&mut rng, &coding)
            };
            let fresh = ups.iter().all(|(a, q, _)| !(*a == atom && *q == pos));
            let apart = ups.iter().all(|(_, q, _)| (0..3).any(|i| q[i].abs_diff(pos[i]) >= l[i]));
            if fresh && (clustered || apart) {
                ups.push((atom, pos, rng.random_range(-1.5..1.5)));
            }
        }
        let individual: f64 = ups
            .iter()
            .map(|&(atom, pos, dz)| {
                let old = z.get(atom, pos);
                let u = CandidateUpdate { atom, pos, old, new: old + dz, delta: dz };
                cost_delta(&ctx, &u, &beta, lambda)
            })
            .sum();
        let inter = interference_delta(&ups, &d);
        let mut after = z.clone();
        for &(atom, pos, dz) in &ups {
            after.set(atom, pos, after.get(atom, pos) + dz);
        }
        let direct = objective(&x, &z, &d, lambda)? - objective(&x, &after, &d, lambda)?;
        if clustered && inter != 0.0 {
            nonzero_clusters += 1;
        }
        if !clustered && inter != 0.0 {
            exact_zero_spread = false;
            rep.record(f64::INFINITY, || json!({"trial": t, "reason": "spread updates interfere", "interference": inter}));
        }
        let err = (individual - inter - direct).abs() / direct.abs().max(1.0);
        rep.record(err, || {
            json!({"trial": t, "sizes": sizes, "support": support, "atoms": k, "channels": p,
                   "lambda": lambda, "updates": ups, "individual": individual,
                   "interference": inter, "direct": direct})
        });
    }
    rep.details = json!({"clusters_with_interference": nonzero_clusters, "spread_sets_exactly_zero": exact_zero_spread});
    Ok(rep)
}

/// Monte-Carlo estimate of the soft-lock acceptance probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceEstimate {
    pub rate: f64,
    pub bound: f64,
    /// Standard error of `rate`.
    pub sigma: f64,
    pub samples: usize,
    /// `rate >= bound - 3 sigma`.
    pub passed: bool,
}

/// Draws one uniform candidate per worker, with i.i.d. magnitudes, and
/// arbitrates them by the soft-lock order: a candidate survives unless a
/// candidate of another worker inside its neighborhood is larger.
pub fn estimate_acceptance(grid: &WorkerGrid, samples: usize, seed: u64) -> AcceptanceEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = grid.workers();
    let l = grid.support().shape();
    let subs: Vec<Region> = (0..w).map(|i| grid.sub_domain(i)).collect();
    let mut accepted = 0u64;
    let mut pos = vec![[0usize; 3]; w];
    let mut mag = vec![0.0f64; w];
    for _ in 0..samples {
        for i in 0..w {
            pos[i] = random_pos(&mut rng, &subs[i]);
            mag[i] = rng.random::<f64>();
        }
        for i in 0..w {
            let beaten = (0..w).any(|j| {
                j != i
                    && (0..3).all(|a| pos[i][a].abs_diff(pos[j][a]) < l[a])
                    && (mag[j] > mag[i] || (mag[j] == mag[i] && j < i))
            });
            if !beaten {
                accepted += 1;
            }
        }
    }
    let n = (samples * w) as f64;
    let rate = accepted as f64 / n;
    let sigma = (rate * (1.0 - rate) / n).sqrt();
    let bound = acceptance_bound(grid).value;
    AcceptanceEstimate {
        rate,
        bound,
        sigma,
        samples,
        passed: rate >= bound - 3.0 * sigma,
    }
}

/// Number of sub-domains met by the neighborhood of every position,
/// counted from the box geometry. Row-major over the domain.
pub fn j_omega(grid: &WorkerGrid) -> Vec<usize> {
    let dm = *grid.domain();
    let l = grid.support().shape();
    let t = dm.shape();
    let subs: Vec<Region> = (0..grid.workers()).map(|i| grid.sub_domain(i)).collect();
    dm.region()
        .positions()
        .map(|p| {
            let lo = [0, 1, 2].map(|i| p[i].saturating_sub(l[i] - 1));
            let hi = [0, 1, 2].map(|i| (p[i] + l[i]).min(t[i]));
            subs.iter()
                .filter(|s| (0..3).all(|i| lo[i] < s.hi[i] && s.lo[i] < hi[i]))
                .count()
        })
        .collect()
}

/// Exhaustive `j_omega` against the corner/edge/interior pattern:
/// `2^c` where `c` counts the axes on which the neighborhood straddles a
/// cut.
pub fn check_j_omega(sizes: &[usize], workers: &[usize], support: &[usize]) -> Result<OracleReport> {
    let mut rep = OracleReport::new("j_omega", 0, 0.5);
    let dm = dom(sizes);
    let grid = make_grid(&dm, workers.iter().product(), &dom(support), Partition::Grid)?;
    let counts = grid.counts().to_vec();
    let (t, l) = (dm.shape(), dom(support).shape());
    // Uniform cuts; the pattern below assumes equal sub-domains.
    let edge: Vec<usize> = (0..3).map(|i| t[i] / counts.get(i).copied().unwrap_or(1)).collect();
    let js = j_omega(&grid);
    let mut hist = [0usize; 9];
    for (idx, p) in dm.region().positions().enumerate() {
        let crossing = (0..3)
            .filter(|&i| {
                let lo = p[i].saturating_sub(l[i] - 1);
                let hi = (p[i] + l[i]).min(t[i]) - 1;
                lo / edge[i] != hi / edge[i]
            })
            .count();
        let want = 1usize << crossing;
        let got = js[idx];
        hist[got.min(8)] += 1;
        rep.record(if got == want { 0.0 } else { 1.0 }, || json!({"pos": p, "j": got, "expected": want}));
    }
    rep.details = json!({"grid": counts, "j1": hist[1], "j2": hist[2], "j4": hist[4], "j8": hist[8]});
    Ok(rep)
}

/// Column-major dense convolution matrix over the coding region, one
/// column per `(k, w)`, built by explicit index arithmetic.
fn dense_design(x: &Signal, d: &Dictionary) -> (Vec<Vec<f64>>, Vec<(usize, Pos)>) {
    let sizes = x.domain().shape();
    let l = d.support().shape();
    let p = x.channels();
    let rows = x.data().len();
    let mut cols = Vec::new();
    let mut keys = Vec::new();
    for k in 0..d.atoms() {
        for w0 in 0..=sizes[0] - l[0] {
            for w1 in 0..=sizes[1] - l[1] {
                for w2 in 0..=sizes[2] - l[2] {
                    let mut col = vec![0.0; rows];
                    for a in 0..l[0] {
                        for b in 0..l[1] {
                            for c in 0..l[2] {
                                let row = ((w0 + a) * sizes[1] + w1 + b) * sizes[2] + w2 + c;
                                let src = ((a * l[1] + b) * l[2] + c) * p;
                                let atom = d.atom(k);
                                for ch in 0..p {
                                    col[row * p + ch] = atom[src + ch];
                                }
                            }
                        }
                    }
                    cols.push(col);
                    keys.push((k, [w0, w1, w2]));
                }
            }
        }
    }
    (cols, keys)
}

/// Generic cyclic coordinate descent for `1/2 ||y - A z||^2 + lambda ||z||_1`.
/// Returns `(z, objective)`.
pub fn dense_lasso(cols: &[Vec<f64>], y: &[f64], lambda: f64, tol: f64, max_sweeps: usize) -> (Vec<f64>, f64) {
    // Work on the nonzero pattern of each column.
    let sparse: Vec<Vec<(usize, f64)>> = cols
        .iter()
        .map(|c| c.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (i, *v)).collect())
        .collect();
    let norms: Vec<f64> = sparse.iter().map(|c| c.iter().map(|(_, v)| v * v).sum()).collect();
    let mut z = vec![0.0; cols.len()];
    let mut r = y.to_vec();
    for _ in 0..max_sweeps {
        let mut change = 0.0f64;
        for j in 0..cols.len() {
            if norms[j] == 0.0 {
                continue;
            }
            let rho: f64 = sparse[j].iter().map(|(i, v)| v * r[*i]).sum::<f64>() + norms[j] * z[j];
            let nz = rho.signum() * (rho.abs() - lambda).max(0.0) / norms[j];
            let dz = nz - z[j];
            if dz != 0.0 {
                for (i, v) in &sparse[j] {
                    r[*i] -= v * dz;
                }
                z[j] = nz;
                change = change.max(dz.abs());
            }
        }
        if change < tol {
            break;
        }
    }
    let f = 0.5 * r.iter().map(|v| v * v).sum::<f64>() + lambda * z.iter().map(|v| v.abs()).sum::<f64>();
    (z, f)
}

/// Sparse coding objective against the dense LASSO oracle on instances
/// with `|Omega| K <= 2000`.
pub fn check_lasso_equivalence(seed: u64, trials: usize) -> Result<OracleReport> {
    let mut rep = OracleReport::new("lasso_equivalence", seed, 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut zero_ok = true;
    for t in 0..trials {
        let (sizes, support, k) = if t % 2 == 0 {
            let k = rng.random_range(1..4);
            let l = rng.random_range(2..9);
            (vec![rng.random_range(3 * l..(2000 / k).min(300))], vec![l], k)
        } else {
            let l = [rng.random_range(2..4), rng.random_range(2..4)];
            (vec![rng.random_range(8..20), rng.random_range(8..20)], l.to_vec(), 2)
        };
        let sup = dom(&support);
        let d = random_dictionary(&mut rng, k, 1, sup);
        let dm = dom(&sizes);
        let zt = random_code(&mut rng, dm, &sup, k, 0.05);
        let mut x = crate::tensor::convolve(&zt, &d)?;
        x.data_mut().iter_mut().for_each(|v| *v += 0.1 * rng.random_range(-1.0..1.0));
        let lmax = lambda_max(&x, &d)?;
        let frac = if t == 0 { 1.0 } else { rng.random_range(0.05..0.6) };
        let lambda = frac * lmax;
        let (z, _) = solve(&x, &d, lambda, SelectionStrategy::locally_greedy(), 1e-10, u64::MAX)?;
        let ours = objective(&x, &z, &d, lambda)?;
        let (cols, _) = dense_design(&x, &d);
        let (zo, oracle) = dense_lasso(&cols, x.data(), lambda, 1e-12, 100_000);
        if t == 0 && (z.nnz() != 0 || zo.iter().any(|v| *v != 0.0)) {
            zero_ok = false;
            rep.record(f64::INFINITY, || json!({"trial": 0, "reason": "nonzero code at lambda_max"}));
        }
        let gap = (ours - oracle).abs() / oracle.abs().max(f64::MIN_POSITIVE);
        rep.record(gap, || {
            json!({"trial": t, "sizes": sizes, "support": support, "atoms": k,
                   "lambda_frac": frac, "ours": ours, "oracle": oracle})
        });
    }
    rep.details = json!({"zero_at_lambda_max": zero_ok});
    Ok(rep)
}

/// The four oracle checks with their default trial counts.
pub fn run_all(seed: u64) -> Result<Vec<OracleReport>> {
    let grid = make_grid(&dom(&[512, 512]), 4, &dom(&[16, 16]), Partition::Grid)?;
    let est = estimate_acceptance(&grid, 100_000, seed);
    let mut acc = OracleReport::new("acceptance", seed, 1.0);
    acc.trials = est.samples;
    acc.passed = est.passed;
    acc.max_rel_error = ((est.bound - est.rate) / est.bound).max(0.0);
    acc.details = serde_json::to_value(est)?;
    let j = check_j_omega(&[12, 12], &[2, 2], &[2, 2])?;
    acc.passed &= j.passed;
    acc.worst = serde_json::to_value(&j)?;
    Ok(vec![
        check_cost_delta(seed, 100)?,
        check_interference(seed, 100)?,
        acc,
        check_lasso_equivalence(seed, 100)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_delta_oracle() {
        let r = check_cost_delta(1, 60).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.trials, 60);
    }

    #[test]
    fn interference_oracle() {
        let r = check_interference(2, 60).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.details["spread_sets_exactly_zero"], true);
        assert!(r.details["clusters_with_interference"].as_u64().unwrap() > 20);
    }

    #[test]
    fn lasso_oracle() {
        let r = check_lasso_equivalence(3, 10).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.details["zero_at_lambda_max"], true);
    }

    #[test]
    fn one_worker_accepts_everything() {
        let g = make_grid(&dom(&[64, 64]), 1, &dom(&[8, 8]), Partition::Grid).unwrap();
        let e = estimate_acceptance(&g, 1000, 0);
        assert_eq!(e.rate, 1.0);
        assert!(e.passed);
    }

    #[test]
    fn acceptance_above_bound_small() {
        let g = make_grid(&dom(&[128, 128]), 4, &dom(&[16, 16]), Partition::Grid).unwrap();
        let e = estimate_acceptance(&g, 5000, 1);
        assert!(e.passed, "{e:?}");
        assert!((e.bound - 0.5625).abs() < 1e-12);
    }

    #[test]
    fn j_omega_pattern() {
        let r = check_j_omega(&[12, 12], &[2, 2], &[2, 2]).unwrap();
        assert!(r.passed, "{r:?}");
        // Centre 2x2 are corners, the two cut lines give edges.
        assert_eq!(r.details["j4"], 4);
        assert_eq!(r.details["j2"], 2 * 2 * 12 - 2 * 4);
        assert_eq!(r.details["j1"], 144 - 4 - 40);
    }

    #[test]
    fn dense_oracle_solves_orthogonal_case() {
        // Identity design: soft thresholding of y.
        let cols: Vec<Vec<f64>> = (0..3).map(|j| (0..3).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let (z, f) = dense_lasso(&cols, &[2.0, -0.5, 1.0], 0.75, 1e-14, 10);
        assert_eq!(z, vec![1.25, 0.0, 0.25]);
        assert!((f - (0.5 * (0.75f64.powi(2) * 2.0 + 0.25) + 0.75 * 1.5)).abs() < 1e-12);
    }
}
