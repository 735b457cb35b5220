//! Worker grids over the signal domain, border geometry, update routing and
//! soft-lock arbitration.
//!
//! Everything here is a pure function of its inputs. The distributed runtime
//! builds on these pieces; tests exercise them without any concurrency.
//!
//! For a sub-domain `S = prod [l_i, u_i[` and atom support `L`:
//!
//! - the border `B_L(S)` holds the positions of `S` within `L_i` of one of
//!   its faces on some axis,
//! - the extension `E_L(S)` holds the positions outside `S`, inside `S`
//!   grown by `L_i` on every axis and clipped to the domain.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cross_pair, Dictionary, Domain, Pos, Region, MAX_DIMS};

/// How the domain is split between workers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    /// Split along every axis, keeping sub-domains as square as possible.
    #[default]
    Grid,
    /// Split along the first axis only.
    Line,
}

impl std::str::FromStr for Partition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Partition::Grid),
            "line" => Ok(Partition::Line),
            _ => Err(Error::Config(format!("unknown partition {s:?} (expected grid or line)"))),
        }
    }
}

/// A rectangular grid of `W = prod W_i` workers partitioning the domain.
///
/// Workers are numbered row-major over their grid coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerGrid {
    domain: Domain,
    support: Domain,
    counts: [usize; MAX_DIMS],
    cuts: [Vec<usize>; MAX_DIMS],
}

/// Largest number of workers `make_grid` accepts for this problem, given
/// that every split axis must keep sub-domain edges of at least `2 L_i`.
pub fn max_workers(domain: &Domain, support: &Domain, partition: Partition) -> usize {
    axis_limits(domain, support, partition).iter().product()
}

fn axis_limits(domain: &Domain, support: &Domain, partition: Partition) -> [usize; MAX_DIMS] {
    let t = domain.shape();
    let l = support.shape();
    let mut m = [1; MAX_DIMS];
    let axes = match partition {
        Partition::Grid => domain.dims(),
        Partition::Line => 1,
    };
    for i in 0..axes {
        m[i] = (t[i] / (2 * l[i])).max(1);
    }
    m
}

/// Splits `domain` between `workers` workers.
///
/// Among the factorizations `W = prod W_i` that keep every split edge at
/// least `2 L_i`, picks the one whose sub-domains have the smallest ratio
/// of longest to shortest edge. Ties favor splitting earlier axes more.
pub fn make_grid(domain: &Domain, workers: usize, support: &Domain, partition: Partition) -> Result<WorkerGrid> {
    if workers == 0 {
        return Err(Error::Config("at least one worker is required".into()));
    }
    if !domain.fits(support) {
        return Err(Error::Shape(format!(
            "atom support {:?} does not fit in the domain {:?}",
            support.sizes(),
            domain.sizes()
        )));
    }
    let m = axis_limits(domain, support, partition);
    let t = domain.shape();
    let mut best: Option<([usize; MAX_DIMS], f64)> = None;
    for a in (1..=m[0].min(workers)).rev() {
        if workers % a != 0 {
            continue;
        }
        for b in (1..=m[1].min(workers / a)).rev() {
            if (workers / a) % b != 0 {
                continue;
            }
            let c = workers / a / b;
            if c > m[2] {
                continue;
            }
            let w = [a, b, c];
            let edges: Vec<f64> = (0..domain.dims()).map(|i| t[i] as f64 / w[i] as f64).collect();
            let hi = edges.iter().cloned().fold(f64::MIN, f64::max);
            let lo = edges.iter().cloned().fold(f64::MAX, f64::min);
            let ratio = hi / lo;
            if best.is_none_or(|(_, r)| ratio < r) {
                best = Some((w, ratio));
            }
        }
    }
    let (counts, _) = best.ok_or(Error::InfeasibleGrid {
        requested: workers,
        max_feasible: m.iter().product(),
    })?;
    let cuts = [0, 1, 2].map(|i| {
        let (q, r) = (t[i] / counts[i], t[i] % counts[i]);
        let mut c = vec![0];
        for j in 0..counts[i] {
            c.push(c[j] + q + usize::from(j < r));
        }
        c
    });
    Ok(WorkerGrid {
        domain: *domain,
        support: *support,
        counts,
        cuts,
    })
}

impl WorkerGrid {
    pub fn workers(&self) -> usize {
        self.counts.iter().product()
    }

    /// Per-axis worker counts `W_i`.
    pub fn counts(&self) -> &[usize] {
        &self.counts[..self.domain.dims()]
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn support(&self) -> &Domain {
        &self.support
    }

    pub fn coords(&self, w: usize) -> [usize; MAX_DIMS] {
        let c = self.counts;
        [w / (c[1] * c[2]), (w / c[2]) % c[1], w % c[2]]
    }

    pub fn index(&self, coords: [usize; MAX_DIMS]) -> usize {
        (coords[0] * self.counts[1] + coords[1]) * self.counts[2] + coords[2]
    }

    /// The sub-domain `S_w`.
    pub fn sub_domain(&self, w: usize) -> Region {
        let c = self.coords(w);
        Region::new(
            [0, 1, 2].map(|i| self.cuts[i][c[i]]),
            [0, 1, 2].map(|i| self.cuts[i][c[i] + 1]),
        )
    }

    /// `S_w` together with `E_L(S_w)`: the positions whose `beta` worker `w`
    /// maintains.
    pub fn extended(&self, w: usize) -> Region {
        self.sub_domain(w).grow(self.support.shape(), &self.domain.region())
    }

    /// The worker whose sub-domain contains `pos`.
    pub fn owner(&self, pos: Pos) -> usize {
        let c = [0, 1, 2].map(|i| self.cuts[i].partition_point(|&b| b <= pos[i]) - 1);
        self.index(c)
    }

    pub fn border(&self, w: usize) -> BorderGeometry {
        border_geometry(&self.sub_domain(w), &self.support, &self.domain)
    }

    /// Workers other than the owner of `pos` whose `S_w' U E_L(S_w')`
    /// meets the neighborhood of `pos`, in increasing order.
    pub fn notify_set(&self, pos: Pos) -> Vec<usize> {
        let l = self.support.shape();
        let hood = Region::neighborhood(pos, &self.support, &self.domain.region());
        let mut ranges = [(0, 0); MAX_DIMS];
        for i in 0..MAX_DIMS {
            let cuts = &self.cuts[i];
            let first = (0..self.counts[i]).find(|&j| cuts[j + 1] + l[i] > hood.lo[i]).unwrap_or(0);
            let last = (0..self.counts[i])
                .rev()
                .find(|&j| cuts[j] < hood.hi[i] + l[i])
                .unwrap_or(0);
            ranges[i] = (first, last + 1);
        }
        let me = self.owner(pos);
        let mut out = Vec::new();
        for a in ranges[0].0..ranges[0].1 {
            for b in ranges[1].0..ranges[1].1 {
                for c in ranges[2].0..ranges[2].1 {
                    let w = self.index([a, b, c]);
                    if w != me {
                        out.push(w);
                    }
                }
            }
        }
        out
    }

    /// Positions of `V(pos) ∩ E_L(S_w)`, in row-major order.
    pub fn soft_lock_area(&self, w: usize, pos: Pos) -> impl Iterator<Item = Pos> + '_ {
        let sub = self.sub_domain(w);
        let hood = Region::neighborhood(pos, &self.support, &self.extended(w));
        hood.positions().filter(move |p| !sub.contains(*p))
    }

    /// JSON description of the layout: counts and per-worker sub-domains
    /// with their borders.
    pub fn layout(&self) -> GridLayout {
        GridLayout {
            domain: self.domain.sizes().to_vec(),
            support: self.support.sizes().to_vec(),
            counts: self.counts().to_vec(),
            workers: (0..self.workers())
                .map(|w| {
                    let g = self.border(w);
                    WorkerLayout {
                        id: w,
                        sub_domain: g.sub_domain,
                        border: g.border_boxes(),
                        extension: g.extension_boxes(),
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridLayout {
    pub domain: Vec<usize>,
    pub support: Vec<usize>,
    pub counts: Vec<usize>,
    pub workers: Vec<WorkerLayout>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerLayout {
    pub id: usize,
    pub sub_domain: Region,
    pub border: Vec<Region>,
    pub extension: Vec<Region>,
}

/// `B_L`, `B_2L` and `E_L` of one sub-domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BorderGeometry {
    pub sub_domain: Region,
    /// `S_w` shrunk by `L_i` on both sides; `B_L` is `S_w` minus this box.
    pub core: Region,
    /// `S_w` shrunk by `2 L_i`.
    pub deep_core: Region,
    /// `S_w` grown by `L_i` and clipped to the domain.
    pub grown: Region,
}

pub fn border_geometry(sub: &Region, support: &Domain, domain: &Domain) -> BorderGeometry {
    let l = support.shape();
    let shrink = |f: usize| {
        let mut lo = [0; MAX_DIMS];
        let mut hi = [0; MAX_DIMS];
        for i in 0..MAX_DIMS {
            // Unused trailing axes have size one and are never borders.
            let by = if i < domain.dims() { f * l[i] } else { 0 };
            lo[i] = sub.lo[i] + by;
            hi[i] = sub.hi[i].saturating_sub(by).max(lo[i]);
        }
        Region::new(lo, hi)
    };
    let mut by = l;
    for b in by.iter_mut().skip(domain.dims()) {
        *b = 0;
    }
    BorderGeometry {
        sub_domain: *sub,
        core: shrink(1),
        deep_core: shrink(2),
        grown: sub.grow(by, &domain.region()),
    }
}

impl BorderGeometry {
    /// `pos ∈ B_L(S_w)`.
    pub fn in_border(&self, pos: Pos) -> bool {
        self.sub_domain.contains(pos) && !self.core.contains(pos)
    }

    /// `pos ∈ B_2L(S_w)`.
    pub fn in_extended_border(&self, pos: Pos) -> bool {
        self.sub_domain.contains(pos) && !self.deep_core.contains(pos)
    }

    /// `pos ∈ E_L(S_w)`. Positions outside the domain are never in it.
    pub fn in_extension(&self, pos: Pos) -> bool {
        self.grown.contains(pos) && !self.sub_domain.contains(pos)
    }

    /// `B_L` as disjoint boxes.
    pub fn border_boxes(&self) -> Vec<Region> {
        box_difference(&self.sub_domain, &self.core)
    }

    /// `E_L` as disjoint boxes.
    pub fn extension_boxes(&self) -> Vec<Region> {
        box_difference(&self.grown, &self.sub_domain)
    }
}

/// `outer ∖ inner` as disjoint boxes, for `inner ⊂ outer`.
pub fn box_difference(outer: &Region, inner: &Region) -> Vec<Region> {
    let inner = inner.intersect(outer);
    if inner.is_empty() {
        return if outer.is_empty() { vec![] } else { vec![*outer] };
    }
    let mut out = Vec::new();
    let mut rest = *outer;
    for i in 0..MAX_DIMS {
        if rest.lo[i] < inner.lo[i] {
            let mut b = rest;
            b.hi[i] = inner.lo[i];
            out.push(b);
        }
        if inner.hi[i] < rest.hi[i] {
            let mut b = rest;
            b.lo[i] = inner.hi[i];
            out.push(b);
        }
        rest.lo[i] = inner.lo[i];
        rest.hi[i] = inner.hi[i];
    }
    out
}

/// A coordinate update competing with a soft-lock candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Competitor {
    pub magnitude: f64,
    /// Worker owning the competitor's position.
    pub owner: usize,
}

/// Soft-lock arbitration for a candidate of worker `worker` with `|dZ| =
/// magnitude` lying in `B_L(S_w)`, against the best updates of
/// `V(pos) ∩ E_L(S_w)`.
///
/// The candidate wins if it is strictly larger than every competitor; on
/// exact equality it wins only against workers of larger index.
pub fn soft_lock_check(magnitude: f64, worker: usize, competitors: impl IntoIterator<Item = Competitor>) -> bool {
    competitors
        .into_iter()
        .all(|c| magnitude > c.magnitude || (magnitude == c.magnitude && c.owner > worker))
}

/// Memoized inner products between shifted atoms.
#[derive(Debug)]
pub struct Interference<'a> {
    d: &'a Dictionary,
    memo: HashMap<(usize, usize), Vec<f64>>,
}

impl<'a> Interference<'a> {
    pub fn new(d: &'a Dictionary) -> Self {
        Interference { d, memo: HashMap::new() }
    }

    /// `<e_a * D_ka, e_b * D_kb> = (D_kb * D~_ka)[w_a - w_b]`. Both atoms
    /// must lie entirely inside the domain.
    pub fn inner(&mut self, ka: usize, pa: Pos, kb: usize, pb: Pos) -> f64 {
        let l = self.d.support().shape();
        let lag = self.d.support().lag_shape();
        let mut idx = [0; MAX_DIMS];
        for i in 0..MAX_DIMS {
            let t = pa[i] as isize - pb[i] as isize + l[i] as isize - 1;
            if t < 0 || t as usize >= lag[i] {
                return 0.0;
            }
            idx[i] = t as usize;
        }
        let d = self.d;
        let g = self.memo.entry((kb, ka)).or_insert_with(|| cross_pair(d, kb, ka));
        g[(idx[0] * lag[1] + idx[1]) * lag[2] + idx[2]]
    }

    /// Cross term of simultaneous updates `(k_w, w_w, dZ_w)` at distinct
    /// coordinates, measured against a common state:
    /// `sum_{w < w'} <a_w, a_w'> dZ_w dZ_w'`, so that the total cost decrease
    /// is the sum of the individual decreases minus this value.
    pub fn delta(&mut self, updates: &[(usize, Pos, f64)]) -> f64 {
        let mut s = 0.0;
        for (i, &(ka, pa, da)) in updates.iter().enumerate() {
            for &(kb, pb, db) in &updates[i + 1..] {
                s += self.inner(ka, pa, kb, pb) * da * db;
            }
        }
        s
    }
}

/// See [`Interference::delta`].
pub fn interference_delta(updates: &[(usize, Pos, f64)], d: &Dictionary) -> f64 {
    Interference::new(d).delta(updates)
}

/// `prod_i (1 - W_i L_i / T_i)`, clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptanceBound {
    pub value: f64,
    /// Set when some `W_i L_i >= T_i`, where the bound says nothing.
    pub clamped: bool,
}

pub fn acceptance_bound(grid: &WorkerGrid) -> AcceptanceBound {
    let n = grid.domain.dims();
    let f = |a: [usize; MAX_DIMS]| a[..n].iter().map(|v| *v as f64).collect::<Vec<_>>();
    acceptance_bound_raw(&f(grid.domain.shape()), &f(grid.counts), &f(grid.support.shape()))
}

/// [`acceptance_bound`] for real-valued per-axis sizes, worker counts and
/// atom sizes.
pub fn acceptance_bound_raw(t: &[f64], w: &[f64], l: &[f64]) -> AcceptanceBound {
    let mut value = 1.0;
    let mut clamped = false;
    for i in 0..t.len() {
        let f = 1.0 - w[i] * l[i] / t[i];
        if f <= 0.0 {
            clamped = true;
        }
        value *= f.max(0.0);
    }
    AcceptanceBound { value, clamped }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csc::{cost_delta_raw, CscContext};
    use crate::tensor::{objective, ActivationMap, Signal};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dom(s: &[usize]) -> Domain {
        Domain::new(s).unwrap()
    }

    fn r1(a: usize, b: usize) -> Region {
        Region::new([a, 0, 0], [b, 1, 1])
    }

    #[test]
    fn square_grid() {
        let g = make_grid(&dom(&[512, 512]), 4, &dom(&[16, 16]), Partition::Grid).unwrap();
        assert_eq!(g.counts(), &[2, 2]);
        for w in 0..4 {
            assert_eq!(g.sub_domain(w).shape(), [256, 256, 1]);
        }
        assert_eq!(g.sub_domain(3), Region::new([256, 256, 0], [512, 512, 1]));
    }

    #[test]
    fn single_worker() {
        let d = dom(&[40, 30]);
        let g = make_grid(&d, 1, &dom(&[16, 16]), Partition::Grid).unwrap();
        assert_eq!(g.sub_domain(0), d.region());
        assert!(g.notify_set([20, 15, 0]).is_empty());
    }

    #[test]
    fn forty_nine_workers() {
        let g = make_grid(&dom(&[512, 512]), 49, &dom(&[16, 16]), Partition::Grid).unwrap();
        assert_eq!(g.counts(), &[7, 7]);
        // 512 = 7 * 73 + 1: the first row and column are one larger.
        assert_eq!(g.sub_domain(0).shape(), [74, 74, 1]);
        assert_eq!(g.sub_domain(48).shape(), [73, 73, 1]);
        assert_eq!(g.sub_domain(8).lo, [74, 74, 0]);
    }

    #[test]
    fn rectangular_and_line_splits() {
        let g = make_grid(&dom(&[256, 64]), 4, &dom(&[8, 8]), Partition::Grid).unwrap();
        assert_eq!(g.counts(), &[4, 1]);
        let g = make_grid(&dom(&[256, 256]), 4, &dom(&[8, 8]), Partition::Line).unwrap();
        assert_eq!(g.counts(), &[4, 1]);
        let g = make_grid(&dom(&[100]), 3, &dom(&[10]), Partition::Grid).unwrap();
        assert_eq!(g.sub_domain(0), r1(0, 34));
        assert_eq!(g.sub_domain(1), r1(34, 67));
        assert_eq!(g.sub_domain(2), r1(67, 100));
        let g = make_grid(&dom(&[24, 24, 24]), 8, &dom(&[3, 3, 3]), Partition::Grid).unwrap();
        assert_eq!(g.counts(), &[2, 2, 2]);
    }

    #[test]
    fn infeasible_grids_name_the_limit() {
        let d = dom(&[128, 128]);
        let l = dom(&[8, 8]);
        assert_eq!(max_workers(&d, &l, Partition::Line), 8);
        assert_eq!(max_workers(&d, &l, Partition::Grid), 64);
        assert!(make_grid(&d, 64, &l, Partition::Grid).is_ok());
        match make_grid(&d, 9, &l, Partition::Line) {
            Err(Error::InfeasibleGrid { requested: 9, max_feasible: 8 }) => {}
            other => panic!("{other:?}"),
        }
        match make_grid(&d, 11, &l, Partition::Grid) {
            Err(Error::InfeasibleGrid { max_feasible: 64, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(make_grid(&d, 0, &l, Partition::Grid), Err(Error::Config(_))));
    }

    #[test]
    fn grid_partitions_the_domain() {
        for (sizes, w) in [(vec![37, 29], 6), (vec![50], 5), (vec![13, 12, 11], 4)] {
            let d = dom(&sizes);
            let l = dom(&vec![2; sizes.len()]);
            let g = make_grid(&d, w, &l, Partition::Grid).unwrap();
            let mut count = vec![0; d.len()];
            for w in 0..g.workers() {
                let s = g.sub_domain(w);
                for i in 0..d.dims() {
                    assert!(s.shape()[i] >= 2 * l.shape()[i]);
                }
                for p in s.positions() {
                    count[d.flat(p)] += 1;
                    assert_eq!(g.owner(p), w);
                }
            }
            assert!(count.iter().all(|c| *c == 1));
        }
    }

    #[test]
    fn border_sets_in_1d() {
        let g = border_geometry(&r1(100, 200), &dom(&[10]), &dom(&[300]));
        assert_eq!(g.border_boxes(), vec![r1(100, 110), r1(190, 200)]);
        assert_eq!(g.extension_boxes(), vec![r1(90, 100), r1(200, 210)]);
        assert!(g.in_border([109, 0, 0]) && !g.in_border([110, 0, 0]));
        assert!(g.in_extended_border([119, 0, 0]) && !g.in_extended_border([120, 0, 0]));
        assert!(g.in_extension([90, 0, 0]) && !g.in_extension([89, 0, 0]));
    }

    #[test]
    fn extension_is_clipped() {
        let g = border_geometry(&r1(0, 100), &dom(&[10]), &dom(&[300]));
        assert_eq!(g.extension_boxes(), vec![r1(100, 110)]);
        assert!(!g.in_extension([300, 0, 0]));
        let g = border_geometry(&r1(200, 300), &dom(&[10]), &dom(&[300]));
        assert_eq!(g.extension_boxes(), vec![r1(190, 200)]);
        assert!(!g.in_extension([305, 0, 0]));
    }

    #[test]
    fn border_sets_in_2d() {
        let d = dom(&[60, 60]);
        let s = Region::new([20, 20, 0], [40, 40, 1]);
        let g = border_geometry(&s, &dom(&[3, 4]), &d);
        let count = |f: &dyn Fn(Pos) -> bool| d.region().positions().filter(|p| f(*p)).count();
        assert_eq!(count(&|p| g.in_border(p)), 400 - 14 * 12);
        assert_eq!(count(&|p| g.in_extension(p)), 26 * 28 - 400);
        let b: usize = g.border_boxes().iter().map(|r| r.len()).sum();
        let e: usize = g.extension_boxes().iter().map(|r| r.len()).sum();
        assert_eq!(b, 400 - 14 * 12);
        assert_eq!(e, 26 * 28 - 400);
        for p in d.region().positions() {
            assert!(!(g.in_border(p) && !s.contains(p)));
            assert!(!(g.in_extension(p) && s.contains(p)));
        }
    }

    #[test]
    fn notify_examples() {
        let g = make_grid(&dom(&[90, 90]), 9, &dom(&[5, 5]), Partition::Grid).unwrap();
        // Worker 4 is the center, S_4 = [30, 60[^2.
        assert_eq!(g.sub_domain(4), Region::new([30, 30, 0], [60, 60, 1]));
        assert!(g.notify_set([45, 45, 0]).is_empty());
        assert_eq!(g.notify_set([45, 58, 0]), vec![5]);
        assert_eq!(g.notify_set([31, 45, 0]), vec![1]);
        assert_eq!(g.notify_set([58, 58, 0]), vec![5, 7, 8]);
        // Updates deep in B_2L but outside B_L still reach the neighbor.
        assert_eq!(g.notify_set([45, 51, 0]), vec![5]);
        assert!(g.notify_set([45, 50, 0]).is_empty());
    }

    fn brute_notify(g: &WorkerGrid, pos: Pos) -> Vec<usize> {
        let hood = Region::neighborhood(pos, g.support(), &g.domain().region());
        (0..g.workers())
            .filter(|&w| w != g.owner(pos))
            .filter(|&w| {
                let b = g.border(w);
                hood.positions().any(|p| b.sub_domain.contains(p) || b.in_extension(p))
            })
            .collect()
    }

    #[test]
    fn routing_is_complete() {
        for (sizes, l, w) in [
            (vec![24, 20], vec![3, 2], 6),
            (vec![30, 30], vec![4, 4], 9),
            (vec![40], vec![5], 4),
            (vec![12, 12, 12], vec![2, 2, 3], 8),
        ] {
            let g = make_grid(&dom(&sizes), w, &dom(&l), Partition::Grid).unwrap();
            for p in g.domain().region().positions() {
                assert_eq!(g.notify_set(p), brute_notify(&g, p), "{p:?}");
            }
        }
    }

    #[test]
    fn soft_lock_examples() {
        let c = |m, o| Competitor { magnitude: m, owner: o };
        assert!(!soft_lock_check(0.5, 3, [c(0.2, 4), c(0.7, 4)]));
        assert!(!soft_lock_check(0.5, 3, [c(0.5, 2)]));
        assert!(soft_lock_check(0.5, 3, [c(0.5, 4), c(0.1, 2)]));
        assert!(soft_lock_check(0.5, 3, []));
    }

    #[test]
    fn soft_lock_area_is_extension_part_of_neighborhood() {
        let g = make_grid(&dom(&[30, 30]), 9, &dom(&[3, 3]), Partition::Grid).unwrap();
        let b = g.border(4);
        let pos = [11, 18, 0];
        let got: Vec<Pos> = g.soft_lock_area(4, pos).collect();
        let hood = Region::neighborhood(pos, g.support(), &g.domain().region());
        let want: Vec<Pos> = hood.positions().filter(|p| b.in_extension(*p)).collect();
        assert_eq!(got, want);
        assert_eq!(got.len(), 5 * 5 - 4 * 4);
        assert!(g.soft_lock_area(4, [15, 15, 0]).next().is_none());
    }

    #[test]
    fn interference_vanishes_far_apart_and_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = Dictionary::zeros(2, 1, dom(&[4]));
        d.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        assert_eq!(interference_delta(&[(0, [10, 0, 0], 1.0), (1, [14, 0, 0], -2.0)], &d), 0.0);
        assert_eq!(interference_delta(&[(1, [10, 0, 0], 1.0)], &d), 0.0);
        assert!(interference_delta(&[(0, [10, 0, 0], 1.0), (1, [13, 0, 0], -2.0)], &d) != 0.0);
    }

    fn joint_decrease(seed: u64, sizes: &[usize], support: &[usize], n: usize) -> (f64, f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dm = dom(sizes);
        let mut d = Dictionary::zeros(3, 2, dom(support));
        d.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let mut x = Signal::zeros(dm, 2);
        x.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let mut z = ActivationMap::zeros(dm, 3);
        let ctx = CscContext::for_signal(&x, &d).unwrap();
        let coding = *ctx.coding();
        for p in coding.positions() {
            if rng.random_bool(0.2) {
                z.set(rng.random_range(0..3), p, rng.random_range(-1.0..1.0));
            }
        }
        let lambda = 0.3;
        let beta = crate::csc::beta_from_scratch(&x, &d, &z).unwrap();
        // Distinct coordinates clustered so that they overlap.
        let center = [0, 1, 2].map(|i| coding.lo[i] + coding.shape()[i] / 2);
        let mut ups: Vec<(usize, Pos, f64)> = Vec::new();
        while ups.len() < n {
            let k = rng.random_range(0..3);
            let p = [0, 1, 2].map(|i| {
                let s = support.get(i).copied().unwrap_or(1);
                (center[i] + rng.random_range(0..s)).min(coding.hi[i] - 1)
            });
            if ups.iter().all(|u| (u.0, u.1) != (k, p)) {
                ups.push((k, p, rng.random_range(-1.0..1.0)));
            }
        }
        let norms = d.sq_norms();
        let individual: f64 = ups
            .iter()
            .map(|&(k, p, dz)| {
                let zv = z.get(k, p);
                cost_delta_raw(norms[k], beta.get(k, p), zv, zv + dz, lambda)
            })
            .sum();
        let e0 = objective(&x, &z, &d, lambda).unwrap();
        for &(k, p, dz) in &ups {
            z.set(k, p, z.get(k, p) + dz);
        }
        let e1 = objective(&x, &z, &d, lambda).unwrap();
        (individual - interference_delta(&ups, &d), e0 - e1, e0)
    }

    #[test]
    fn interference_matches_direct_objective() {
        for (seed, sizes, support, n) in [
            (1, vec![40], vec![5], 2),
            (2, vec![40], vec![5], 4),
            (3, vec![20, 18], vec![4, 3], 2),
            (4, vec![20, 18], vec![4, 3], 5),
            (5, vec![10, 9, 8], vec![3, 2, 2], 3),
        ] {
            let (pred, direct, scale) = joint_decrease(seed, &sizes, &support, n);
            assert!((pred - direct).abs() <= 1e-10 * scale.abs().max(1.0), "{pred} vs {direct}");
        }
    }

    #[test]
    fn acceptance_bound_examples() {
        let g = make_grid(&dom(&[512, 512]), 4, &dom(&[16, 16]), Partition::Grid).unwrap();
        let b = acceptance_bound(&g);
        assert_eq!(b.value, 0.87890625);
        assert!(!b.clamped);
        let g = make_grid(&dom(&[512, 512]), 1, &dom(&[16, 16]), Partition::Grid).unwrap();
        assert_eq!(acceptance_bound(&g).value, (1.0 - 16.0 / 512.0) * (1.0 - 16.0 / 512.0));
        let g = make_grid(&dom(&[256]), 8, &dom(&[16]), Partition::Grid).unwrap();
        assert_eq!(acceptance_bound(&g).value, 0.5);
        let b = acceptance_bound_raw(&[100.0], &[12.0], &[10.0]);
        assert_eq!(b.value, 0.0);
        assert!(b.clamped);
    }

    #[test]
    fn acceptance_bound_half_point() {
        // W_i L_i / T_i = (2^{1/d} - 1) / 2^{1/d} on every axis gives 1/2.
        for d in 1..=3 {
            let r = 2f64.powf(1.0 / d as f64);
            let t = vec![1000.0; d];
            let l = vec![10.0; d];
            let w = vec![100.0 * (r - 1.0) / r; d];
            let b = acceptance_bound_raw(&t, &w, &l);
            assert!((b.value - 0.5).abs() < 1e-12);
            // The reciprocal factor exceeds one and leaves nothing.
            let w = vec![100.0 * r / (r - 1.0); d];
            assert!(acceptance_bound_raw(&t, &w, &l).clamped);
        }
    }

    #[test]
    fn layout_serializes() {
        let g = make_grid(&dom(&[40, 40]), 4, &dom(&[4, 4]), Partition::Grid).unwrap();
        let v = serde_json::to_value(g.layout()).unwrap();
        assert_eq!(v["counts"], serde_json::json!([2, 2]));
        assert_eq!(v["workers"].as_array().unwrap().len(), 4);
        assert_eq!(v["workers"][3]["sub_domain"]["lo"], serde_json::json!([20, 20, 0]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn arbitration_is_total(m in 0u8..4, w in 0usize..10, w2 in 0usize..10) {
            prop_assume!(w != w2);
            // Two candidates of equal or different magnitude that see each
            // other: exactly one wins.
            let a = f64::from(m) * 0.25;
            for b in [a, a + 0.25, a - 0.25] {
                let first = soft_lock_check(a, w, [Competitor { magnitude: b, owner: w2 }]);
                let second = soft_lock_check(b, w2, [Competitor { magnitude: a, owner: w }]);
                prop_assert!(first ^ second);
            }
        }

        #[test]
        fn soft_locks_prevent_neighbor_conflicts(seed in 0u64..100_000, levels in 1u32..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = make_grid(&dom(&[24, 24]), 9, &dom(&[3, 4]), Partition::Grid).unwrap();
            // Quantized magnitudes make exact ties frequent.
            let field: Vec<f64> = (0..g.domain().len())
                .map(|_| f64::from(rng.random_range(0..=levels)))
                .collect();
            let mag = |p: Pos| field[g.domain().flat(p)];
            let mut accepted = Vec::new();
            for w in 0..g.workers() {
                let s = g.sub_domain(w);
                let pos = [s.lo[0] + rng.random_range(0..s.shape()[0]), s.lo[1] + rng.random_range(0..s.shape()[1]), 0];
                let ok = !g.border(w).in_border(pos)
                    || soft_lock_check(
                        mag(pos),
                        w,
                        g.soft_lock_area(w, pos).map(|p| Competitor { magnitude: mag(p), owner: g.owner(p) }),
                    );
                if ok {
                    accepted.push((w, pos));
                }
            }
            let l = g.support().shape();
            for (i, &(_, a)) in accepted.iter().enumerate() {
                for &(_, b) in &accepted[i + 1..] {
                    let near = (0..2).all(|j| a[j].abs_diff(b[j]) < l[j]);
                    prop_assert!(!near, "{a:?} and {b:?} both accepted");
                }
            }
        }
    }
}
