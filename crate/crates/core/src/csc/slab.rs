use super::{CandidateUpdate, CscContext};
use crate::tensor::{correlate_region, soft_threshold, ActivationMap, ConvOptions, Pos, Region, Signal};
use crate::Result;

/// `Z` and `beta` stored over a box of the domain, atom-major.
///
/// The sequential solver uses one slab covering the whole domain; each
/// distributed worker owns a slab covering its sub-domain plus the
/// surrounding extension it mirrors.
#[derive(Debug, Clone)]
pub(crate) struct Slab {
    pub region: Region,
    pub z: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Slab {
    /// `Z = 0` and `beta = X * D~` over `region`, then the nonzeros of
    /// `warm` (if any) replayed as updates.
    pub fn init(
        ctx: &CscContext,
        x: &Signal,
        region: Region,
        warm: Option<&ActivationMap>,
        opts: ConvOptions,
    ) -> Result<Slab> {
        let beta = correlate_region(x, ctx.dictionary(), &region, opts)?;
        let mut slab = Slab {
            region,
            z: vec![0.0; region.len() * ctx.atoms()],
            beta,
        };
        if let Some(w) = warm {
            let reach = region.grow(ctx.support().shape(), &ctx.domain().region());
            for (k, pos, v) in w.nonzeros() {
                if reach.contains(pos) && ctx.coding().contains(pos) {
                    slab.apply(ctx, k, pos, v);
                }
            }
        }
        Ok(slab)
    }

    #[inline]
    pub fn index(&self, k: usize, pos: Pos) -> usize {
        k * self.region.len() + self.region.local(pos)
    }

    #[inline]
    pub fn z_at(&self, k: usize, pos: Pos) -> f64 {
        self.z[self.index(k, pos)]
    }

    #[inline]
    pub fn beta_at(&self, k: usize, pos: Pos) -> f64 {
        self.beta[self.index(k, pos)]
    }

    /// Optimal new value and additive change of coordinate `(k, pos)`.
    #[inline]
    pub fn proposal(&self, ctx: &CscContext, lambda: f64, k: usize, pos: Pos) -> (f64, f64) {
        let i = self.index(k, pos);
        let n = ctx.sq_norms()[k];
        if n == 0.0 {
            return (self.z[i], 0.0);
        }
        let znew = soft_threshold(self.beta[i], lambda) / n;
        (znew, znew - self.z[i])
    }

    pub fn best_in(&self, ctx: &CscContext, lambda: f64, cell: &Region) -> Option<CandidateUpdate> {
        best_on(ctx, lambda, &self.region, &self.z, &self.beta, cell)
    }

    pub fn apply(&mut self, ctx: &CscContext, k0: usize, pos: Pos, dz: f64) {
        apply_on(ctx, &self.region, &mut self.z, &mut self.beta, k0, pos, dz)
    }

    /// Largest `|dZ|` over the slab part of `region`.
    pub fn max_delta(&self, ctx: &CscContext, lambda: f64, region: &Region) -> f64 {
        self.best_in(ctx, lambda, region).map_or(0.0, |c| c.delta.abs())
    }
}

/// Greedy choice over `cell` intersected with `region` and the coding
/// region, for atom-major `z`/`beta` stored over `region`. Ties go to the
/// smallest atom, then the first position in row-major order.
pub(crate) fn best_on(
    ctx: &CscContext,
    lambda: f64,
    region: &Region,
    z: &[f64],
    beta: &[f64],
    cell: &Region,
) -> Option<CandidateUpdate> {
    let cell = cell.intersect(region).intersect(ctx.coding());
    if cell.is_empty() {
        return None;
    }
    let n = region.len();
    let rs = region.shape();
    let cs = cell.shape();
    let mut best: Option<CandidateUpdate> = None;
    let mut best_mag = -1.0;
    for k in 0..ctx.atoms() {
        let nk = ctx.sq_norms()[k];
        let zk = &z[k * n..(k + 1) * n];
        let bk = &beta[k * n..(k + 1) * n];
        for a in 0..cs[0] {
            for b in 0..cs[1] {
                let row = ((cell.lo[0] + a - region.lo[0]) * rs[1] + (cell.lo[1] + b - region.lo[1])) * rs[2]
                    + (cell.lo[2] - region.lo[2]);
                for c in 0..cs[2] {
                    let i = row + c;
                    let (znew, dz) = if nk == 0.0 {
                        (zk[i], 0.0)
                    } else {
                        let v = soft_threshold(bk[i], lambda) / nk;
                        (v, v - zk[i])
                    };
                    let mag = dz.abs();
                    if mag > best_mag {
                        best_mag = mag;
                        best = Some(CandidateUpdate {
                            atom: k,
                            pos: [cell.lo[0] + a, cell.lo[1] + b, cell.lo[2] + c],
                            old: zk[i],
                            new: znew,
                            delta: dz,
                        });
                    }
                }
            }
        }
    }
    best
}

/// Adds `dz` to `Z_k0[pos]` (when stored in `region`) and updates `beta` on
/// the neighborhood of `pos`, leaving `beta_k0[pos]` itself untouched.
pub(crate) fn apply_on(
    ctx: &CscContext,
    region: &Region,
    z: &mut [f64],
    beta: &mut [f64],
    k0: usize,
    pos: Pos,
    dz: f64,
) {
    if dz == 0.0 {
        return;
    }
    let n = region.len();
    let own = region
        .contains(pos)
        .then(|| k0 * n + region.local(pos));
    let saved = own.map(|i| beta[i]);
    let hood = Region::neighborhood(pos, ctx.support(), region);
    if !hood.is_empty() {
        let l = ctx.support().shape();
        let lag = ctx.cross().lag_shape();
        let rs = region.shape();
        let hs = hood.shape();
        for k in 0..ctx.atoms() {
            let g = ctx.cross().slice(k0, k);
            let bk = &mut beta[k * n..(k + 1) * n];
            for a in 0..hs[0] {
                let wa = hood.lo[0] + a;
                let la = wa + l[0] - 1 - pos[0];
                for b in 0..hs[1] {
                    let wb = hood.lo[1] + b;
                    let lb = wb + l[1] - 1 - pos[1];
                    let bi = ((wa - region.lo[0]) * rs[1] + (wb - region.lo[1])) * rs[2]
                        + (hood.lo[2] - region.lo[2]);
                    let gi = (la * lag[1] + lb) * lag[2] + (hood.lo[2] + l[2] - 1 - pos[2]);
                    for (bv, gv) in bk[bi..bi + hs[2]].iter_mut().zip(&g[gi..gi + hs[2]]) {
                        *bv -= gv * dz;
                    }
                }
            }
        }
    }
    if let (Some(i), Some(v)) = (own, saved) {
        beta[i] = v;
        z[i] += dz;
    }
}
