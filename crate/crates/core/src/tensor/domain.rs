use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest number of convolutional dimensions supported.
pub const MAX_DIMS: usize = 3;

/// A position, padded to [`MAX_DIMS`] axes with zeros.
pub type Pos = [usize; MAX_DIMS];

/// A finite integer domain `[0, T_1[ x ... x [0, T_d[`.
///
/// Internally every domain is three-dimensional; unused trailing axes have
/// size one so loops can always be written over three axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Domain {
    dims: usize,
    shape: [usize; MAX_DIMS],
}

impl Domain {
    pub fn new(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() || sizes.len() > MAX_DIMS {
            return Err(Error::Shape(format!(
                "domain must have between 1 and {MAX_DIMS} axes, got {}",
                sizes.len()
            )));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Shape(format!("domain sizes must be positive: {sizes:?}")));
        }
        let mut shape = [1; MAX_DIMS];
        shape[..sizes.len()].copy_from_slice(sizes);
        Ok(Domain {
            dims: sizes.len(),
            shape,
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn sizes(&self) -> &[usize] {
        &self.shape[..self.dims]
    }

    pub fn shape(&self) -> [usize; MAX_DIMS] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row-major flat index of `pos`.
    #[inline]
    pub fn flat(&self, pos: Pos) -> usize {
        (pos[0] * self.shape[1] + pos[1]) * self.shape[2] + pos[2]
    }

    #[inline]
    pub fn unflat(&self, mut idx: usize) -> Pos {
        let p2 = idx % self.shape[2];
        idx /= self.shape[2];
        let p1 = idx % self.shape[1];
        [idx / self.shape[1], p1, p2]
    }

    pub fn contains(&self, pos: [isize; MAX_DIMS]) -> bool {
        (0..MAX_DIMS).all(|i| pos[i] >= 0 && (pos[i] as usize) < self.shape[i])
    }

    /// The whole domain as a box.
    pub fn region(&self) -> Region {
        Region {
            lo: [0; MAX_DIMS],
            hi: self.shape,
        }
    }

    /// `true` if `other` fits inside `self` along every axis.
    pub fn fits(&self, other: &Domain) -> bool {
        self.dims == other.dims && (0..MAX_DIMS).all(|i| other.shape[i] <= self.shape[i])
    }

    /// Positions where an atom of support `support` fits entirely inside
    /// the domain: `[0, T_i - L_i + 1[` per axis.
    pub fn coding_region(&self, support: &Domain) -> Region {
        let mut hi = [1; MAX_DIMS];
        for (i, h) in hi.iter_mut().enumerate() {
            *h = (self.shape[i] + 1).saturating_sub(support.shape[i]);
        }
        Region { lo: [0; MAX_DIMS], hi }
    }

    /// Lag domain `[-L_i + 1, L_i[` sizes, i.e. `2 L_i - 1` per axis.
    pub fn lag_shape(&self) -> [usize; MAX_DIMS] {
        let mut s = [1; MAX_DIMS];
        for i in 0..MAX_DIMS {
            s[i] = 2 * self.shape[i] - 1;
        }
        s
    }
}

impl TryFrom<Vec<usize>> for Domain {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Domain::new(&v)
    }
}

impl From<Domain> for Vec<usize> {
    fn from(d: Domain) -> Self {
        d.sizes().to_vec()
    }
}

/// An axis-aligned half-open box `prod [lo_i, hi_i[`, in global coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub lo: Pos,
    pub hi: Pos,
}

impl Region {
    pub fn new(lo: Pos, hi: Pos) -> Self {
        Region { lo, hi }
    }

    pub fn shape(&self) -> Pos {
        let mut s = [0; MAX_DIMS];
        for i in 0..MAX_DIMS {
            s[i] = self.hi[i].saturating_sub(self.lo[i]);
        }
        s
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        (0..MAX_DIMS).any(|i| self.hi[i] <= self.lo[i])
    }

    #[inline]
    pub fn contains(&self, pos: Pos) -> bool {
        (0..MAX_DIMS).all(|i| pos[i] >= self.lo[i] && pos[i] < self.hi[i])
    }

    pub fn contains_signed(&self, pos: [isize; MAX_DIMS]) -> bool {
        (0..MAX_DIMS).all(|i| pos[i] >= self.lo[i] as isize && pos[i] < self.hi[i] as isize)
    }

    pub fn intersect(&self, other: &Region) -> Region {
        let mut lo = [0; MAX_DIMS];
        let mut hi = [0; MAX_DIMS];
        for i in 0..MAX_DIMS {
            lo[i] = self.lo[i].max(other.lo[i]);
            hi[i] = self.hi[i].min(other.hi[i]).max(lo[i]);
        }
        Region { lo, hi }
    }

    pub fn intersects(&self, other: &Region) -> bool {
        !self.intersect(other).is_empty()
    }

    /// Grows the box by `by[i]` on both sides of every axis, clipped to `clip`.
    pub fn grow(&self, by: Pos, clip: &Region) -> Region {
        let mut lo = [0; MAX_DIMS];
        let mut hi = [0; MAX_DIMS];
        for i in 0..MAX_DIMS {
            lo[i] = self.lo[i].saturating_sub(by[i]).max(clip.lo[i]);
            hi[i] = (self.hi[i] + by[i]).min(clip.hi[i]);
        }
        Region { lo, hi }
    }

    /// Neighborhood `prod [p_i - L_i + 1, p_i + L_i[` of `pos`, clipped to `clip`.
    pub fn neighborhood(pos: Pos, support: &Domain, clip: &Region) -> Region {
        let l = support.shape();
        let mut lo = [0; MAX_DIMS];
        let mut hi = [0; MAX_DIMS];
        for i in 0..MAX_DIMS {
            lo[i] = (pos[i] + 1).saturating_sub(l[i]).max(clip.lo[i]);
            hi[i] = (pos[i] + l[i]).min(clip.hi[i]);
        }
        Region { lo, hi }
    }

    /// Local row-major index of a global position inside this box.
    #[inline]
    pub fn local(&self, pos: Pos) -> usize {
        let s = self.shape();
        ((pos[0] - self.lo[0]) * s[1] + (pos[1] - self.lo[1])) * s[2] + (pos[2] - self.lo[2])
    }

    /// Iterates the positions of the box in row-major order.
    pub fn positions(&self) -> RegionIter {
        RegionIter {
            region: *self,
            next: if self.is_empty() { None } else { Some(self.lo) },
        }
    }
}

pub struct RegionIter {
    region: Region,
    next: Option<Pos>,
}

impl Iterator for RegionIter {
    type Item = Pos;

    fn next(&mut self) -> Option<Pos> {
        let cur = self.next?;
        let mut n = cur;
        let mut axis = MAX_DIMS;
        loop {
            if axis == 0 {
                self.next = None;
                break;
            }
            axis -= 1;
            n[axis] += 1;
            if n[axis] < self.region.hi[axis] {
                self.next = Some(n);
                break;
            }
            n[axis] = self.region.lo[axis];
        }
        Some(cur)
    }
}
