use serde::{Deserialize, Serialize};

use super::domain::{Domain, Pos, MAX_DIMS};
use crate::error::{Error, Result};

/// A multichannel signal over a domain, stored row-major over
/// `(position, channel)`. Reads outside the domain are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    domain: Domain,
    channels: usize,
    data: Vec<f64>,
}

impl Signal {
    pub fn zeros(domain: Domain, channels: usize) -> Self {
        assert!(channels > 0, "a signal needs at least one channel");
        Signal {
            domain,
            channels,
            data: vec![0.0; domain.len() * channels],
        }
    }

    pub fn from_vec(domain: Domain, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || data.len() != domain.len() * channels {
            return Err(Error::Shape(format!(
                "signal data has {} values, expected {} x {}",
                data.len(),
                domain.len(),
                channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("signal values".into()));
        }
        Ok(Signal {
            domain,
            channels,
            data,
        })
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, pos: Pos, channel: usize) -> f64 {
        self.data[self.domain.flat(pos) * self.channels + channel]
    }

    /// Zero-padded read.
    pub fn get_padded(&self, pos: [isize; MAX_DIMS], channel: usize) -> f64 {
        if self.domain.contains(pos) {
            self.get(pos.map(|v| v as usize), channel)
        } else {
            0.0
        }
    }

    #[inline]
    pub fn set(&mut self, pos: Pos, channel: usize, v: f64) {
        let i = self.domain.flat(pos) * self.channels + channel;
        self.data[i] = v;
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn sub(&self, other: &Signal) -> Result<Signal> {
        if self.domain != other.domain || self.channels != other.channels {
            return Err(Error::Shape("signal shapes differ".into()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Signal {
            domain: self.domain,
            channels: self.channels,
            data,
        })
    }
}

/// `K` atoms of `P` channels on the support `Theta`.
///
/// Layout: `[atom][position in Theta][channel]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    atoms: usize,
    channels: usize,
    support: Domain,
    data: Vec<f64>,
}

impl Dictionary {
    pub fn zeros(atoms: usize, channels: usize, support: Domain) -> Self {
        assert!(atoms > 0 && channels > 0);
        Dictionary {
            atoms,
            channels,
            support,
            data: vec![0.0; atoms * support.len() * channels],
        }
    }

    pub fn from_vec(atoms: usize, channels: usize, support: Domain, data: Vec<f64>) -> Result<Self> {
        if atoms == 0 || channels == 0 || data.len() != atoms * support.len() * channels {
            return Err(Error::Shape(format!(
                "dictionary data has {} values, expected {atoms} x {} x {channels}",
                data.len(),
                support.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dictionary values".into()));
        }
        Ok(Dictionary {
            atoms,
            channels,
            support,
            data,
        })
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn support(&self) -> &Domain {
        &self.support
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn atom_len(&self) -> usize {
        self.support.len() * self.channels
    }

    pub fn atom(&self, k: usize) -> &[f64] {
        let n = self.atom_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn atom_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.atom_len();
        &mut self.data[k * n..(k + 1) * n]
    }

    #[inline]
    pub fn get(&self, k: usize, tau: Pos, channel: usize) -> f64 {
        self.data[(k * self.support.len() + self.support.flat(tau)) * self.channels + channel]
    }

    /// Squared l2 norm of every atom.
    pub fn sq_norms(&self) -> Vec<f64> {
        (0..self.atoms)
            .map(|k| self.atom(k).iter().map(|v| v * v).sum())
            .collect()
    }

    /// Largest absolute entry of every atom.
    pub fn max_abs(&self) -> Vec<f64> {
        (0..self.atoms)
            .map(|k| self.atom(k).iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .collect()
    }

    /// Checks that this dictionary can encode a signal on `domain` with
    /// `channels` channels.
    pub fn check_compatible(&self, domain: &Domain, channels: usize) -> Result<()> {
        if channels != self.channels {
            return Err(Error::Shape(format!(
                "signal has {channels} channels, dictionary has {}",
                self.channels
            )));
        }
        if !domain.fits(&self.support) {
            return Err(Error::Shape(format!(
                "atom support {:?} does not fit in domain {:?}",
                self.support.sizes(),
                domain.sizes()
            )));
        }
        Ok(())
    }
}

/// The `K`-channel activation signal `Z`. Dense storage, atom-major:
/// `[atom][position]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    domain: Domain,
    atoms: usize,
    data: Vec<f64>,
}

impl ActivationMap {
    pub fn zeros(domain: Domain, atoms: usize) -> Self {
        ActivationMap {
            domain,
            atoms,
            data: vec![0.0; domain.len() * atoms],
        }
    }

    pub fn from_vec(domain: Domain, atoms: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != domain.len() * atoms {
            return Err(Error::Shape(format!(
                "activation data has {} values, expected {atoms} x {}",
                data.len(),
                domain.len()
            )));
        }
        Ok(ActivationMap {
            domain,
            atoms,
            data,
        })
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, k: usize, pos: Pos) -> f64 {
        self.data[k * self.domain.len() + self.domain.flat(pos)]
    }

    #[inline]
    pub fn set(&mut self, k: usize, pos: Pos, v: f64) {
        let i = k * self.domain.len() + self.domain.flat(pos);
        self.data[i] = v;
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.domain.len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn nnz(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    /// Iterates `(atom, position, value)` over the nonzero entries.
    pub fn nonzeros(&self) -> impl Iterator<Item = (usize, Pos, f64)> + '_ {
        let n = self.domain.len();
        self.data
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(move |(i, v)| (i / n, self.domain.unflat(i % n), *v))
    }

    /// `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &ActivationMap, b: f64) -> ActivationMap {
        assert_eq!(self.data.len(), other.data.len());
        ActivationMap {
            domain: self.domain,
            atoms: self.atoms,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonzero_iterator() {
        let d = Domain::new(&[4, 3]).unwrap();
        let mut z = ActivationMap::zeros(d, 2);
        z.set(1, [2, 1, 0], 3.0);
        z.set(0, [0, 2, 0], -1.0);
        let nz: Vec<_> = z.nonzeros().collect();
        assert_eq!(nz, vec![(0, [0, 2, 0], -1.0), (1, [2, 1, 0], 3.0)]);
        assert_eq!(z.nnz(), 2);
        assert_eq!(z.l1_norm(), 4.0);
    }

    #[test]
    fn padded_reads_are_zero() {
        let d = Domain::new(&[3]).unwrap();
        let s = Signal::from_vec(d, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.get_padded([-1, 0, 0], 0), 0.0);
        assert_eq!(s.get_padded([3, 0, 0], 0), 0.0);
        assert_eq!(s.get_padded([2, 0, 0], 0), 3.0);
    }

    #[test]
    fn rejects_non_finite() {
        let d = Domain::new(&[2]).unwrap();
        assert!(Signal::from_vec(d, 1, vec![1.0, f64::NAN]).is_err());
        assert!(Signal::from_vec(d, 1, vec![1.0]).is_err());
    }
}
