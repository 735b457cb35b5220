//! Zero-padded convolution and correlation between activations, signals and
//! dictionaries.
//!
//! Two evaluation paths exist: direct summation, and an FFT path used when
//! the atom support is large. Both produce "same-size" outputs on the domain.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::array::{ActivationMap, Dictionary, Signal};
use super::domain::{Domain, Region, MAX_DIMS};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// Atom supports with more than this many positions use the FFT path when
/// [`ConvMethod::Auto`] is selected.
pub const DEFAULT_FFT_THRESHOLD: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMethod {
    Auto { threshold: usize },
    Direct,
    Fft,
}

impl Default for ConvMethod {
    fn default() -> Self {
        ConvMethod::Auto {
            threshold: DEFAULT_FFT_THRESHOLD,
        }
    }
}

impl ConvMethod {
    fn use_fft(self, support: &Domain) -> bool {
        match self {
            ConvMethod::Auto { threshold } => support.len() > threshold,
            ConvMethod::Direct => false,
            ConvMethod::Fft => true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ConvOptions {
    pub method: ConvMethod,
    pub exec: Execution,
}

/// `ST(u, lambda) = sign(u) max(|u| - lambda, 0)`.
#[inline]
pub fn soft_threshold(u: f64, lambda: f64) -> f64 {
    debug_assert!(lambda >= 0.0);
    if u > lambda {
        u - lambda
    } else if u < -lambda {
        u + lambda
    } else {
        0.0
    }
}

/// `Z * D`, the reconstruction of a signal from its activations.
pub fn convolve(z: &ActivationMap, d: &Dictionary) -> Result<Signal> {
    convolve_with(z, d, ConvOptions::default())
}

pub fn convolve_with(z: &ActivationMap, d: &Dictionary, opts: ConvOptions) -> Result<Signal> {
    if z.atoms() != d.atoms() {
        return Err(Error::Shape(format!(
            "activation has {} atoms, dictionary has {}",
            z.atoms(),
            d.atoms()
        )));
    }
    if !z.domain().fits(d.support()) {
        return Err(Error::Shape(format!(
            "atom support {:?} does not fit in {:?}",
            d.support().sizes(),
            z.domain().sizes()
        )));
    }
    if opts.method.use_fft(d.support()) {
        Ok(convolve_fft(z, d))
    } else {
        Ok(convolve_direct(z, d))
    }
}

fn convolve_direct(z: &ActivationMap, d: &Dictionary) -> Signal {
    let dom = *z.domain();
    let p = d.channels();
    let mut out = Signal::zeros(dom, p);
    let t = dom.shape();
    let l = d.support().shape();
    let data = out.data_mut();
    for (k, u, val) in z.nonzeros() {
        let atom = d.atom(k);
        for a in 0..l[0].min(t[0] - u[0]) {
            for b in 0..l[1].min(t[1] - u[1]) {
                let n2 = l[2].min(t[2] - u[2]);
                let dst = dom.flat([u[0] + a, u[1] + b, u[2]]) * p;
                let src = ((a * l[1] + b) * l[2]) * p;
                let dst = &mut data[dst..dst + n2 * p];
                for (o, s) in dst.iter_mut().zip(&atom[src..src + n2 * p]) {
                    *o += val * s;
                }
            }
        }
    }
    out
}

/// Cross-correlation of `x` with every atom, `(X * D~_k)[w]`, on the whole
/// domain.
pub fn correlate(x: &Signal, d: &Dictionary) -> Result<ActivationMap> {
    correlate_with(x, d, ConvOptions::default())
}

pub fn correlate_with(x: &Signal, d: &Dictionary, opts: ConvOptions) -> Result<ActivationMap> {
    let region = x.domain().region();
    let data = correlate_region(x, d, &region, opts)?;
    ActivationMap::from_vec(*x.domain(), d.atoms(), data)
}

/// Correlation restricted to `region`, returned atom-major over the box in
/// row-major position order.
pub fn correlate_region(
    x: &Signal,
    d: &Dictionary,
    region: &Region,
    opts: ConvOptions,
) -> Result<Vec<f64>> {
    if x.channels() != d.channels() {
        return Err(Error::Shape(format!(
            "signal has {} channels, dictionary has {}",
            x.channels(),
            d.channels()
        )));
    }
    if x.domain().dims() != d.support().dims() {
        return Err(Error::Shape("signal and atoms differ in dimension count".into()));
    }
    let dom = x.domain().region();
    if region.intersect(&dom) != *region {
        return Err(Error::Shape("correlation region exceeds the signal domain".into()));
    }
    let n = region.len();
    let mut out = vec![0.0; n * d.atoms()];
    if n == 0 {
        return Ok(out);
    }
    if opts.method.use_fft(d.support()) {
        correlate_region_fft(x, d, region, &mut out);
    } else {
        par::for_each_chunk_mut(opts.exec, &mut out, n, |k, chunk| {
            correlate_atom_direct(x, d, k, region, chunk)
        });
    }
    Ok(out)
}

fn correlate_atom_direct(x: &Signal, d: &Dictionary, k: usize, region: &Region, out: &mut [f64]) {
    let dom = *x.domain();
    let t = dom.shape();
    let l = d.support().shape();
    let p = d.channels();
    let atom = d.atom(k);
    let xs = x.data();
    for (i, w) in region.positions().enumerate() {
        let mut acc = 0.0;
        for a in 0..l[0].min(t[0] - w[0]) {
            for b in 0..l[1].min(t[1] - w[1]) {
                let n2 = l[2].min(t[2] - w[2]) * p;
                let xi = dom.flat([w[0] + a, w[1] + b, w[2]]) * p;
                let di = ((a * l[1] + b) * l[2]) * p;
                acc += xs[xi..xi + n2]
                    .iter()
                    .zip(&atom[di..di + n2])
                    .map(|(u, v)| u * v)
                    .sum::<f64>();
            }
        }
        out[i] = acc;
    }
}

/// In-place d-dimensional FFT over a row-major buffer of shape `shape`.
fn fft_nd(planner: &mut FftPlanner<f64>, buf: &mut [Complex64], shape: [usize; MAX_DIMS], inverse: bool) {
    let mut line = Vec::new();
    for axis in 0..MAX_DIMS {
        let n = shape[axis];
        if n == 1 {
            continue;
        }
        let fft = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        let stride: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        line.resize(n, Complex64::new(0.0, 0.0));
        for o in 0..outer {
            for s in 0..stride {
                let base = o * n * stride + s;
                for (i, v) in line.iter_mut().enumerate() {
                    *v = buf[base + i * stride];
                }
                fft.process(&mut line);
                for (i, v) in line.iter().enumerate() {
                    buf[base + i * stride] = *v;
                }
            }
        }
    }
}

fn flat3(shape: [usize; MAX_DIMS], p: [usize; MAX_DIMS]) -> usize {
    (p[0] * shape[1] + p[1]) * shape[2] + p[2]
}

fn correlate_region_fft(x: &Signal, d: &Dictionary, region: &Region, out: &mut [f64]) {
    let dom = x.domain().region();
    let l = d.support().shape();
    let p = d.channels();
    // X is only read on [lo, hi + L - 1[ for outputs in the region.
    let mut src = *region;
    for i in 0..MAX_DIMS {
        src.hi[i] = (region.hi[i] + l[i] - 1).min(dom.hi[i]);
    }
    let ss = src.shape();
    let mut shape = [1; MAX_DIMS];
    for i in 0..MAX_DIMS {
        shape[i] = ss[i] + l[i] - 1;
    }
    let total: usize = shape.iter().product();
    let mut planner = FftPlanner::new();
    let zero = Complex64::new(0.0, 0.0);

    let mut xf = Vec::with_capacity(p);
    for c in 0..p {
        let mut buf = vec![zero; total];
        for w in src.positions() {
            let lw = [w[0] - src.lo[0], w[1] - src.lo[1], w[2] - src.lo[2]];
            buf[flat3(shape, lw)] = Complex64::new(x.get(w, c), 0.0);
        }
        fft_nd(&mut planner, &mut buf, shape, false);
        xf.push(buf);
    }
    let n = region.len();
    let rs = region.shape();
    let support = d.support().region();
    for k in 0..d.atoms() {
        let mut acc = vec![zero; total];
        for (c, xc) in xf.iter().enumerate() {
            // Reversed atom, so that full convolution at w + L - 1 is the
            // correlation at w.
            let mut buf = vec![zero; total];
            for tau in support.positions() {
                let r = [l[0] - 1 - tau[0], l[1] - 1 - tau[1], l[2] - 1 - tau[2]];
                buf[flat3(shape, r)] = Complex64::new(d.get(k, tau, c), 0.0);
            }
            fft_nd(&mut planner, &mut buf, shape, false);
            for ((a, u), v) in acc.iter_mut().zip(xc).zip(&buf) {
                *a += u * v;
            }
        }
        fft_nd(&mut planner, &mut acc, shape, true);
        let scale = 1.0 / total as f64;
        let dst = &mut out[k * n..(k + 1) * n];
        for a in 0..rs[0] {
            for b in 0..rs[1] {
                for c in 0..rs[2] {
                    let i = flat3(shape, [a + l[0] - 1, b + l[1] - 1, c + l[2] - 1]);
                    dst[(a * rs[1] + b) * rs[2] + c] = acc[i].re * scale;
                }
            }
        }
    }
}

fn convolve_fft(z: &ActivationMap, d: &Dictionary) -> Signal {
    let dom = *z.domain();
    let t = dom.shape();
    let l = d.support().shape();
    let p = d.channels();
    let mut shape = [1; MAX_DIMS];
    for i in 0..MAX_DIMS {
        shape[i] = t[i] + l[i] - 1;
    }
    let total: usize = shape.iter().product();
    let zero = Complex64::new(0.0, 0.0);
    let mut planner = FftPlanner::new();
    let mut acc = vec![vec![zero; total]; p];
    let support = d.support().region();
    for k in 0..d.atoms() {
        let zk = z.channel(k);
        if zk.iter().all(|v| *v == 0.0) {
            continue;
        }
        let mut zf = vec![zero; total];
        for (i, v) in zk.iter().enumerate() {
            if *v != 0.0 {
                zf[flat3(shape, dom.unflat(i))] = Complex64::new(*v, 0.0);
            }
        }
        fft_nd(&mut planner, &mut zf, shape, false);
        for (c, ac) in acc.iter_mut().enumerate() {
            let mut buf = vec![zero; total];
            for tau in support.positions() {
                buf[flat3(shape, tau)] = Complex64::new(d.get(k, tau, c), 0.0);
            }
            fft_nd(&mut planner, &mut buf, shape, false);
            for ((a, u), v) in ac.iter_mut().zip(&zf).zip(&buf) {
                *a += u * v;
            }
        }
    }
    let mut out = Signal::zeros(dom, p);
    let scale = 1.0 / total as f64;
    for (c, mut ac) in acc.into_iter().enumerate() {
        fft_nd(&mut planner, &mut ac, shape, true);
        for w in dom.region().positions() {
            out.set(w, c, ac[flat3(shape, w)].re * scale);
        }
    }
    out
}

/// `lambda_max = ||X * D~||_inf` over the positions where an atom fits
/// entirely inside the domain. For `lambda >= lambda_max` the sparse code
/// `Z = 0` is optimal.
pub fn lambda_max(x: &Signal, d: &Dictionary) -> Result<f64> {
    d.check_compatible(x.domain(), x.channels())?;
    let coding = x.domain().coding_region(d.support());
    let beta = correlate_region(x, d, &coding, ConvOptions::default())?;
    Ok(beta.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// `1/2 ||X - Z * D||^2 + lambda ||Z||_1`.
pub fn objective(x: &Signal, z: &ActivationMap, d: &Dictionary, lambda: f64) -> Result<f64> {
    if z.domain() != x.domain() {
        return Err(Error::Shape("activation and signal domains differ".into()));
    }
    d.check_compatible(x.domain(), x.channels())?;
    let rec = convolve(z, d)?;
    let r: f64 = x
        .data()
        .iter()
        .zip(rec.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(0.5 * r + lambda * z.l1_norm())
}

/// `G[k0][k][tau]` for one pair of atoms, over lags `tau` in
/// `prod [-L_i + 1, L_i[`, indexed by `tau + L - 1`.
pub fn cross_pair(d: &Dictionary, k0: usize, k: usize) -> Vec<f64> {
    let l = d.support().shape();
    let lag_shape = d.support().lag_shape();
    let support = d.support().region();
    let p = d.channels();
    let mut out = vec![0.0; lag_shape.iter().product()];
    for lag in Region::new([0; MAX_DIMS], lag_shape).positions() {
        let tau = [0, 1, 2].map(|i| lag[i] as isize - (l[i] as isize - 1));
        let mut acc = 0.0;
        for u in support.positions() {
            let v = [0, 1, 2].map(|i| u[i] as isize + tau[i]);
            if !d.support().contains(v) {
                continue;
            }
            let v = v.map(|c| c as usize);
            for c in 0..p {
                acc += d.get(k, u, c) * d.get(k0, v, c);
            }
        }
        out[flat3(lag_shape, lag)] = acc;
    }
    out
}

/// Table of atom cross-correlations `G[k0][k][tau] = sum_u <D_k[u], D_k0[u + tau]>`
/// for lags `tau` in `prod [-L_i + 1, L_i[`.
///
/// An update of `Z_k0[w0]` by `dz` changes `beta_k[w]` by
/// `-G[k0][k][w - w0] * dz`.
#[derive(Debug, Clone)]
pub struct AtomCross {
    atoms: usize,
    support: [usize; MAX_DIMS],
    lag_shape: [usize; MAX_DIMS],
    data: Vec<f64>,
}

impl AtomCross {
    pub fn new(d: &Dictionary) -> Self {
        let k_n = d.atoms();
        let nlag: usize = d.support().lag_shape().iter().product();
        let mut data = Vec::with_capacity(k_n * k_n * nlag);
        for k0 in 0..k_n {
            for k in 0..k_n {
                data.extend(cross_pair(d, k0, k));
            }
        }
        AtomCross {
            atoms: k_n,
            support: d.support().shape(),
            lag_shape: d.support().lag_shape(),
            data,
        }
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn lag_shape(&self) -> [usize; MAX_DIMS] {
        self.lag_shape
    }

    /// Lag-domain slice for the pair `(k0, k)`, indexed by `tau + L - 1`.
    #[inline]
    pub fn slice(&self, k0: usize, k: usize) -> &[f64] {
        let nlag: usize = self.lag_shape.iter().product();
        let base = (k0 * self.atoms + k) * nlag;
        &self.data[base..base + nlag]
    }

    /// `G[k0][k][tau]`, zero outside the lag domain.
    pub fn value(&self, k0: usize, k: usize, tau: [isize; MAX_DIMS]) -> f64 {
        let mut idx = [0usize; MAX_DIMS];
        for i in 0..MAX_DIMS {
            let v = tau[i] + self.support[i] as isize - 1;
            if v < 0 || v as usize >= self.lag_shape[i] {
                return 0.0;
            }
            idx[i] = v as usize;
        }
        self.slice(k0, k)[flat3(self.lag_shape, idx)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Domain;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_dict(rng: &mut ChaCha8Rng, k: usize, p: usize, l: &[usize]) -> Dictionary {
        let s = Domain::new(l).unwrap();
        let data = (0..k * s.len() * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        Dictionary::from_vec(k, p, s, data).unwrap()
    }

    fn rand_signal(rng: &mut ChaCha8Rng, t: &[usize], p: usize) -> Signal {
        let d = Domain::new(t).unwrap();
        let data = (0..d.len() * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        Signal::from_vec(d, p, data).unwrap()
    }

    // Nested-loop oracle written against the zero-padded definition.
    fn corr_oracle(x: &Signal, d: &Dictionary) -> ActivationMap {
        let dom = *x.domain();
        let mut out = ActivationMap::zeros(dom, d.atoms());
        for k in 0..d.atoms() {
            for w in dom.region().positions() {
                let mut acc = 0.0;
                for tau in d.support().region().positions() {
                    let q = [
                        (w[0] + tau[0]) as isize,
                        (w[1] + tau[1]) as isize,
                        (w[2] + tau[2]) as isize,
                    ];
                    for c in 0..d.channels() {
                        acc += x.get_padded(q, c) * d.get(k, tau, c);
                    }
                }
                out.set(k, w, acc);
            }
        }
        out
    }

    #[test]
    fn soft_threshold_values() {
        assert_eq!(soft_threshold(2.0, 0.5), 1.5);
        assert_eq!(soft_threshold(-0.3, 0.5), 0.0);
        assert_eq!(soft_threshold(-2.0, 0.5), -1.5);
    }

    #[test]
    fn correlate_matches_oracle_1d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_signal(&mut rng, &[16], 2);
        let d = rand_dict(&mut rng, 2, 2, &[3]);
        let got = correlate(&x, &d).unwrap();
        let want = corr_oracle(&x, &d);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn correlate_zero_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Signal::zeros(Domain::new(&[10]).unwrap(), 1);
        let d = rand_dict(&mut rng, 2, 1, &[3]);
        assert!(correlate(&x, &d).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn correlate_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_signal(&mut rng, &[10], 2);
        let d = rand_dict(&mut rng, 2, 1, &[3]);
        assert!(matches!(correlate(&x, &d), Err(Error::Shape(_))));
    }

    #[test]
    fn fft_paths_agree_with_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (t, l) in [(vec![40], vec![7]), (vec![12, 15], vec![4, 5]), (vec![6, 7, 8], vec![2, 3, 2])] {
            let x = rand_signal(&mut rng, &t, 2);
            let d = rand_dict(&mut rng, 3, 2, &l);
            let direct = ConvOptions {
                method: ConvMethod::Direct,
                exec: Execution::Sequential,
            };
            let fft = ConvOptions {
                method: ConvMethod::Fft,
                exec: Execution::Sequential,
            };
            let a = correlate_with(&x, &d, direct).unwrap();
            let b = correlate_with(&x, &d, fft).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-8);
            }
            let region = Region::new([1, 0, 0], [3, t.get(1).map_or(1, |v| v - 1), 1]);
            let ra = correlate_region(&x, &d, &region, direct).unwrap();
            let rb = correlate_region(&x, &d, &region, fft).unwrap();
            for (u, v) in ra.iter().zip(&rb) {
                assert!((u - v).abs() < 1e-8);
            }
            let mut z = ActivationMap::zeros(*x.domain(), 3);
            for v in z.data_mut().iter_mut() {
                if rng.random_bool(0.2) {
                    *v = rng.random_range(-2.0..2.0);
                }
            }
            let ca = convolve_with(&z, &d, direct).unwrap();
            let cb = convolve_with(&z, &d, fft).unwrap();
            for (u, v) in ca.data().iter().zip(cb.data()) {
                assert!((u - v).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn dirac_reproduces_atom() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = rand_dict(&mut rng, 2, 2, &[3, 2]);
        let dom = Domain::new(&[6, 5]).unwrap();
        let mut z = ActivationMap::zeros(dom, 2);
        z.set(1, [0, 0, 0], 1.0);
        let x = convolve(&z, &d).unwrap();
        for w in dom.region().positions() {
            for c in 0..2 {
                let want = if w[0] < 3 && w[1] < 2 { d.get(1, w, c) } else { 0.0 };
                assert_eq!(x.get(w, c), want);
            }
        }
        let zero = ActivationMap::zeros(dom, 2);
        assert!(convolve(&zero, &d).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lambda_max_small_example() {
        let x = Signal::from_vec(Domain::new(&[4]).unwrap(), 1, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let d = Dictionary::from_vec(1, 1, Domain::new(&[2]).unwrap(), vec![1.0, 0.5]).unwrap();
        assert_eq!(lambda_max(&x, &d).unwrap(), 1.0);
        let x0 = Signal::zeros(Domain::new(&[4]).unwrap(), 1);
        assert_eq!(lambda_max(&x0, &d).unwrap(), 0.0);
    }

    #[test]
    fn atom_cross_matches_inner_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = rand_dict(&mut rng, 2, 2, &[3, 2]);
        let g = AtomCross::new(&d);
        let dom = Domain::new(&[9, 8]).unwrap();
        // <e_w * D_k, e_w0 * D_k0> computed from explicit reconstructions.
        let w0 = [3, 3, 0];
        for k0 in 0..2 {
            let mut z0 = ActivationMap::zeros(dom, 2);
            z0.set(k0, w0, 1.0);
            let a0 = convolve(&z0, &d).unwrap();
            for k in 0..2 {
                for w in Region::new([1, 2, 0], [6, 5, 1]).positions() {
                    let mut z1 = ActivationMap::zeros(dom, 2);
                    z1.set(k, w, 1.0);
                    let a1 = convolve(&z1, &d).unwrap();
                    let ip: f64 = a0.data().iter().zip(a1.data()).map(|(u, v)| u * v).sum();
                    let tau = [
                        w[0] as isize - w0[0] as isize,
                        w[1] as isize - w0[1] as isize,
                        0,
                    ];
                    assert!((g.value(k0, k, tau) - ip).abs() < 1e-12);
                }
            }
        }
    }
}
