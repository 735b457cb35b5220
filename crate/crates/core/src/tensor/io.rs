//! `.sig` array container and PNG ingestion.
//!
//! A `.sig` file is a single UTF-8 JSON header line
//! `{"d":..,"sizes":[..],"channels":..,"dtype":"f64"}` followed by the
//! values as little-endian `f64`, row-major over `(position, channel)`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::array::{ActivationMap, Dictionary, Signal};
use super::domain::Domain;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    d: usize,
    sizes: Vec<usize>,
    channels: usize,
    dtype: String,
}

/// Raw contents of a `.sig` container.
#[derive(Debug, Clone, PartialEq)]
pub struct SigArray {
    pub sizes: Vec<usize>,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl SigArray {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            d: self.sizes.len(),
            sizes: self.sizes.clone(),
            channels: self.channels,
            dtype: "f64".into(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: Header = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Format(format!("bad .sig header: {e}")))?;
        if header.dtype != "f64" {
            return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
        }
        if header.d != header.sizes.len() || header.d == 0 {
            return Err(Error::Format("header d does not match sizes".into()));
        }
        let n = header
            .sizes
            .iter()
            .try_fold(header.channels, |acc, s| acc.checked_mul(*s))
            .ok_or_else(|| Error::Format("array too large".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * 8 {
            return Err(Error::Format(format!(
                "expected {} payload bytes, found {}",
                n * 8,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(SigArray {
            sizes: header.sizes,
            channels: header.channels,
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(File::open(path)?)
    }
}

impl From<&Signal> for SigArray {
    fn from(s: &Signal) -> Self {
        SigArray {
            sizes: s.domain().sizes().to_vec(),
            channels: s.channels(),
            data: s.data().to_vec(),
        }
    }
}

impl TryFrom<SigArray> for Signal {
    type Error = Error;
    fn try_from(a: SigArray) -> Result<Self> {
        Signal::from_vec(Domain::new(&a.sizes)?, a.channels, a.data)
    }
}

impl From<&ActivationMap> for SigArray {
    fn from(z: &ActivationMap) -> Self {
        let n = z.domain().len();
        let k_n = z.atoms();
        let mut data = vec![0.0; n * k_n];
        for k in 0..k_n {
            for (i, v) in z.channel(k).iter().enumerate() {
                data[i * k_n + k] = *v;
            }
        }
        SigArray {
            sizes: z.domain().sizes().to_vec(),
            channels: k_n,
            data,
        }
    }
}

impl TryFrom<SigArray> for ActivationMap {
    type Error = Error;
    fn try_from(a: SigArray) -> Result<Self> {
        let dom = Domain::new(&a.sizes)?;
        let k_n = a.channels;
        let n = dom.len();
        if a.data.len() != n * k_n {
            return Err(Error::Format("activation payload size".into()));
        }
        let mut data = vec![0.0; n * k_n];
        for i in 0..n {
            for k in 0..k_n {
                data[k * n + i] = a.data[i * k_n + k];
            }
        }
        ActivationMap::from_vec(dom, k_n, data)
    }
}

impl From<&Dictionary> for SigArray {
    fn from(d: &Dictionary) -> Self {
        let mut sizes = vec![d.atoms()];
        sizes.extend_from_slice(d.support().sizes());
        SigArray {
            sizes,
            channels: d.channels(),
            data: d.data().to_vec(),
        }
    }
}

impl TryFrom<SigArray> for Dictionary {
    type Error = Error;
    fn try_from(a: SigArray) -> Result<Self> {
        if a.sizes.len() < 2 {
            return Err(Error::Format("a dictionary needs a leading atom axis".into()));
        }
        let support = Domain::new(&a.sizes[1..])?;
        Dictionary::from_vec(a.sizes[0], a.channels, support, a.data)
    }
}

/// Loads an 8-bit PNG as a channels-last signal with values in `[0, 1]`.
///
/// Gray images give one channel, color images three (alpha is dropped).
/// With `luminance`, color images are converted to a single gray channel.
pub fn load_png(path: impl AsRef<Path>, luminance: bool) -> Result<Signal> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.color().has_color();
    let dom = Domain::new(&[h, w])?;
    if color && !luminance {
        let rgb = img.to_rgb8();
        let data = rgb.as_raw().iter().map(|v| *v as f64 / 255.0).collect();
        Signal::from_vec(dom, 3, data)
    } else {
        let g = img.to_luma8();
        let data = g.as_raw().iter().map(|v| *v as f64 / 255.0).collect();
        Signal::from_vec(dom, 1, data)
    }
}
