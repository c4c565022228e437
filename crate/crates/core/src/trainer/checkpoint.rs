//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       4 bytes  "TSEM"
//! version     u32
//! digest      32 bytes  SHA-256 of the run configuration
//! records...  until end of file, each:
//!     name_len u32, name bytes (UTF-8),
//!     rank u32, dims u64 x rank,
//!     payload f64 x product(dims)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"TSEM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub config_digest: [u8; 32],
    /// Named tensors in file order. Includes `step` and `rng` records.
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing record {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(None, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let mut config_digest = [0u8; 32];
        config_digest.copy_from_slice(r.take(32)?);
        let mut records = Vec::new();
        while r.pos < bytes.len() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(None, "record name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::format(None, format!("record {name:?} has rank {rank}")));
            }
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.saturating_mul(8) <= bytes.len() - r.pos)
                .ok_or_else(|| Error::format(None, format!("record {name:?} is truncated")))?;
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            records.push((name, Tensor::new(dims, data)?));
        }
        let step_t = records
            .iter()
            .find(|(n, _)| n == "step")
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format(None, "missing step record"))?;
        let step = step_t.item();
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(Error::format(None, format!("invalid step value {step}")));
        }
        Ok(Self {
            step: step as usize,
            config_digest,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the configuration digest.
    pub fn load_compatible(path: impl AsRef<Path>, digest: &[u8; 32]) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if &ckpt.config_digest != digest {
            return Err(Error::IncompatibleCheckpoint(
                "configuration digest does not match this run's configuration".into(),
            ));
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(None, "unexpected end of checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
