//! Flat binary container of named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IRC1" | u32 count | count × ( u32 name_len | name (UTF-8) | u32 rank | rank × u64 extent | f64 × numel )
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::{AdamState, ParamStore, RunningStats, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"IRC1";

/// Ordered named tensors as stored on disk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.require(name)?;
        if t.len() != 1 {
            return Err(Error::Checkpoint(format!("{name:?} is not a scalar")));
        }
        Ok(t.data()[0])
    }

    pub fn push_params(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Overwrites every parameter of `store` from `prefix`-named entries.
    pub fn load_params(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = format!("{prefix}{}", store.name(id));
            let t = self.require(&name)?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "{name:?} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.get_mut(id).data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn push_stats(&mut self, prefix: &str, stats: &RunningStats) {
        for (name, s) in stats.iter() {
            let c = s.channels();
            self.push(
                format!("{prefix}{name}.mean"),
                Tensor::new([c], s.mean.clone()).expect("shape"),
            );
            self.push(
                format!("{prefix}{name}.std"),
                Tensor::new([c], s.std.clone()).expect("shape"),
            );
            self.push(
                format!("{prefix}{name}.updates"),
                Tensor::scalar(s.updates as f64),
            );
        }
    }

    pub fn load_stats(&self, prefix: &str, stats: &mut RunningStats) -> Result<()> {
        for (name, s) in stats.iter_mut() {
            let mean = self.require(&format!("{prefix}{name}.mean"))?;
            let std = self.require(&format!("{prefix}{name}.std"))?;
            if mean.len() != s.channels() || std.len() != s.channels() {
                return Err(Error::Checkpoint(format!(
                    "running statistics {name:?} have the wrong width"
                )));
            }
            s.mean.copy_from_slice(mean.data());
            s.std.copy_from_slice(std.data());
            s.updates = self.scalar(&format!("{prefix}{name}.updates"))? as u64;
        }
        Ok(())
    }

    pub fn push_adam(&mut self, prefix: &str, store: &ParamStore, adam: &AdamState) {
        for ((name, _), (m, v)) in store.iter().zip(adam.m.iter().zip(&adam.v)) {
            self.push(format!("{prefix}m.{name}"), m.clone());
            self.push(format!("{prefix}v.{name}"), v.clone());
        }
        self.push(format!("{prefix}step"), Tensor::scalar(adam.step as f64));
    }

    /// Restores moments saved by [`Checkpoint::push_adam`] for the same store.
    pub fn load_adam(&self, prefix: &str, store: &ParamStore, adam: &mut AdamState) -> Result<()> {
        for (i, (name, p)) in store.iter().enumerate() {
            for (kind, dst) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let t = self.require(&format!("{prefix}{kind}.{name}"))?;
                if t.shape() != p.shape() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer moment for {name:?} has the wrong shape"
                    )));
                }
                *dst = t.clone();
            }
        }
        adam.step = self.scalar(&format!("{prefix}step"))? as u64;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad header, expected IRC1".into()));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .filter(|&n| n <= (bytes.len() - r.pos) / 8)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("tensor {name:?} extends past the end of the file"))
                })?;
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
