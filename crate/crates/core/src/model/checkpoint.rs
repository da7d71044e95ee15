//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "AMTFNCKP"
//! version      u32
//! meta_len     u64
//! meta         meta_len bytes of JSON: {"model": ModelConfig, "norm": NormStats | null}
//! count        u32
//! count × { name_len u32, name (UTF-8), rank u32, dims rank × u64, data Π(dims) × f64 }
//! ```
//!
//! Tensors are written in name order, so equal models give equal bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Amtfnet, ModelConfig};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AMTFNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Upper bound on any length field, so corrupt headers fail fast instead of
/// attempting huge allocations.
const MAX_LEN: u64 = 1 << 32;

/// A trained model with the normalization it expects its inputs to carry.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Amtfnet,
    pub norm: Option<NormStats>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    norm: Option<NormStats>,
}

impl Checkpoint {
    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        let meta = serde_json::to_vec(&Meta {
            model: self.model.config().clone(),
            norm: self.norm.clone(),
        })?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        let params = self.model.params();
        buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in params.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.write_all(&buf)
            .map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut r = Reader(input);
        let mut magic = [0u8; 8];
        r.exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let meta_len = r.len()?;
        let meta: Meta = serde_json::from_slice(&r.bytes(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.bytes(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u32()?;
            let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<usize>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| (n as u64) < MAX_LEN);
            let n = n.ok_or_else(|| Error::Checkpoint(format!("parameter {name} has absurd shape {dims:?}")))?;
            let raw = r.bytes(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
            params
                .insert(name, t)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        let mut trailing = [0u8; 1];
        if r.0.read(&mut trailing).map_err(read_err)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
        }
        if let Some(norm) = &meta.norm {
            if norm.mean.len() != meta.model.v || norm.std.len() != meta.model.v {
                return Err(Error::Checkpoint("normalization statistics do not match v".into()));
            }
        }
        Ok(Self {
            model: Amtfnet::from_params(meta.model, params)?,
            norm: meta.norm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

fn read_err(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated or unreadable checkpoint: {e}"))
}

struct Reader<'a, R: Read>(&'a mut R);

impl<R: Read> Reader<'_, R> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.0.read_exact(buf).map_err(read_err)
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn len(&mut self) -> Result<usize> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        let n = u64::from_le_bytes(b);
        if n >= MAX_LEN {
            return Err(Error::Checkpoint(format!("length field {n} out of range")));
        }
        Ok(n as usize)
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.exact(&mut buf)?;
        Ok(buf)
    }
}
