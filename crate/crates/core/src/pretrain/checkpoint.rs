//! Binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! "GCRM" | u32 version | u64 meta length | meta (JSON)
//! records: u32 name length | name | u32 rank | u64 extent * rank | f32 * numel
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! Records are `param/<name>` for every parameter in store order, then
//! `adam.m/<name>` and `adam.v/<name>` for every parameter with optimizer
//! state. Example generation is keyed by `(seed, step)`, so the metadata's
//! seed and step fully describe the sampling state.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::TaskSpec;
use crate::model::{check_params, ModelConfig};
use crate::tensorcore::{AdamState, ParamStore, Tensor};

use super::trainer::TrainConfig;
use super::vocab::Vocabulary;

pub const MAGIC: &[u8; 4] = b"GCRM";
pub const VERSION: u32 = 1;

/// Everything in a checkpoint except tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Completed optimizer updates.
    pub step: u64,
    pub vocab: Vocabulary,
    /// Present on fine-tuned checkpoints.
    pub task: Option<TaskSpec>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub adam: AdamState,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("record {name} has absurd shape {shape:?}")))?;
        let raw = self.take(bytes)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|_| Error::Checkpoint(format!("record {name} has invalid shape {shape:?}")))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(16 + meta.len() + 4 * 3 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (name, t) in self.params.iter() {
            put_tensor(&mut out, &format!("param/{name}"), t);
        }
        for (prefix, moments) in [("adam.m", &self.adam.first), ("adam.v", &self.adam.second)] {
            for (name, _) in self.params.iter() {
                if let Some(t) = moments.get(name) {
                    put_tensor(&mut out, &format!("{prefix}/{name}"), t);
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let mut r = Reader { buf: bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        if bytes.len() < 20 {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch (corrupt or truncated file)".into()));
        }
        let mut r = Reader { buf: body, pos: r.pos };
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;

        let mut params = ParamStore::new();
        let mut adam = AdamState::new();
        adam.step = meta.step;
        while r.remaining() > 0 {
            let (name, t) = r.tensor()?;
            if let Some(p) = name.strip_prefix("param/") {
                params.insert(p, t);
            } else if let Some(p) = name.strip_prefix("adam.m/") {
                adam.first.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix("adam.v/") {
                adam.second.insert(p.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unknown record {name}")));
            }
        }
        for (name, t) in adam.first.iter().chain(adam.second.iter()) {
            let p = params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
            if p.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state for {name} has shape {:?}, parameter has {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
        }
        Ok(Self { meta, params, adam })
    }

    /// Writes through a temporary file so an interrupted save never clobbers
    /// an existing checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rejects checkpoints whose backbone does not fit `cfg`, naming both shapes.
    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        check_params(cfg, &self.params)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.meta == other.meta && self.params.bit_eq(&other.params) && self.adam.bit_eq(&other.adam)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
