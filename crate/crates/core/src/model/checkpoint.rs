//! Little-endian tensor archive used for checkpoints and logit dumps.
//!
//! ```text
//! magic     8 bytes  "STEMSEG\0"
//! version   u32      2
//! config    u64      config hash
//! iteration u64
//! stage     u8       0 supervised, 1 burn_in, 2 ema, 255 none
//! count     u32
//! per tensor: name_len u32, name (UTF-8), 4 × u64 dims, f32 data
//! sha256    32 bytes of everything above
//! ```
//!
//! The file must end exactly after the digest.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, ModelParams, Schema};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::sync::Arc;

const MAGIC: &[u8; 8] = b"STEMSEG\0";
const VERSION: u32 = 2;
const DIGEST: usize = 32;
const MAX_NAME: usize = 1 << 12;

/// Training stage a checkpoint was taken in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Supervised,
    BurnIn,
    Ema,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Supervised => "supervised",
            Stage::BurnIn => "burn_in",
            Stage::Ema => "ema",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        match s {
            "supervised" => Some(Stage::Supervised),
            "burn_in" => Some(Stage::BurnIn),
            "ema" => Some(Stage::Ema),
            _ => None,
        }
    }

    fn code(stage: Option<Stage>) -> u8 {
        match stage {
            Some(Stage::Supervised) => 0,
            Some(Stage::BurnIn) => 1,
            Some(Stage::Ema) => 2,
            None => 255,
        }
    }

    fn from_code(code: u8) -> Option<Option<Stage>> {
        match code {
            0 => Some(Some(Stage::Supervised)),
            1 => Some(Some(Stage::BurnIn)),
            2 => Some(Some(Stage::Ema)),
            255 => Some(None),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorArchive {
    pub config_hash: u64,
    pub iteration: u64,
    pub stage: Option<Stage>,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorArchive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.tensors.iter().map(|(n, t)| 4 + n.len() + 32 + 4 * t.len()).sum();
        let mut out = Vec::with_capacity(33 + payload + DIGEST);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.push(Stage::code(self.stage));
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<TensorArchive> {
        if bytes.get(..8).is_some_and(|m| m != MAGIC) {
            return Err(Error::format(path, "bad magic"));
        }
        if bytes.len() < 8 + DIGEST {
            return Err(Error::format(path, "truncated"));
        }
        let (bytes, digest) = bytes.split_at(bytes.len() - DIGEST);
        if Sha256::digest(bytes).as_slice() != digest {
            return Err(Error::format(path, "checksum mismatch"));
        }
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let config_hash = r.u64()?;
        let iteration = r.u64()?;
        let stage = Stage::from_code(r.take(1)?[0]).ok_or_else(|| r.err("bad stage tag"))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            if len > MAX_NAME {
                return Err(r.err("tensor name too long"));
            }
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.err("tensor name is not UTF-8"))?
                .to_string();
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = usize::try_from(r.u64()?).map_err(|_| r.err("dimension overflow"))?;
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| r.err("tensor size overflow"))?;
            let raw = r.take(n)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4"))).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.err(&format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(TensorArchive {
            config_hash,
            iteration,
            stage,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<TensorArchive> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: &str) -> Error {
        Error::format(self.path, format!("{reason} at byte {}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated"));
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
}

/// Parameters plus the metadata stored alongside them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub iteration: u64,
    pub stage: Option<Stage>,
}

pub fn save_checkpoint(path: &Path, model: &Model, iteration: u64, stage: Option<Stage>) -> Result<()> {
    TensorArchive {
        config_hash: model.config.hash(),
        iteration,
        stage,
        tensors: model.params.named().map(|(n, t)| (n.to_string(), t.clone())).collect(),
    }
    .save(path)
}

/// Loads parameters for `config`. A config-hash mismatch is an error unless
/// `force` is set, in which case only the schema has to match.
pub fn load_checkpoint(path: &Path, config: &ModelConfig, force: bool) -> Result<Checkpoint> {
    let archive = TensorArchive::load(path)?;
    let expected = config.hash();
    if archive.config_hash != expected && !force {
        return Err(Error::ConfigHashMismatch {
            expected,
            found: archive.config_hash,
        });
    }
    let schema = Arc::new(Schema::for_config(config)?);
    let params = ModelParams::from_named(schema, archive.tensors).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Checkpoint {
        model: Model { config: *config, params },
        iteration: archive.iteration,
        stage: archive.stage,
    })
}
