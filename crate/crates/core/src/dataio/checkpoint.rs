//! Model checkpoints in the CLF1 framing.
//!
//! ```text
//! "CLF1" | version u16 = 2 | meta_len u32 | meta (JSON, UTF-8) | count u32 |
//! count x { name_len u16 | name | trainable u8 | rank u8 | dims u32 x rank | f64 LE payload }
//! ```
//!
//! The JSON metadata carries the model dimensions, architecture, token
//! origins and frozen flags, and the session index. All integers are
//! little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cinet::{Architecture, ClassTokenStore, ClassifierBank, ClinModel, ModelConfig};
use crate::dataio::features::MAGIC;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u16 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ClinModel,
    /// Last completed session.
    pub session: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    arch: Architecture,
    tokens: ClassTokenStore,
    bank: ClassifierBank,
    session: usize,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let m = &ckpt.model;
    let meta = serde_json::to_vec(&Meta {
        config: m.config.clone(),
        arch: m.arch,
        tokens: m.tokens.clone(),
        bank: m.bank.clone(),
        session: ckpt.session,
    })
    .map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(m.params.len() as u32).to_le_bytes());
    for (name, t) in m.params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::from(m.params.is_trainable(name)));
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            kind: "checkpoint",
            path: self.path.to_path_buf(),
            detail: format!("at byte {}: {}", self.pos, detail.into()),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!("truncated, wanted {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(r.err("bad magic"));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| r.err(format!("metadata: {e}")))?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| r.err(format!("tensor name: {e}")))?
            .to_string();
        let trainable = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(r.err(format!("bad trainable flag {other}"))),
        };
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(8 * n)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| r.err(e.to_string()))?;
        params.insert(name, t, trainable);
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }
    meta.config.validate()?;
    if meta.bank.len() != meta.tokens.rows() && meta.arch == Architecture::Cinet {
        return Err(r.err("token and classifier counts disagree"));
    }
    Ok(Checkpoint {
        model: ClinModel {
            config: meta.config,
            arch: meta.arch,
            params,
            tokens: meta.tokens,
            bank: meta.bank,
        },
        session: meta.session,
    })
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
