//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic    b"ALCK"
//! version  u32 (= 1)
//! config   u32 length + UTF-8 JSON of the ModelConfig
//! meta     u32 length + UTF-8 JSON of CheckpointMeta
//! count    u32 number of tensors
//! tensor*  u32 name length, UTF-8 name, u8 kind, u32 rank, rank × u64 dims,
//!          numel × f32 values
//! digest   32-byte SHA-256 of every preceding byte
//! ```
//!
//! Tensors include normalization running statistics. Names are the
//! hierarchical parameter paths, so a checkpoint only loads into the
//! architecture described by its own config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{Detector, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::ParamKind;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ALCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub total_loss: Option<f64>,
}

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Weight => 0,
        ParamKind::Bias => 1,
        ParamKind::NormScale => 2,
        ParamKind::NormShift => 3,
        ParamKind::RunningMean => 4,
        ParamKind::RunningVar => 5,
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode(det: &Detector<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_str(&mut buf, &serde_json::to_string(det.config()).expect("config serializes"));
    put_str(&mut buf, &serde_json::to_string(meta).expect("meta serializes"));
    let store = det.params();
    put_u32(&mut buf, store.len() as u32);
    for id in store.ids() {
        let t = store.get(id);
        put_str(&mut buf, store.name(id));
        buf.push(kind_code(store.kind(id)));
        put_u32(&mut buf, t.rank() as u32);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
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

    fn string(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Detector<f32>, CheckpointMeta)> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("digest mismatch; file is corrupt".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg: ModelConfig =
        serde_json::from_str(r.string()?).map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
    let meta: CheckpointMeta = serde_json::from_str(r.string()?).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    let mut det = Detector::<f32>::new(&cfg).map_err(|e| Error::Checkpoint(format!("config does not build: {e}")))?;
    let count = r.u32()? as usize;
    if count != det.params().len() {
        return Err(Error::Checkpoint(format!("{count} tensors, architecture has {}", det.params().len())));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name = r.string()?.to_string();
        let kind = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let store = det.params_mut();
        let id = store.find(&name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        if kind_code(store.kind(id)) != kind || store.get(id).shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!("tensor {name} has wrong kind or shape {shape:?}")));
        }
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        *store.get_mut(id) = Tensor::from_vec(&shape, data);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok((det, meta))
}

pub fn save(path: &Path, det: &Detector<f32>, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, encode(det, meta)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Detector<f32>, CheckpointMeta)> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
