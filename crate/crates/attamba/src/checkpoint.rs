//! ATMB checkpoints: a little-endian binary container of named f32 tensors,
//! with the model config in a JSON sidecar (`m.atmb` → `m.json`).
//!
//! Layout: `"ATMB"`, version `u32`, record count `u32`, then per record the
//! name length `u32`, the UTF-8 name, the rank `u32`, `rank` extents as
//! `u64`, and the payload as `f32`.

use std::path::{Path, PathBuf};

use attamba_core::model::{ModelConfig, ModelParams};
use attamba_core::numerics::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"ATMB";
pub const VERSION: u32 = 1;

/// Contents of the sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Optimizer updates applied to the weights.
    pub step: usize,
    pub tokens_seen: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams<Tensor<f32>>,
}

pub fn encode(records: &[(String, &Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| HarnessError::Format(format!("truncated {what} at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(HarnessError::Format("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(HarnessError::Format(format!("unsupported version {version}")));
    }
    let count = r.u32("record count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| HarnessError::Format("record name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64("extent")?).map_err(|_| HarnessError::Format("extent overflows".into()))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| HarnessError::Format(format!("`{name}` is too large")))?;
        let payload = r.take(numel, "payload")?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.at != bytes.len() {
        return Err(HarnessError::Format(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(out)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(&ckpt.params.named());
    std::fs::write(path, bytes).map_err(io_err(path))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&ckpt.meta)?;
    std::fs::write(&side, json).map_err(io_err(side))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let records = decode(&bytes)?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(io_err(&side))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let params = ModelParams::from_named(&meta.model, &records)
        .map_err(|e| HarnessError::Config(format!("checkpoint does not match its config: {e}")))?;
    Ok(Checkpoint { meta, params })
}
