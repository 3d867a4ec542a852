//! `.idck` parameter files and their JSON sidecars.
//!
//! Layout, little-endian: magic `IDCK`, u16 version (1), u32 tensor count,
//! then per tensor a u16-length UTF-8 name, u8 rank, u32 dims, u8 dtype code
//! (0 = f32, 1 = f64) and the raw values. Nothing may follow.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wmlab_tensor::{DType, Element, Tensor};

use crate::backbone::{Model, ModelConfig, ParamStore};
use crate::error::{contract_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"IDCK";
pub const VERSION: u16 = 1;

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

pub fn encode_params<T: Element>(params: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + params.numel() * std::mem::size_of::<T>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
            return Err(contract_err!("parameter {name} cannot be stored"));
        }
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| contract_err!("dimension {d} of {name} exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(dtype_code(t.dtype()));
        for v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format_err(
                self.bytes.len(),
                format!("truncated {what}: need {n} bytes at offset {}", self.pos),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decodes a parameter file into `T`. Stored values of the other precision
/// are rejected rather than silently converted.
pub fn decode_params<T: Element>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let name_at = r.pos;
        let nlen = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "name")?)
            .map_err(|_| format_err(name_at + 2, format!("tensor {i} name is not UTF-8")))?
            .to_owned();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let code_at = r.pos;
        let code = r.u8("dtype")?;
        let want = dtype_code(T::DTYPE);
        if code > 1 {
            return Err(format_err(code_at, format!("unknown dtype code {code}")));
        }
        if code != want {
            return Err(format_err(
                code_at,
                format!("tensor {name} stored with dtype code {code}, expected {want}"),
            ));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format_err(code_at, format!("tensor {name} is too large")))?;
        let size = std::mem::size_of::<T>();
        let raw = r.take(n.saturating_mul(size), "values")?;
        let data: Vec<T> = raw.chunks_exact(size).map(T::read_le).collect();
        store
            .insert(name, Tensor::new(shape, data)?)
            .map_err(|e| format_err(name_at, e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(format_err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

/// Everything besides weights needed to use a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub config_hash: String,
    pub step: usize,
    pub phase: usize,
    /// Training window of the phase that produced the weights.
    pub frames: usize,
    /// Memory span in original-rate frames.
    pub memory_span: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint<T: Element>(path: &Path, model: &Model<T>, meta: &CheckpointMeta) -> Result<()> {
    if &meta.model != model.config() {
        return Err(contract_err!("checkpoint metadata describes a different model"));
    }
    let bytes = encode_params(model.params())?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta).map_err(|e| contract_err!("{e}"))?;
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<(Model<T>, CheckpointMeta)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", side.display())))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = decode_params(&bytes)?;
    let model = Model::from_params(meta.model.clone(), params)?;
    Ok((model, meta))
}
