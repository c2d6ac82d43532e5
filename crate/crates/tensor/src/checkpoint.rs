//! Versioned binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"BDLCKPT\0"
//! version u32 (= 1)
//! dtype   u8  (1 = f32, 2 = f64)
//! count   u32
//! repeated count times:
//!   name_len u32, name utf-8 bytes
//!   trainable u8
//!   ndim u32, dims u64 * ndim
//!   values (dtype) * prod(dims)
//! ```
//!
//! Hyperparameters go to a JSON sidecar next to the binary file.

use std::fs;
use std::path::{Path, PathBuf};

use crate::element::{DType, Element};
use crate::error::{Result, TensorError};
use crate::optim::ParameterSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"BDLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode<T: Element>(params: &ParameterSet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.trainable as u8);
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode<T: Element>(bytes: &[u8]) -> std::result::Result<ParameterSet<T>, String> {
    let mut r = Reader { bytes, pos: 0 };
    let trunc = || "truncated file".to_string();
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err("bad magic".into());
    }
    let version = r.u32().ok_or_else(trunc)?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let dtype = r.take(1).and_then(|b| DType::from_tag(b[0])).ok_or("unknown dtype")?;
    if dtype != T::DTYPE {
        return Err(format!("stored as {dtype:?}, requested {:?}", T::DTYPE));
    }
    let count = r.u32().ok_or_else(trunc)?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let len = r.u32().ok_or_else(trunc)? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(trunc)?).map_err(|e| e.to_string())?.to_string();
        let trainable = r.take(1).ok_or_else(trunc)?[0] != 0;
        let ndim = r.u32().ok_or_else(trunc)? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(trunc)?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype.size()).ok_or_else(trunc)?;
        let data = raw.chunks(dtype.size()).map(T::read_le).collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| e.to_string())?;
        params.add(&name, t, trainable).map_err(|e| e.to_string())?;
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok(params)
}

/// Write the binary checkpoint and its JSON sidecar.
pub fn save<T: Element>(path: &Path, params: &ParameterSet<T>, hyper: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(params))?;
    let sidecar = serde_json::json!({
        "checkpoint_version": CHECKPOINT_VERSION,
        "dtype": format!("{:?}", T::DTYPE).to_lowercase(),
        "optimizer_steps": params.step_count(),
        "hyperparameters": hyper,
    });
    let text = serde_json::to_string_pretty(&sidecar).expect("json value serializes");
    fs::write(sidecar_path(path), text)?;
    Ok(())
}

pub fn load<T: Element>(path: &Path) -> Result<ParameterSet<T>> {
    let bytes = fs::read(path).map_err(|e| TensorError::Checkpoint { path: path.into(), msg: e.to_string() })?;
    decode(&bytes).map_err(|msg| TensorError::Checkpoint { path: path.into(), msg })
}
