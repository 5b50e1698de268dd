//! Named-tensor checkpoint container.
//!
//! Layout (all integers and floats little-endian, independent of host):
//!
//! ```text
//! magic        4 bytes  "URAD"
//! version      u32      = 1
//! n_tensors    u32
//! n_tensors x {
//!     name_len u32, name (UTF-8)
//!     dtype    u8       0 = f32, 1 = f64
//!     ndim     u32, dims u64 x ndim
//!     payload  row-major, prod(dims) elements of dtype
//! }
//! n_scalars    u32
//! n_scalars x { name_len u32, name (UTF-8), value f64 }
//! ```
//!
//! Writers always emit `f64`. Files are written to a temporary sibling and
//! renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"URAD";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a URAD checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("entry name is not valid UTF-8")]
    BadName,
    #[error("trailing bytes after scalar table")]
    TrailingBytes,
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// In-memory form of a checkpoint file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors {
    pub tensors: Vec<(String, Tensor)>,
    pub scalars: Vec<(String, f64)>,
}

impl NamedTensors {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.scalars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_name(&mut out, name);
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.scalars.len() as u32).to_le_bytes());
        for (name, v) in &self.scalars {
            put_name(&mut out, name);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.name()?;
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let count: usize = shape.iter().product();
            let data = match dtype {
                DTYPE_F64 => r
                    .take(count * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DTYPE_F32 => r
                    .take(count * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                other => return Err(CheckpointError::BadDtype(other)),
            };
            tensors.push((name, Tensor::from_parts(shape, data)));
        }
        let ns = r.u32()? as usize;
        let mut scalars = Vec::with_capacity(ns.min(1 << 16));
        for _ in 0..ns {
            let name = r.name()?;
            let v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            scalars.push((name, v));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes);
        }
        Ok(NamedTensors { tensors, scalars })
    }

    /// Writes via a temporary file and an atomic rename.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir)?;
        let file_name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into());
        let tmp = dir.join(format!(".{file_name}.tmp"));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.encode())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path)?;
        Self::decode(&bytes)
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
            }),
        }
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::BadName)
    }
}
