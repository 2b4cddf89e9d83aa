//! Binary checkpoint format.
//!
//! ```text
//! "TPFN" | version u32 | config length u32 | config JSON
//! | tensor count u32 | per tensor: name length u32, name, ndim u32,
//!   dims u32 x ndim, f32 x numel | SHA-256 of everything before
//! ```
//! All integers and floats are little-endian.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{param_specs, ModelConfig, ModelError, TimePfn};
use crate::autodiff::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TPFN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

impl<T: Scalar> TimePfn<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION as usize);
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        put_u32(&mut out, cfg.len());
        out.extend_from_slice(&cfg);
        put_u32(&mut out, self.params.len());
        for (spec, p) in self.specs.iter().zip(&self.params) {
            put_u32(&mut out, spec.name.len());
            out.extend_from_slice(spec.name.as_bytes());
            put_u32(&mut out, p.shape.len());
            for &d in &p.shape {
                put_u32(&mut out, d);
            }
            for v in &p.data {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, ModelError> {
        if buf.len() < 4 + 32 || buf[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing TPFN magic"));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = r.u32()?;
        let config: ModelConfig = serde_json::from_slice(r.take(len)?)
            .map_err(|e| bad(format!("config: {e}")))?;
        config.validate()?;
        let specs = param_specs(&config);
        let count = r.u32()?;
        if count != specs.len() {
            return Err(bad(format!("{count} tensors, config needs {}", specs.len())));
        }
        let mut params = Vec::with_capacity(count);
        for spec in &specs {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| bad("tensor name is not UTF-8"))?;
            if name != spec.name {
                return Err(bad(format!("expected tensor {}, found {name}", spec.name)));
            }
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            if shape != spec.shape {
                return Err(bad(format!("{name}: shape {shape:?}, expected {:?}", spec.shape)));
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            params.push(Tensor { shape, data });
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Self::from_params(config, params)
    }

    /// Writes the checkpoint through a temporary file in the same directory,
    /// so a failed save never leaves a partial file behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        let io = |source| ModelError::Io {
            path: path.display().to_string(),
            source,
        };
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(&self.to_bytes()).map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&buf)
    }
}
