//! Binary checkpoint container of named f32 tensors.
//!
//! Layout (all integers little-endian u32):
//!
//! ```text
//! "SVDF"  version  tensor_count
//! repeated tensor_count times:
//!     name_len  name (UTF-8, name_len bytes)
//!     rank  dim_0 .. dim_{rank-1}
//!     data: prod(dims) little-endian f32 values, row-major
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{KwsError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::training::AdvHeadParams;
use crate::Real;

pub const MAGIC: &[u8; 4] = b"SVDF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(params: &ModelParams<T>, head: Option<&AdvHeadParams<T>>) -> Self {
        let mut tensors = params.to_named_f32();
        if let Some(head) = head {
            tensors.extend(head.to_named_f32());
        }
        Self { tensors }
    }

    pub fn map(&self) -> BTreeMap<String, ArrayD<f32>> {
        self.tensors.iter().cloned().collect()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::infer(&self.map())
    }

    /// Loads model parameters, checking them against `config` when given.
    pub fn model_params<T: Real>(&self, config: Option<&ModelConfig>) -> Result<ModelParams<T>> {
        let map = self.map();
        let inferred;
        let config = match config {
            Some(c) => c,
            None => {
                inferred = ModelConfig::infer(&map)?;
                &inferred
            }
        };
        ModelParams::from_tensors(config, &map)
    }

    pub fn head_params<T: Real>(&self) -> Result<Option<AdvHeadParams<T>>> {
        AdvHeadParams::from_tensors(&self.map())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in tensor.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(KwsError::Checkpoint("bad magic, not an SVDF checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(KwsError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| KwsError::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| KwsError::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| KwsError::Checkpoint(format!("{name}: {e}")))?;
            tensors.push((name, tensor));
        }
        if r.pos != bytes.len() {
            return Err(KwsError::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| KwsError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| KwsError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| KwsError::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
