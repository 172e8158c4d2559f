//! Binary checkpoint container.
//!
//! ```text
//! magic    8 bytes  "L0DROPCK"
//! version  u32
//! meta     u64 length + UTF-8 `key=value` lines (sorted by key)
//! count    u32
//! manifest count × { u16 name length, name, u8 dtype, u8 rank,
//!                    rank × u64 dims, u64 offset, u64 byte length }
//! payload  raw little-endian tensor data; offsets are relative to its start
//! ```
//!
//! All integers are little-endian.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::numcore::{DType, Real, Tensor};

use super::{ModelConfig, ModelParams};

const MAGIC: &[u8; 8] = b"L0DROPCK";
const VERSION: u32 = 1;
const MODEL_PREFIX: &str = "model.";

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl StoredTensor {
    pub fn from_tensor<T: Real>(name: &str, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Self {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    /// Decodes into `T`, converting when the stored precision differs.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let size = self.dtype.size();
        let data: Vec<T> = match self.dtype {
            DType::F64 => self.bytes.chunks_exact(size).map(|c| T::lit(f64::read_le(c))).collect(),
            DType::F32 => self
                .bytes
                .chunks_exact(size)
                .map(|c| T::lit(f32::read_le(c) as f64))
                .collect(),
        };
        Tensor::new(&self.shape, data).map_err(|e| Error::Format(format!("tensor {}: {e}", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: KvMap,
    pub tensors: Vec<StoredTensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("size overflows usize".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = kv::render(&self.meta);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype.code());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(t.bytes.len() as u64).to_le_bytes());
            offset += t.bytes.len() as u64;
        }
        for t in &self.tensors {
            out.extend_from_slice(&t.bytes);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic; not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.usize()?;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let meta = kv::parse(meta).map_err(|e| Error::Format(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::Format(format!("unknown dtype in {name}")))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let offset = r.usize()?;
            let nbytes = r.usize()?;
            let expected = shape.iter().product::<usize>() * dtype.size();
            if nbytes != expected {
                return Err(Error::Format(format!("tensor {name}: {nbytes} bytes for shape {shape:?}")));
            }
            manifest.push((name, dtype, shape, offset, nbytes));
        }
        let payload = &buf[r.pos..];
        let mut tensors = Vec::with_capacity(count);
        for (name, dtype, shape, offset, nbytes) in manifest {
            let bytes = offset
                .checked_add(nbytes)
                .and_then(|end| payload.get(offset..end))
                .ok_or_else(|| Error::Format(format!("tensor {name} lies outside the payload")))?;
            tensors.push(StoredTensor {
                name,
                dtype,
                shape,
                bytes: bytes.to_vec(),
            });
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn push<T: Real>(&mut self, name: &str, t: &Tensor<T>) {
        self.tensors.push(StoredTensor::from_tensor(name, t));
    }

    /// Stores the model config under `model.*` keys and every parameter.
    pub fn put_model<T: Real>(&mut self, params: &ModelParams<T>) {
        for (k, v) in params.config.to_kv() {
            self.meta.insert(format!("{MODEL_PREFIX}{k}"), v);
        }
        for (name, t) in params.names().iter().zip(params.tensors()) {
            self.push(name, t);
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let sub: KvMap = self
            .meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(MODEL_PREFIX).map(|k| (k.to_string(), v.clone())))
            .collect();
        if sub.is_empty() {
            return Err(Error::Format("checkpoint has no model configuration".into()));
        }
        ModelConfig::from_kv(&sub).map_err(|e| Error::Format(e.to_string()))
    }

    /// Rebuilds the model; tensors outside the parameter set (optimizer
    /// state) are ignored.
    pub fn model<T: Real>(&self) -> Result<ModelParams<T>> {
        let config = self.model_config()?;
        let template = ModelParams::<T>::init(&config, &mut crate::numcore::RngState::new(0))?;
        let mut named = HashMap::new();
        for name in template.names() {
            let st = self
                .tensor(name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            named.insert(name.clone(), st.to_tensor::<T>()?);
        }
        ModelParams::from_named(&config, named)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::RngState;

    fn small() -> ModelParams<f64> {
        let cfg = ModelConfig {
            d: 8,
            ffn_dim: 12,
            heads: 2,
            layers: 1,
            src_vocab: 9,
            tgt_vocab: 9,
            ..Default::default()
        };
        ModelParams::init(&cfg, &mut RngState::new(2)).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut ck = Checkpoint::default();
        ck.meta.insert("step".into(), "17".into());
        ck.put_model(&small());
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model::<f64>().unwrap(), small());
    }

    #[test]
    fn f32_payload_round_trips() {
        let p = small().cast::<f32>();
        let mut ck = Checkpoint::default();
        ck.put_model(&p);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.model::<f32>().unwrap(), p);
        assert_eq!(back.tensors[0].dtype, DType::F32);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut ck = Checkpoint::default();
        ck.put_model(&small());
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
