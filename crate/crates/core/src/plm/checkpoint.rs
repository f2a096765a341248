//! Versioned binary checkpoint for [`MaskedLm`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "PLMCKPT\0"
//! format_version   u32
//! config           u32 length + UTF-8 TOML of EncoderConfig
//! vocab            u32 length + UTF-8, one token per line
//! dtype            u32 length + "f32" | "f64"
//! param count      u32
//! per parameter:   u32 length + UTF-8 name
//!                  u32 ndim, then ndim x u64 dims
//!                  prod(dims) scalars of dtype
//! ```

use std::path::Path;

use super::encoder::{EncoderConfig, MaskedLm};
use super::vocab::Vocab;
use crate::autodiff::{ParamGroup, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"PLMCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub format_version: u32,
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub params: Vec<NamedArray<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Snapshot of the `plm` group of `model`.
    pub fn from_model(model: &MaskedLm<T>) -> Self {
        let params = model
            .params
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Plm)
            .map(|(_, p)| NamedArray {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().to_vec(),
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            config: model.config,
            vocab: model.vocab.clone(),
            params,
        }
    }

    pub fn into_model(self) -> Result<MaskedLm<T>> {
        let mut store = ParamStore::new();
        for a in self.params {
            store.add(a.name, ParamGroup::Plm, Tensor::new(a.shape, a.data)?);
        }
        let model = MaskedLm::from_store(self.config, self.vocab, store)?;
        if model.params.len() != 4 + 16 * model.layer_count() + 2 {
            return Err(Error::Checkpoint("unexpected parameter count".into()));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        let config = toml::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        put_str(&mut out, &config);
        put_str(&mut out, &self.vocab.to_text());
        put_str(&mut out, T::DTYPE);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for a in &self.params {
            put_str(&mut out, &a.name);
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &a.data {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Decode a checkpoint. Arrays stored in the other precision are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let format_version = r.u32()?;
        if format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {format_version}")));
        }
        let config: EncoderConfig =
            toml::from_str(&r.string()?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let vocab = Vocab::from_text(&r.string()?)?;
        let dtype = r.string()?;
        let width = match dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
        };
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count * width)?;
            let data = if dtype == T::DTYPE {
                raw.chunks(width).map(T::read_le).collect()
            } else if width == 4 {
                raw.chunks(4).map(|c| T::c(f64::from(f32::read_le(c)))).collect()
            } else {
                raw.chunks(8).map(|c| T::c(f64::read_le(c))).collect()
            };
            params.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            format_version,
            config,
            vocab,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
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
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl<T: Scalar> MaskedLm<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint::from_model(self).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::load(path)?.into_model()
    }
}
