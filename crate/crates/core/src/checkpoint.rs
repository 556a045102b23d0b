//! Binary model container: magic `GDIP1`, format version, the model
//! configuration as JSON and named little-endian `f64` tensors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{GdipError, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::params::Params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"GDIP1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
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
            .ok_or_else(|| GdipError::format("checkpoint", "truncated"))?;
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

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| GdipError::format("checkpoint", "length overflow"))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let mut tensors = Vec::new();
        model.visit("", &mut |name, t| tensors.push((name.to_string(), t.clone())));
        Checkpoint {
            config: model.config.clone(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.extend(VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend((cfg.len() as u64).to_le_bytes());
        out.extend(cfg);
        out.extend((self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(GdipError::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(GdipError::format("checkpoint", format!("unsupported version {version}")));
        }
        let n = r.len()?;
        let config: ModelConfig = serde_json::from_slice(r.take(n)?)?;
        let count = r.len()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| GdipError::format("checkpoint", "tensor name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| GdipError::format("checkpoint", "size overflow"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(GdipError::format("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// Builds the model; every parameter must be present with its shape.
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::new(self.config, 0)?;
        let mut by_name: BTreeMap<String, Tensor> = self.tensors.into_iter().collect();
        let mut err = None;
        model.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match by_name.remove(name) {
                Some(src) if src.shape() == t.shape() => *t = src,
                Some(src) => {
                    err = Some(GdipError::ShapeMismatch {
                        expected: t.shape().to_vec(),
                        actual: src.shape().to_vec(),
                    })
                }
                None => err = Some(GdipError::format("checkpoint", format!("missing tensor {name}"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(GdipError::format("checkpoint", format!("unexpected tensor {extra}")));
        }
        Ok(model)
    }

    /// Drops the regularizer parameter group, leaving a plain detector.
    pub fn strip_regularizer(mut self) -> Self {
        if self.config.variant == Variant::Regularizer {
            self.config.variant = Variant::Baseline;
            self.tensors.retain(|(n, _)| !n.starts_with("reg."));
        }
        self
    }
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_model(path: &Path) -> Result<Model> {
    Checkpoint::load(path)?.into_model()
}
