//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "LAWCKPT\0" | version u8 | scalar width u8
//! header_len u32 | header JSON (model config + metadata)
//! param_count u32 | per param: name_len u16, name, trainable u8,
//!                   rank u8, dims u64 x rank, payload
//! has_optimizer u8 | step u64, lr f64, beta1 f64, beta2 f64, eps f64,
//!                    count u32, per entry: name_len u16, name, m payload, v payload
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamSet;
use crate::tensor::{Scalar, Tensor};
use crate::training::{Adam, Moments, TrainConfig};

pub const MAGIC: &[u8; 8] = b"LAWCKPT\0";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub best_epoch: Option<usize>,
    pub seed: u64,
    pub train: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub model: ModelConfig,
    pub meta: CheckpointMeta,
    pub params: ParamSet<T>,
    pub adam: Option<Adam<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &Model<T>, meta: CheckpointMeta, adam: Option<&Adam<T>>) -> Self {
        Checkpoint {
            model: model.config.clone(),
            meta,
            params: model.params.clone(),
            adam: adam.cloned(),
        }
    }

    /// Rebuilds the model described by the config and loads the stored values.
    pub fn to_model(&self) -> Result<Model<T>> {
        let mut model = Model::build(&self.model, 0)?;
        model.params.copy_values_from(&self.params).map_err(|e| {
            Error::Load(format!("checkpoint parameters do not fit the stored config: {e}"))
        })?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(T::BYTES);
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            meta: self.meta.clone(),
        })
        .map_err(|e| Error::Internal(format!("header serialization: {e}")))?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for e in self.params.entries() {
            write_name(&mut out, &e.name)?;
            out.push(e.trainable as u8);
            out.push(e.value.shape().len() as u8);
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            e.value.data().iter().for_each(|&v| v.write_le(&mut out));
        }
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.step.to_le_bytes());
                for x in [a.lr, a.beta1, a.beta2, a.eps] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                let present: Vec<_> = a
                    .moments
                    .iter()
                    .enumerate()
                    .filter_map(|(i, m)| m.as_ref().map(|m| (i, m)))
                    .collect();
                out.extend_from_slice(&(present.len() as u32).to_le_bytes());
                for (i, m) in present {
                    let e = self.params.entries().get(i).ok_or_else(|| {
                        Error::Internal("optimizer state for an unknown parameter".into())
                    })?;
                    write_name(&mut out, &e.name)?;
                    m.m.iter().chain(&m.v).for_each(|&v| v.write_le(&mut out));
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Load("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Load(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        let width = r.u8()?;
        if width != 4 && width != 8 {
            return Err(Error::Load(format!("unsupported scalar width {width}")));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Load(format!("bad checkpoint header: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name = r.name()?;
            let trainable = r.u8()? != 0;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let data = r.scalars::<T>(numel, width)?;
            let value = Tensor::new(shape, data).map_err(|e| Error::Load(format!("parameter {name}: {e}")))?;
            params
                .insert(name, value, trainable)
                .map_err(|e| Error::Load(e.to_string()))?;
        }
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let lr = r.f64()?;
                let beta1 = r.f64()?;
                let beta2 = r.f64()?;
                let eps = r.f64()?;
                let n = r.u32()? as usize;
                let mut moments = vec![None; params.len()];
                for _ in 0..n {
                    let name = r.name()?;
                    let id = params
                        .id(&name)
                        .ok_or_else(|| Error::Load(format!("optimizer state for unknown parameter {name}")))?;
                    let numel = params.get(id).value.numel();
                    let m = r.scalars::<T>(numel, width)?;
                    let v = r.scalars::<T>(numel, width)?;
                    moments[id.0] = Some(Moments { m, v });
                }
                Some(Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    step,
                    moments,
                })
            }
            f => return Err(Error::Load(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Load(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            model: header.model,
            meta: header.meta,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Load(m) => Error::Load(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn write_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| Error::Internal(format!("parameter name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
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
            .ok_or_else(|| Error::Load("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Load("parameter name is not UTF-8".into()))
    }

    /// Reads `n` scalars stored at `width` bytes, converting to `T` if needed.
    fn scalars<T: Scalar>(&mut self, n: usize, width: u8) -> Result<Vec<T>> {
        let raw = self.take(n.checked_mul(width as usize).ok_or_else(|| Error::Load("bad size".into()))?)?;
        Ok(if width == T::BYTES {
            raw.chunks_exact(width as usize).map(T::read_le).collect()
        } else if width == 4 {
            raw.chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect()
        })
    }
}
