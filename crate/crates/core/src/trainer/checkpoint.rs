//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `H2CK`, `u32` version, `u32` length and
//! bytes of a JSON header holding the configs, `u32` tensor count, then per
//! tensor `u32` name length, name, `u32` rank, `u64` extents and `f64` data.
//! The first and second optimizer moments follow as bare `f64` data in the
//! same order, then the `u64` update count.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizerState, TrainConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{AlignmentModel, ModelConfig};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"H2CK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: OptimizerState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    loss: LossConfig,
}

impl Checkpoint {
    pub fn restore(&self) -> Result<(AlignmentModel, ParamStore)> {
        AlignmentModel::restore(self.model, &self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let header = serde_json::to_vec(&Header {
            model: self.model,
            train: self.train,
            loss: self.loss,
        })
        .expect("header serializes");
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in &self.params {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        for t in self.optimizer.m.iter().chain(&self.optimizer.v) {
            put_f64s(&mut out, t.data());
        }
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.error(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(4, &format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let start = r.at;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| r.error(start, &format!("bad header: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let at = r.at;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| r.error(at, "tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape.iter().product();
            let data = r.f64s(numel)?;
            params.push((name, Tensor::new(shape, data)?));
        }
        let moments = |r: &mut Reader| -> Result<Vec<Tensor>> {
            params
                .iter()
                .map(|(_, t)| Tensor::new(t.shape().to_vec(), r.f64s(t.numel())?))
                .collect()
        };
        let m = moments(&mut r)?;
        let v = moments(&mut r)?;
        let step = r.u64()?;
        if r.at != bytes.len() {
            return Err(r.error(r.at, "trailing bytes after checkpoint"));
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            loss: header.loss,
            params,
            optimizer: OptimizerState { m, v, step },
        })
    }
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, detail: &str) -> Error {
        Error::Format {
            offset: offset as u64,
            detail: detail.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(self.error(
                self.bytes.len(),
                &format!(
                    "truncated: need {n} bytes at {}, file has {}",
                    self.at,
                    self.bytes.len()
                ),
            )),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| self.error(self.at, "tensor too large"))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = TrainConfig {
            d: 4,
            heads: 2,
            layers: 1,
            ..TrainConfig::default()
        };
        let (model, store) = AlignmentModel::init(cfg.model_config(3, 5), 9).unwrap();
        let mut optimizer = OptimizerState::new(&store);
        optimizer.step = 17;
        optimizer.m[0].data_mut()[1] = -0.25;
        Checkpoint {
            model: *model.config(),
            train: cfg,
            loss: LossConfig::default(),
            params: store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            optimizer,
        }
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let (_, store) = back.restore().unwrap();
        assert_eq!(store.len(), ck.params.len());
    }

    #[test]
    fn damaged_files() {
        let bytes = sample().to_bytes();
        for cut in [2, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format { .. })),
                "{cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
