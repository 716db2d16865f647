//! Single-file checkpoint archive.
//!
//! ```text
//! "SELCKPT\0"                     magic
//! u32 format version (1)
//! u32 len, config as key = value text
//! u32 epoch, u64 step
//! u32 count, tensors              weights
//! u8 has_optimizer
//!   u64 t, u32 count, tensors     first moments
//!          u32 count, tensors     second moments
//! [u8; 32] SHA-256 of everything above
//! ```
//!
//! A tensor is `u16 name_len, name, u8 ndim, u32 dims[ndim], f32 data[..]`,
//! all little-endian. Parameter names follow the scheme documented in the
//! model modules, e.g. `ga3.stage0.conv.w` or `charm.slice3.conv2.b`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Result, SelicError};
use crate::model::SelicModel;
use crate::nn::{ParamStore, Tensor};

pub const MAGIC: [u8; 8] = *b"SELCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Adam moment estimates and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl AdamState {
    pub fn zeros_like(params: &ParamStore<f32>) -> Self {
        let mut m = ParamStore::new();
        for (name, t) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        Self { t: 0, v: m.clone(), m }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SelicModel,
    pub optimizer: Option<AdamState>,
    /// Completed epochs.
    pub epoch: u32,
    /// Completed optimizer steps.
    pub step: u64,
}

fn put_tensors(out: &mut Vec<u8>, store: &ParamStore<f32>) {
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| SelicError::Checkpoint("archive truncated".into()))?;
        let s = &self.bytes[self.pos..end];
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

    fn tensors(&mut self) -> Result<ParamStore<f32>> {
        let n = self.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let len = self.u16()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| SelicError::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = self.u8()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = numel
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| SelicError::Checkpoint(format!("tensor {name} is too large")))?;
            let data = self.take(bytes)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            store.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(store)
    }
}

impl Checkpoint {
    pub fn new(model: SelicModel) -> Self {
        Self { model, optimizer: None, epoch: 0, step: 0 }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg = self.model.cfg.to_kv_string();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_tensors(&mut out, &self.model.params);
        match &self.optimizer {
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.t.to_le_bytes());
                put_tensors(&mut out, &opt.m);
                put_tensors(&mut out, &opt.v);
            }
            None => out.push(0),
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || bytes[..MAGIC.len()] != MAGIC {
            return Err(SelicError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(SelicError::Checkpoint("checksum mismatch; file is corrupt".into()));
        }
        let mut r = Reader { bytes: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(SelicError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| SelicError::Checkpoint("config is not UTF-8".into()))?;
        let cfg = ModelConfig::parse(text)?;
        let epoch = r.u32()?;
        let step = r.u64()?;
        let params = r.tensors()?;
        let model = SelicModel::from_params(cfg, params)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let t = r.u64()?;
                let m = r.tensors()?;
                let v = r.tensors()?;
                Some(AdamState { t, m, v })
            }
            other => return Err(SelicError::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        if r.pos != body.len() {
            return Err(SelicError::Checkpoint("trailing bytes in checkpoint".into()));
        }
        Ok(Self { model, optimizer, epoch, step })
    }

    /// Writes via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| SelicError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Loads only the model from a checkpoint file.
pub fn load_model(path: &Path) -> Result<SelicModel> {
    Ok(Checkpoint::load(path)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_optimizer() {
        let model = SelicModel::new(ModelConfig::tiny().with_lambda(0.045)).unwrap();
        let mut opt = AdamState::zeros_like(&model.params);
        opt.t = 17;
        opt.m.get_mut("ga3.stage0.conv.b").unwrap().data_mut()[0] = 0.25;
        let ck = Checkpoint { model, optimizer: Some(opt), epoch: 3, step: 40 };
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn corruption_is_detected() {
        let ck = Checkpoint::new(SelicModel::new(ModelConfig::tiny()).unwrap());
        let mut b = ck.to_bytes();
        let mid = b.len() / 2;
        b[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(SelicError::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(&b[..100]).is_err());
    }
}
