//! Single-file checkpoints: parameters, optional optimizer state, step and
//! the architecture text.
//!
//! Layout (little-endian): `"MTCK"`, u32 version, u32 dtype (4 = f32,
//! 8 = f64), u64 step, u64 config hash, u32 length + config text, u32
//! tensor count, then per tensor: u32 name length, name, u32 rank, u64 per
//! extent, values. A trailing u8 flags optimizer state, followed by the
//! Adam hyperparameters (4 × f64), u64 optimizer step, and the first and
//! second moments of every tensor in the same order.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::model::MultModel;
use crate::optim::{AdamConfig, OptimState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MTCK";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u32 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// First 8 bytes of the SHA-256 of `text`, little-endian.
pub fn text_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn config_hash(cfg: &ArchConfig) -> u64 {
    text_hash(&cfg.to_text())
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ArchConfig,
    pub step: u64,
    pub params: ParamStore,
    pub optim: Option<OptimState>,
}

impl Checkpoint {
    /// Rebuilds the model and loads the stored values into it.
    pub fn restore(&self) -> Result<(MultModel, ParamStore)> {
        let (model, mut store) = MultModel::new(&self.config, 0)?;
        store.load_values(&self.params)?;
        Ok((model, store))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_values(out: &mut Vec<u8>, xs: &[f64], dtype: Dtype) {
    match dtype {
        Dtype::F32 => xs
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => xs
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

pub fn encode_checkpoint(
    cfg: &ArchConfig,
    step: u64,
    store: &ParamStore,
    optim: Option<&OptimState>,
    dtype: Dtype,
) -> Vec<u8> {
    let mut out =
        Vec::with_capacity(64 + store.num_scalars() * 8 * if optim.is_some() { 3 } else { 1 });
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, dtype.code());
    put_u64(&mut out, step);
    let text = cfg.to_text();
    put_u64(&mut out, text_hash(&text));
    put_u32(&mut out, text.len() as u32);
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, store.len() as u32);
    for p in store.iter() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.rank() as u32);
        p.value
            .shape()
            .iter()
            .for_each(|&d| put_u64(&mut out, d as u64));
        put_values(&mut out, p.value.data(), dtype);
    }
    match optim {
        None => out.push(0),
        Some(st) => {
            out.push(1);
            let c = st.config;
            put_values(
                &mut out,
                &[c.beta1, c.beta2, c.eps, c.weight_decay],
                Dtype::F64,
            );
            put_u64(&mut out, st.step);
            for (m, v) in st.m.iter().zip(&st.v) {
                put_values(&mut out, m, dtype);
                put_values(&mut out, v, dtype);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail("checkpoint truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn values(&mut self, n: usize, dtype: Dtype) -> Result<Vec<f64>> {
        Ok(match dtype {
            Dtype::F32 => self
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => self
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        })
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected \"MTCK\"".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let dtype = match r.u32()? {
        4 => Dtype::F32,
        8 => Dtype::F64,
        other => {
            return Err(Error::Format {
                offset: 8,
                message: format!("unknown dtype code {other}"),
            })
        }
    };
    let step = r.u64()?;
    let hash = r.u64()?;
    let len = r.u32()? as usize;
    let text_at = r.pos;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format {
        offset: text_at as u64,
        message: "config text is not UTF-8".into(),
    })?;
    if text_hash(text) != hash {
        return Err(Error::Format {
            offset: text_at as u64,
            message: "config hash mismatch".into(),
        });
    }
    let config = ArchConfig::from_text(text)?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| r.fail("parameter name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product();
        let data = r.values(numel, dtype)?;
        if params.id(&name).is_some() {
            return Err(r.fail(format!("duplicate parameter {name}")));
        }
        params.add(name, Tensor::new(shape, data)?);
    }
    let optim = match r.u8()? {
        0 => None,
        1 => {
            let h = r.values(4, Dtype::F64)?;
            let config = AdamConfig {
                beta1: h[0],
                beta2: h[1],
                eps: h[2],
                weight_decay: h[3],
            };
            let ostep = r.u64()?;
            let mut m = Vec::with_capacity(count);
            let mut v = Vec::with_capacity(count);
            for p in params.iter() {
                m.push(r.values(p.value.numel(), dtype)?);
                v.push(r.values(p.value.numel(), dtype)?);
            }
            Some(OptimState {
                config,
                step: ostep,
                m,
                v,
            })
        }
        other => return Err(r.fail(format!("bad optimizer flag {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after checkpoint"));
    }
    Ok(Checkpoint {
        config,
        step,
        params,
        optim,
    })
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &ArchConfig,
    step: u64,
    store: &ParamStore,
    optim: Option<&OptimState>,
    dtype: Dtype,
) -> Result<()> {
    fs::write(path, encode_checkpoint(cfg, step, store, optim, dtype))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchConfig {
        let mut cfg = ArchConfig::load("desk-nano").unwrap();
        cfg.img_size = 32;
        cfg.window = 1;
        cfg.shift = 0;
        cfg
    }

    #[test]
    fn roundtrip_with_optimizer() {
        let cfg = tiny();
        let (_, store) = MultModel::new(&cfg, 5).unwrap();
        let mut st = OptimState::new(&store, AdamConfig::default());
        st.step = 7;
        st.m[0][0] = 0.25;
        let bytes = encode_checkpoint(&cfg, 42, &store, Some(&st), Dtype::F64);
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.step, 42);
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.optim.as_ref(), Some(&st));
        for (a, b) in ck.params.iter().zip(store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
    }
}
