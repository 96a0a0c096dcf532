//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "MFCKPT\0\0"
//! version      u32
//! config_len   u32, then config_len bytes of TOML (NetConfig)
//! epoch        u64
//! seed         u64
//! n_params     u32
//! per param:   u32 name_len, name bytes, u32 ndim, ndim × u32 dims, prod(dims) × f32
//! has_opt      u8
//! if has_opt:  u64 step, u64 skipped, then per param prod(dims) × f32 first moment,
//!              prod(dims) × f32 second moment
//! ```

use std::path::Path;

use super::config::NetConfig;
use super::weights::{ModelWeights, Param, WEIGHTS_VERSION};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MFCKPT\0\0";

/// AdamW moment estimates, one vector per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub skipped: u64,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(weights: &ModelWeights<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = weights.params().map(|p| vec![0.0; p.len()]).collect();
        Self {
            step: 0,
            skipped: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: ModelWeights<f32>,
    pub optimizer: Option<OptimizerState>,
    pub epoch: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(weights: ModelWeights<f32>, seed: u64) -> Self {
        Self {
            weights,
            optimizer: None,
            epoch: 0,
            seed,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.weights.version.to_le_bytes());
        let config = toml::to_string(self.weights.config())
            .map_err(|e| Error::Checkpoint(format!("cannot encode config: {e}")))?;
        put_u32(&mut out, config.len());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let params: Vec<_> = self.weights.params().collect();
        put_u32(&mut out, params.len());
        for p in &params {
            put_u32(&mut out, p.name.len());
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.shape.len());
            for d in &p.shape {
                put_u32(&mut out, *d);
            }
            put_f32s(&mut out, &p.data);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                out.extend_from_slice(&opt.skipped.to_le_bytes());
                if opt.first_moment.len() != params.len() || opt.second_moment.len() != params.len() {
                    return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
                }
                for (p, (m, v)) in params.iter().zip(opt.first_moment.iter().zip(&opt.second_moment)) {
                    if m.len() != p.len() || v.len() != p.len() {
                        return Err(Error::Checkpoint(format!("optimizer state for {} has wrong size", p.name)));
                    }
                    put_f32s(&mut out, m);
                    put_f32s(&mut out, v);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_len = r.u32()? as usize;
        let config_text = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| Error::Checkpoint("config is not utf-8".into()))?;
        let config: NetConfig =
            toml::from_str(config_text).map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
        let epoch = r.u64()?;
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product();
            let data = r.f32s(len)?;
            params.push(Param { name, shape, data });
        }
        let lens: Vec<usize> = params.iter().map(|p| p.data.len()).collect();
        let weights = ModelWeights::from_params(&config, params)?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let skipped = r.u64()?;
                let mut first_moment = Vec::with_capacity(n);
                let mut second_moment = Vec::with_capacity(n);
                for len in lens {
                    first_moment.push(r.f32s(len)?);
                    second_moment.push(r.f32s(len)?);
                }
                Some(OptimizerState {
                    step,
                    skipped,
                    first_moment,
                    second_moment,
                })
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            weights,
            optimizer,
            epoch,
            seed,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
