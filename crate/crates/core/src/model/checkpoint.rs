//! Binary checkpoint layout (little-endian): magic `RTCK`, `u32` config length,
//! config JSON, 32-byte vocabulary fingerprint, `u32` tensor count, then per
//! tensor `u32` name length, UTF-8 name, `u32` rank, `u32` dims, `f32` data.
//! The feature normalization statistics follow the model tensors as
//! `norm.mean` and `norm.std`.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{ModelConfig, ModelParams};
use crate::autodiff::Tensor;
use crate::synth::FeatureStats;

const MAGIC: &[u8; 4] = b"RTCK";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error("checkpoint was trained with a different vocabulary")]
    FingerprintMismatch,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Trained parameters plus everything needed to decode with them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub norm: FeatureStats,
    pub vocab_fingerprint: [u8; 32],
}

fn put_u32(buf: &mut Vec<u8>, x: usize) {
    buf.extend_from_slice(&(x as u32).to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(buf, name.len());
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, t.shape().len());
    for &d in t.shape() {
        put_u32(buf, d);
    }
    for x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>), CheckpointError> {
        let n = self.u32()?;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?;
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count.ok_or_else(|| CheckpointError::Format(format!("{name}: shape overflows")))?;
        let raw = self.take(count.checked_mul(4).ok_or_else(|| CheckpointError::Format("size".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        let cfg = serde_json::to_vec(self.params.config()).expect("config serializes");
        put_u32(&mut buf, cfg.len());
        buf.extend_from_slice(&cfg);
        buf.extend_from_slice(&self.vocab_fingerprint);
        put_u32(&mut buf, self.params.len() + 2);
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            put_tensor(&mut buf, name, t);
        }
        let dim = self.norm.dim();
        put_tensor(&mut buf, "norm.mean", &Tensor::new(&[dim], self.norm.mean.clone()).unwrap());
        put_tensor(&mut buf, "norm.std", &Tensor::new(&[dim], self.norm.std.clone()).unwrap());
        buf
    }

    /// Parses a checkpoint; when `expected` is given the vocabulary fingerprint must match it.
    pub fn from_bytes(bytes: &[u8], expected: Option<&[u8; 32]>) -> Result<Self, CheckpointError> {
        let bad = |m: String| CheckpointError::Format(m);
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(&MAGIC[..]) {
            return Err(bad("missing RTCK header".into()));
        }
        let n = r.u32()?;
        let config: ModelConfig =
            serde_json::from_slice(r.take(n)?).map_err(|e| bad(format!("config: {e}")))?;
        config.validate().map_err(|e| bad(e.to_string()))?;
        let vocab_fingerprint: [u8; 32] = r.take(32)?.try_into().unwrap();
        if let Some(fp) = expected {
            if fp != &vocab_fingerprint {
                return Err(CheckpointError::FingerprintMismatch);
            }
        }
        let count = r.u32()?;
        if count < 2 {
            return Err(bad("missing normalization statistics".into()));
        }
        let mut named = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>, _>>()?;
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes".into()));
        }
        let (std_name, std) = named.pop().unwrap();
        let (mean_name, mean) = named.pop().unwrap();
        if mean_name != "norm.mean" || std_name != "norm.std" || mean.shape() != std.shape() {
            return Err(bad("malformed normalization statistics".into()));
        }
        if mean.numel() != config.feat_dim {
            return Err(bad(format!(
                "normalization width {} does not match feat_dim {}",
                mean.numel(),
                config.feat_dim
            )));
        }
        let params = ModelParams::from_named(&config, named).map_err(bad)?;
        Ok(Self {
            params,
            norm: FeatureStats {
                mean: mean.into_data(),
                std: std.into_data(),
            },
            vocab_fingerprint,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        fs::write(path, self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<&[u8; 32]>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?, expected)
    }
}
