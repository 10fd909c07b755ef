//! Style-conditioned transformer encoder-decoder.
//!
//! Features pass through a two-layer strided convolution, sinusoidal position
//! encoding and a stack of post-norm encoder blocks. The decoder consumes the
//! style token followed by previously emitted tokens under a causal mask and
//! attends to the encoder states. Training uses [`teacher_forced_graph`] on
//! packed batches; decoding uses the incremental [`DecoderSession`].

mod checkpoint;
mod infer;
mod net;
mod params;

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use infer::{DecoderSession, DecoderState};
pub use net::positional_encoding;
pub use params::{Bound, ModelParams, ParamGroup};

use crate::autodiff::{AutogradError, Graph, Patches, Real, Tensor, Var};
use crate::synth::FeatureMatrix;
use crate::vocab::StyleToken;

pub(crate) const CONV: Patches = Patches {
    kernel: 3,
    stride: 2,
    pad: 1,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("decoder prefix is empty")]
    EmptyPrefix,
    #[error("decoder prefix must start with a style id, found {0}")]
    MissingStyle(usize),
    #[error("token id {id} outside vocabulary of {size}")]
    UnknownId { id: usize, size: usize },
    #[error("sequence of {len} positions exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input feature width (after delta and acceleration stacking).
    pub feat_dim: usize,
    pub num_encoder_blocks: usize,
    pub num_decoder_blocks: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    /// Output channels of the two convolution layers.
    pub conv_channels: (usize, usize),
    pub vocab_size: usize,
    pub dropout: f64,
    pub max_positions: usize,
}

impl ModelConfig {
    /// 2+2 blocks, width 64, feed-forward 128, 2 heads.
    pub fn tiny(feat_dim: usize, vocab_size: usize) -> Self {
        Self::sized(feat_dim, vocab_size, 2, 64, 128, 2)
    }

    /// 6+6 blocks, width 256, feed-forward 2048, 4 heads.
    pub fn full(feat_dim: usize, vocab_size: usize) -> Self {
        Self::sized(feat_dim, vocab_size, 6, 256, 2048, 4)
    }

    fn sized(feat_dim: usize, vocab_size: usize, blocks: usize, d: usize, ffn: usize, heads: usize) -> Self {
        Self {
            feat_dim,
            num_encoder_blocks: blocks,
            num_decoder_blocks: blocks,
            model_dim: d,
            ffn_dim: ffn,
            num_heads: heads,
            conv_channels: (d / 4, d),
            vocab_size,
            dropout: 0.1,
            max_positions: 4096,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        let dims = [
            self.feat_dim,
            self.model_dim,
            self.ffn_dim,
            self.num_heads,
            self.conv_channels.0,
            self.conv_channels.1,
            self.vocab_size,
            self.max_positions,
        ];
        if dims.contains(&0) {
            return bad("all dimensions must be at least 1");
        }
        if self.model_dim % self.num_heads != 0 {
            return bad("model_dim must be divisible by num_heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Feature width after both convolution layers.
    pub fn subsampled_feat_dim(&self) -> usize {
        CONV.out_len(CONV.out_len(self.feat_dim))
    }

    /// Encoder length for `frames` input frames.
    pub fn subsampled_frames(&self, frames: usize) -> usize {
        CONV.out_len(CONV.out_len(frames))
    }
}

/// Named architecture presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Full,
}

impl Preset {
    pub fn config(self, feat_dim: usize, vocab_size: usize) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::tiny(feat_dim, vocab_size),
            Preset::Full => ModelConfig::full(feat_dim, vocab_size),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Tiny => "tiny",
            Preset::Full => "full",
        })
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "full" => Ok(Preset::Full),
            other => Err(format!("unknown preset {other:?} (expected tiny or full)")),
        }
    }
}

/// Encoder output `f^M`, one row per subsampled frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates<T> {
    pub states: Tensor<T>,
}

impl<T: Real> EncoderStates<T> {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dropout randomness for a training forward pass.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut dyn RngCore,
}

pub(crate) fn check_prefix(cfg: &ModelConfig, ids: &[usize]) -> Result<(), ModelError> {
    let first = *ids.first().ok_or(ModelError::EmptyPrefix)?;
    if StyleToken::from_id(first).is_none() {
        return Err(ModelError::MissingStyle(first));
    }
    if let Some(&id) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(ModelError::UnknownId {
            id,
            size: cfg.vocab_size,
        });
    }
    if ids.len() > cfg.max_positions {
        return Err(ModelError::TooLong {
            len: ids.len(),
            max: cfg.max_positions,
        });
    }
    Ok(())
}

/// Runs the encoder on one utterance with dropout off.
pub fn encode_audio<T: Real>(params: &ModelParams<T>, f: &FeatureMatrix) -> Result<EncoderStates<T>, ModelError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let (enc, _) = net::encode(&mut g, params.config(), &bound, &[f], None)?;
    Ok(EncoderStates { states: g.tensor(enc) })
}

/// Log-probabilities of the token following `prefix`, which starts with a style id.
pub fn decode_step<T: Real>(
    params: &ModelParams<T>,
    enc: &EncoderStates<T>,
    prefix: &[usize],
) -> Result<Vec<T>, ModelError> {
    check_prefix(params.config(), prefix)?;
    let session = DecoderSession::new(params, enc)?;
    let mut state = session.start();
    let mut out = Vec::new();
    for &id in prefix {
        out = session.step(std::slice::from_mut(&mut state), &[id])?.into_data();
    }
    Ok(out)
}

/// Builds the teacher-forced forward pass for a packed batch on `g`.
///
/// Each item pairs features with a full id sequence `[style, tokens.., EOS]`.
/// The result stacks, per item, one log-probability row for every position
/// but the last: row `t` predicts `ids[t + 1]` from `ids[..=t]`. The second
/// value lists each item's row count.
pub fn teacher_forced_graph<'p, T: Real>(
    g: &mut Graph<'p, T>,
    params: &ModelParams<T>,
    bound: &Bound,
    batch: &[(&FeatureMatrix, &[usize])],
    mut dropout: Option<Dropout<'_>>,
) -> Result<(Var, Vec<usize>), ModelError> {
    let cfg = params.config();
    let feats: Vec<&FeatureMatrix> = batch.iter().map(|(f, _)| *f).collect();
    let (enc, enc_lens) = net::encode(g, cfg, bound, &feats, dropout.as_mut())?;
    let mut inputs = Vec::with_capacity(batch.len());
    for (_, ids) in batch {
        check_prefix(cfg, ids)?;
        if ids.len() < 2 {
            return Err(ModelError::ShapeMismatch {
                what: "target ids",
                expected: 2,
                got: ids.len(),
            });
        }
        inputs.push(&ids[..ids.len() - 1]);
    }
    let logp = net::decode(g, cfg, bound, enc, &enc_lens, &inputs, dropout.as_mut())?;
    Ok((logp, inputs.iter().map(|i| i.len()).collect()))
}

/// Teacher-forced log-probabilities for one utterance, dropout off.
pub fn forward_teacher_forced<T: Real>(
    params: &ModelParams<T>,
    f: &FeatureMatrix,
    target_ids: &[usize],
) -> Result<Tensor<T>, ModelError> {
    Ok(forward_teacher_forced_batch(params, &[(f, target_ids)])?.remove(0))
}

/// Teacher-forced log-probabilities for several utterances in one pass.
pub fn forward_teacher_forced_batch<T: Real>(
    params: &ModelParams<T>,
    batch: &[(&FeatureMatrix, &[usize])],
) -> Result<Vec<Tensor<T>>, ModelError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let (logp, rows) = teacher_forced_graph(&mut g, params, &bound, batch, None)?;
    let v = params.config().vocab_size;
    let data = g.value(logp);
    let mut out = Vec::with_capacity(rows.len());
    let mut off = 0;
    for r in rows {
        out.push(Tensor::new(&[r, v], data[off * v..(off + r) * v].to_vec())?);
        off += r;
    }
    Ok(out)
}
