//! Style-conditioned beam search.
//!
//! Search is length-synchronized: every step extends all unfinished
//! hypotheses by every vocabulary id, pools the extensions with the finished
//! hypotheses and keeps the best `beam`. Ties go to the lexicographically
//! smaller id sequence. Scores are plain sums of log-probabilities unless
//! length normalization is requested.

use std::cmp::Ordering;

use thiserror::Error;

use crate::autodiff::Real;
use crate::model::{encode_audio, DecoderSession, DecoderState, ModelError, ModelParams};
use crate::synth::FeatureMatrix;
use crate::transcript::{repair, Transcript};
use crate::vocab::{StyleToken, Vocab, VocabError, EOS};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("beam size and max_len must be at least 1 (got beam {beam}, max_len {max_len})")]
    InvalidBeam { beam: usize, max_len: usize },
    #[error("feature matrix has no frames")]
    EmptyFeatures,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

/// A partial or complete decoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Starts with the style id; ends with EOS when finished.
    pub ids: Vec<usize>,
    /// Sum of per-step log-probabilities of `ids[1..]`.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Ranking key: the score, or the score per emitted token under length normalization.
    pub fn rank_score(&self, length_norm: bool) -> f64 {
        if length_norm {
            self.score / (self.ids.len().saturating_sub(1).max(1)) as f64
        } else {
            self.score
        }
    }
}

/// Search settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Maximum number of emitted ids (EOS included); `None` uses [`default_max_len`].
    pub max_len: Option<usize>,
    pub length_norm: bool,
}

impl BeamConfig {
    pub fn new(beam: usize) -> Self {
        Self {
            beam,
            max_len: None,
            length_norm: false,
        }
    }
}

/// `2 × (expected tokens) + 8`, expecting one token per subsampled frame.
pub fn default_max_len(encoder_len: usize) -> usize {
    2 * encoder_len + 8
}

/// Next-token distributions for a set of hypotheses.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// State after consuming the style id, plus the first distribution.
    fn start(&self, style_id: usize) -> Result<(Self::State, Vec<f64>), DecodeError>;

    /// Consumes `tokens[i]` in `states[i]`; returns the following distributions.
    fn advance(&self, states: &mut [Self::State], tokens: &[usize]) -> Result<Vec<Vec<f64>>, DecodeError>;
}

/// The encoder-decoder as a step scorer over one utterance.
pub struct ModelScorer<'a, T> {
    session: DecoderSession<'a, T>,
    vocab: usize,
}

impl<'a, T: Real> ModelScorer<'a, T> {
    pub fn new(params: &'a ModelParams<T>, f: &FeatureMatrix) -> Result<(Self, usize), DecodeError> {
        if f.frames() == 0 {
            return Err(DecodeError::EmptyFeatures);
        }
        let enc = encode_audio(params, f)?;
        let len = enc.len();
        Ok((
            Self {
                session: DecoderSession::new(params, &enc)?,
                vocab: params.config().vocab_size,
            },
            len,
        ))
    }
}

impl<T: Real> StepScorer for ModelScorer<'_, T> {
    type State = DecoderState<T>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self, style_id: usize) -> Result<(Self::State, Vec<f64>), DecodeError> {
        let mut st = [self.session.start()];
        let lp = self.session.step(&mut st, &[style_id])?;
        let [st] = st;
        Ok((st, lp.data().iter().map(|x| x.as_f64()).collect()))
    }

    fn advance(&self, states: &mut [Self::State], tokens: &[usize]) -> Result<Vec<Vec<f64>>, DecodeError> {
        let lp = self.session.step(states, tokens)?;
        Ok((0..states.len())
            .map(|r| lp.row(r).iter().map(|x| x.as_f64()).collect())
            .collect())
    }
}

fn better(a: &Hypothesis, b: &Hypothesis, length_norm: bool) -> Ordering {
    b.rank_score(length_norm)
        .partial_cmp(&a.rank_score(length_norm))
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Beam search with an arbitrary scorer. Returns hypotheses best first.
pub fn beam_search_with<S: StepScorer>(
    scorer: &S,
    style_id: usize,
    beam: usize,
    max_len: usize,
    length_norm: bool,
) -> Result<Vec<Hypothesis>, DecodeError> {
    if beam == 0 || max_len == 0 {
        return Err(DecodeError::InvalidBeam { beam, max_len });
    }
    let (st, lp) = scorer.start(style_id)?;
    let root = Hypothesis {
        ids: vec![style_id],
        score: 0.0,
        finished: false,
    };
    let mut live: Vec<(Hypothesis, S::State, Vec<f64>)> = vec![(root, st, lp)];
    let mut done: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        let mut pool: Vec<(Hypothesis, Option<usize>)> = done.drain(..).map(|h| (h, None)).collect();
        for (i, (h, _, lp)) in live.iter().enumerate() {
            for (v, &l) in lp.iter().enumerate() {
                let mut ids = h.ids.clone();
                ids.push(v);
                pool.push((
                    Hypothesis {
                        ids,
                        score: h.score + l,
                        finished: v == EOS,
                    },
                    Some(i),
                ));
            }
        }
        pool.sort_by(|a, b| better(&a.0, &b.0, length_norm));
        pool.truncate(beam);

        let last = step + 1 == max_len;
        let mut next_h = Vec::new();
        let mut next_s = Vec::new();
        let mut tokens = Vec::new();
        for (h, parent) in pool {
            match parent {
                Some(p) if !h.finished && !last => {
                    tokens.push(*h.ids.last().unwrap());
                    next_s.push(live[p].1.clone());
                    next_h.push(h);
                }
                _ => done.push(h),
            }
        }
        if next_h.is_empty() {
            break;
        }
        let lps = scorer.advance(&mut next_s, &tokens)?;
        live = next_h.into_iter().zip(next_s).zip(lps).map(|((h, s), l)| (h, s, l)).collect();
    }
    done.sort_by(|a, b| better(a, b, length_norm));
    Ok(done)
}

/// Beam search over the model's distribution for one utterance.
pub fn beam_search<T: Real>(
    params: &ModelParams<T>,
    f: &FeatureMatrix,
    style: StyleToken,
    cfg: BeamConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    if cfg.beam == 0 || cfg.max_len == Some(0) {
        return Err(DecodeError::InvalidBeam {
            beam: cfg.beam,
            max_len: cfg.max_len.unwrap_or(0),
        });
    }
    let (scorer, enc_len) = ModelScorer::new(params, f)?;
    let max_len = cfg.max_len.unwrap_or_else(|| default_max_len(enc_len));
    beam_search_with(&scorer, style.id(), cfg.beam, max_len, cfg.length_norm)
}

/// Converts a hypothesis to a well-formed transcript.
pub fn hypothesis_transcript(vocab: &Vocab, h: &Hypothesis) -> Result<Transcript, DecodeError> {
    let (_, tokens) = vocab.decode_ids(&h.ids)?;
    Ok(repair(&tokens))
}

/// Best hypothesis as a repaired transcript.
pub fn transcribe<T: Real>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    f: &FeatureMatrix,
    style: StyleToken,
    cfg: BeamConfig,
) -> Result<Transcript, DecodeError> {
    let hyps = beam_search(params, f, style, cfg)?;
    hypothesis_transcript(vocab, &hyps[0])
}
