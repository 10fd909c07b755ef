//! Deterministic synthetic speech corpora.
//!
//! Every grapheme and point phenomenon has a fixed prototype frame vector;
//! spanning phenomena shift the prototypes of the graphemes they cover by a
//! per-kind offset. An utterance's features are its tokens' prototypes, each
//! repeated for a few frames, plus Gaussian noise. The rich view of an
//! utterance carries the phenomenon markup, the common view only its text,
//! while both share the same features.

mod features;
mod io;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{add_dynamics, normalize, spec_augment, FeatureMatrix, FeatureStats, SpecAugment};
pub use io::{decode_features, encode_features, read_features, write_features, Manifest, Utterance};

use crate::transcript::{ParseError, PhenomenonKind, Token, Transcript};
use crate::vocab::StyleToken;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("{0}")]
    Invariant(String),
    #[error("bad file: {0}")]
    Format(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_utterances: usize,
    pub grapheme_count: usize,
    pub frames_per_token: usize,
    pub noise_sigma: f64,
    /// Per-grapheme-position probability of each phenomenon.
    pub phenomenon_rates: BTreeMap<PhenomenonKind, f64>,
    /// Inclusive range of graphemes per utterance.
    pub utterance_length_range: (usize, usize),
    pub max_span: usize,
    pub base_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        use PhenomenonKind::*;
        let rates = [
            (Fragment, 0.03),
            (Laugh, 0.04),
            (Cough, 0.01),
            (Sigh, 0.01),
            (Filler, 0.05),
            (Repetition, 0.01),
            (Misstatement, 0.01),
            (Stretch, 0.02),
            (Laughing, 0.02),
            (HardToHear, 0.015),
            (Emphasis, 0.01),
        ];
        Self {
            num_utterances: 100,
            grapheme_count: 20,
            frames_per_token: 4,
            noise_sigma: 0.1,
            phenomenon_rates: rates.into_iter().collect(),
            utterance_length_range: (4, 10),
            max_span: 3,
            base_dim: 13,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::Config(m));
        if let Some((k, r)) = self.phenomenon_rates.iter().find(|(_, r)| !(0.0..=1.0).contains(*r)) {
            return err(format!("rate for {k} is {r}, outside [0, 1]"));
        }
        let (lo, hi) = self.utterance_length_range;
        if lo > hi {
            return err(format!("length range ({lo}, {hi}) is empty"));
        }
        if self.frames_per_token == 0 {
            return err("frames_per_token must be at least 1".into());
        }
        if self.grapheme_count == 0 || self.base_dim == 0 {
            return err("grapheme_count and base_dim must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return err(format!("noise_sigma {} is invalid", self.noise_sigma));
        }
        if self.max_span == 0 {
            return err("max_span must be at least 1".into());
        }
        Ok(())
    }

    pub fn rate(&self, k: PhenomenonKind) -> f64 {
        self.phenomenon_rates.get(&k).copied().unwrap_or(0.0)
    }

    /// Same config with every phenomenon rate set to zero.
    pub fn without_phenomena(&self) -> Self {
        Self {
            phenomenon_rates: PhenomenonKind::ALL.iter().map(|k| (*k, 0.0)).collect(),
            ..self.clone()
        }
    }
}

/// The `i`-th grapheme of the synthetic alphabet.
pub fn grapheme(i: usize) -> char {
    if i < 26 {
        (b'a' + i as u8) as char
    } else {
        char::from_u32(0x4E00 + (i - 26) as u32).expect("CJK block")
    }
}

/// Stateless seed derivation (SplitMix64 finalizer over the inputs).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_GRAPHEME: u64 = 1;
const STREAM_SINGLE: u64 = 2;
const STREAM_OFFSET: u64 = 3;
const STREAM_TEXT: u64 = 4;
const STREAM_NOISE: u64 = 5;

/// Fixed prototype vectors derived from the corpus seed.
#[derive(Debug, Clone)]
pub struct Prototypes {
    seed: u64,
    dim: usize,
}

impl Prototypes {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }

    fn draw(&self, stream: u64, index: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, stream, index));
        (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .map(|x: f64| x as f32)
            .collect()
    }

    pub fn grapheme(&self, c: char) -> Vec<f32> {
        self.draw(STREAM_GRAPHEME, c as u64)
    }

    pub fn single(&self, k: PhenomenonKind) -> Vec<f32> {
        self.draw(STREAM_SINGLE, k.index() as u64)
    }

    pub fn offset(&self, k: PhenomenonKind) -> Vec<f32> {
        self.draw(STREAM_OFFSET, k.index() as u64)
    }

    /// Frame prototype of one frame-emitting token given the spans open around it.
    /// Returns `None` for open/close markers, which emit no frames.
    pub fn token(&self, token: &Token, open: &[PhenomenonKind]) -> Option<Vec<f32>> {
        match *token {
            Token::Text(c) => {
                let mut p = self.grapheme(c);
                for k in open {
                    for (x, o) in p.iter_mut().zip(self.offset(*k)) {
                        *x += o;
                    }
                }
                Some(p)
            }
            Token::Single(k) => Some(self.single(k)),
            Token::Open(_) | Token::Close(_) => None,
        }
    }
}

/// Renders a transcript as frames: `frames_per_token` noisy copies of each
/// frame-emitting token's prototype. An empty rendering is one silent frame.
pub fn synthesize_features(t: &Transcript, cfg: &SynthConfig, utterance_seed: u64) -> FeatureMatrix {
    render(t, cfg, &Prototypes::new(cfg.seed, cfg.base_dim), utterance_seed)
}

fn render(t: &Transcript, cfg: &SynthConfig, protos: &Prototypes, utterance_seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(utterance_seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let mut open: Vec<PhenomenonKind> = Vec::new();
    let mut data = Vec::new();
    let mut frames = 0;
    for token in t.tokens() {
        match *token {
            Token::Open(k) => open.push(k),
            Token::Close(k) => open.retain(|o| *o != k),
            _ => {}
        }
        if let Some(p) = protos.token(token, &open) {
            for _ in 0..cfg.frames_per_token {
                data.extend(p.iter().map(|&x| x + noise.sample(&mut rng) as f32));
                frames += 1;
            }
        }
    }
    if frames == 0 {
        return FeatureMatrix::zeros(1, cfg.base_dim);
    }
    FeatureMatrix::new(frames, cfg.base_dim, data)
}

/// Draws one utterance's rich transcript.
///
/// Spans are placed left to right and never overlap or touch another span, so
/// every span is recoverable from the frame offsets. Point phenomena are
/// inserted before a grapheme and therefore precede a span opening at the
/// same position.
pub fn draw_transcript<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Transcript {
    let (lo, hi) = cfg.utterance_length_range;
    let len = rng.random_range(lo..=hi);
    let graphemes: Vec<char> = (0..len)
        .map(|_| grapheme(rng.random_range(0..cfg.grapheme_count)))
        .collect();

    let mut spans: Vec<(usize, usize, PhenomenonKind)> = Vec::new();
    for pos in 0..len {
        for k in PhenomenonKind::enclosed() {
            if rng.random::<f64>() >= cfg.rate(k) {
                continue;
            }
            let span_len = rng.random_range(1..=cfg.max_span.min(len - pos));
            let end = pos + span_len;
            // Require a free grapheme between spans.
            let clear = spans.iter().all(|&(s, e, _)| end < s || pos > e);
            if clear {
                spans.push((pos, end, k));
            }
        }
    }

    let mut singles: Vec<Vec<PhenomenonKind>> = vec![Vec::new(); len];
    for slot in singles.iter_mut() {
        for k in PhenomenonKind::singles() {
            if rng.random::<f64>() < cfg.rate(k) {
                slot.push(k);
            }
        }
    }

    let mut tokens = Vec::new();
    for pos in 0..len {
        tokens.extend(singles[pos].iter().map(|k| Token::Single(*k)));
        if let Some(&(_, _, k)) = spans.iter().find(|(s, _, _)| *s == pos) {
            tokens.push(Token::Open(k));
        }
        tokens.push(Token::Text(graphemes[pos]));
        if let Some(&(_, _, k)) = spans.iter().find(|(_, e, _)| *e == pos + 1) {
            tokens.push(Token::Close(k));
        }
    }
    Transcript::from_tokens(tokens).expect("generator emits well-formed transcripts")
}

/// Paired rich and common views of one synthetic corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub rich: Manifest,
    pub common: Manifest,
    /// Features per entry, in manifest order.
    pub features: Vec<FeatureMatrix>,
}

impl Corpus {
    /// Writes both manifests (`rich.jsonl`, `common.jsonl`) and the feature files.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), SynthError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("feats"))?;
        for (u, f) in self.rich.entries.iter().zip(&self.features) {
            write_features(dir.join(&u.feature_path), f)?;
        }
        self.rich.save(dir.join("rich.jsonl"))?;
        self.common.save(dir.join("common.jsonl"))?;
        Ok(())
    }
}

pub fn utterance_id(index: usize) -> String {
    format!("utt{index:06}")
}

/// Generates `cfg.num_utterances` utterances as a rich and a common manifest.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<Corpus, SynthError> {
    cfg.validate()?;
    let protos = Prototypes::new(cfg.seed, cfg.base_dim);
    let mut rich = Vec::with_capacity(cfg.num_utterances);
    let mut common = Vec::with_capacity(cfg.num_utterances);
    let mut features = Vec::with_capacity(cfg.num_utterances);
    for i in 0..cfg.num_utterances {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_TEXT, i as u64));
        let t = draw_transcript(cfg, &mut rng);
        let f = render(&t, cfg, &protos, derive_seed(cfg.seed, STREAM_NOISE, i as u64));
        let id = utterance_id(i);
        let feature_path = format!("feats/{id}.feat");
        let common_text = t.strip_phenomena().to_string();
        rich.push(Utterance {
            id: id.clone(),
            feature_path: feature_path.clone(),
            rich_text: Some(t.to_string()),
            common_text: common_text.clone(),
            style: StyleToken::Rich,
            pseudo: false,
        });
        common.push(Utterance {
            id,
            feature_path,
            rich_text: None,
            common_text,
            style: StyleToken::Common,
            pseudo: false,
        });
        features.push(f);
    }
    Ok(Corpus {
        rich: Manifest::new(StyleToken::Rich, rich)?,
        common: Manifest::new(StyleToken::Common, common)?,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transcript::{parse, phenomenon_stats};

    fn small(n: usize) -> SynthConfig {
        SynthConfig {
            num_utterances: n,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts_match() {
        let c = generate_corpus(&small(10)).unwrap();
        assert_eq!(c.rich.len(), 10);
        assert_eq!(c.common.len(), 10);
        assert_eq!(c.features.len(), 10);
    }

    #[test]
    fn zero_rates_give_identical_views() {
        let cfg = small(50).without_phenomena();
        let c = generate_corpus(&cfg).unwrap();
        for (r, m) in c.rich.entries.iter().zip(&c.common.entries) {
            assert_eq!(r.rich_text.as_deref(), Some(m.common_text.as_str()));
        }
    }

    #[test]
    fn rich_strips_to_common() {
        let c = generate_corpus(&small(200)).unwrap();
        let mut with_phen = 0;
        for (r, m) in c.rich.entries.iter().zip(&c.common.entries) {
            let t = parse(r.rich_text.as_ref().unwrap()).unwrap();
            with_phen += t.has_phenomena() as usize;
            assert_eq!(t.strip_phenomena().to_string(), m.common_text);
            assert_eq!(r.feature_path, m.feature_path);
        }
        assert!(with_phen > 20);
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_corpus(&small(20)).unwrap();
        let b = generate_corpus(&small(20)).unwrap();
        assert_eq!(a.rich, b.rich);
        assert_eq!(a.features, b.features);
        let c = generate_corpus(&SynthConfig { seed: 8, ..small(20) }).unwrap();
        assert_ne!(a.rich, c.rich);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = small(1);
        cfg.phenomenon_rates.insert(PhenomenonKind::Laugh, 1.5);
        assert!(matches!(generate_corpus(&cfg), Err(SynthError::Config(_))));
        let cfg = SynthConfig { utterance_length_range: (5, 2), ..small(1) };
        assert!(generate_corpus(&cfg).is_err());
        let cfg = SynthConfig { frames_per_token: 0, ..small(1) };
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn laugh_rate_is_binomial() {
        // 20 seeds x 2000 grapheme positions each, only laughs enabled.
        let mut rates = BTreeMap::new();
        rates.insert(PhenomenonKind::Laugh, 0.1);
        let (n, p) = (2000.0, 0.1);
        let sigma = f64::sqrt(n * p * (1.0 - p));
        let mut total = 0.0;
        for seed in 0..20 {
            let cfg = SynthConfig {
                num_utterances: 200,
                utterance_length_range: (10, 10),
                phenomenon_rates: rates.clone(),
                seed,
                ..SynthConfig::default()
            };
            let c = generate_corpus(&cfg).unwrap();
            let ts: Vec<Transcript> = c.rich.entries.iter().map(|u| u.target().unwrap()).collect();
            let count = phenomenon_stats(&ts)[&PhenomenonKind::Laugh] as f64;
            assert!((count - n * p).abs() <= 3.0 * sigma, "seed {seed}: {count}");
            total += count;
        }
        // The pooled mean is much tighter.
        let pooled_sigma = sigma / f64::sqrt(20.0);
        assert!((total / 20.0 - n * p).abs() <= 3.0 * pooled_sigma);
    }

    #[test]
    fn empty_transcript_is_one_silent_frame() {
        let f = synthesize_features(&Transcript::new(), &small(1), 3);
        assert_eq!((f.frames(), f.dim()), (1, 13));
        assert!(f.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn noiseless_grapheme_repeats_prototype() {
        let cfg = SynthConfig { noise_sigma: 0.0, ..small(1) };
        let f = synthesize_features(&parse("a").unwrap(), &cfg, 3);
        assert_eq!(f.frames(), 4);
        let p = Prototypes::new(cfg.seed, cfg.base_dim).grapheme('a');
        for t in 0..4 {
            assert_eq!(f.row(t), &p[..]);
        }
    }

    #[test]
    fn synthesis_is_deterministic_and_sized() {
        let cfg = small(1);
        let t = parse("a[laugh]b[filler>cd<filler]").unwrap();
        let a = synthesize_features(&t, &cfg, 11);
        assert_eq!(a, synthesize_features(&t, &cfg, 11));
        assert_ne!(a, synthesize_features(&t, &cfg, 12));
        assert_eq!(a.frames(), 4 * 5);
    }

    #[test]
    fn alphabet_avoids_reserved_chars() {
        for i in 0..200 {
            assert!(Token::Text(grapheme(i)).is_well_typed());
        }
        assert_eq!(grapheme(0), 'a');
        assert_eq!(grapheme(26), '一');
    }
}
