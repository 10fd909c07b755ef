#![allow(dead_code)]

use rtasr::synth::{generate_corpus, SynthConfig};
use rtasr::training::{stack_features, EpochLog, FeatureCache, TrainConfig, Trainer};
use rtasr::transcript::{parse, phenomenon_stats, repair, serialize, validate, PhenomenonKind, Token, Transcript};
use rtasr::model::ModelConfig;
use rtasr::vocab::{StyleToken, Vocab};

pub const ALPHABET: [char; 10] = ['a', 'b', 'c', 'k', 'z', '0', 'é', 'え', 'と', 'ー'];

/// Builds a well-formed token sequence from opaque `(op, arg)` draws.
///
/// Spans may cross; a close picks any currently open kind.
pub fn build(ops: &[(u8, u8)]) -> Vec<Token> {
    let singles: Vec<_> = PhenomenonKind::singles().collect();
    let enclosed: Vec<_> = PhenomenonKind::enclosed().collect();
    let mut open: Vec<PhenomenonKind> = Vec::new();
    let mut out = Vec::new();
    for &(op, arg) in ops {
        let a = arg as usize;
        match op % 5 {
            0 | 1 => out.push(Token::Text(ALPHABET[a % ALPHABET.len()])),
            2 => out.push(Token::Single(singles[a % singles.len()])),
            3 => {
                let k = enclosed[a % enclosed.len()];
                if !open.contains(&k) {
                    open.push(k);
                    out.push(Token::Open(k));
                }
            }
            _ => {
                if !open.is_empty() {
                    let k = open.remove(a % open.len());
                    out.push(Token::Close(k));
                }
            }
        }
    }
    out.extend(open.into_iter().rev().map(Token::Close));
    out
}

/// Arbitrary, usually ill-formed, token sequence including reserved characters.
pub fn raw(ops: &[(u8, u8)]) -> Vec<Token> {
    ops.iter()
        .map(|&(op, arg)| {
            let k = PhenomenonKind::ALL[arg as usize % PhenomenonKind::ALL.len()];
            match op % 4 {
                0 => Token::Text(['a', '[', 'b', '>', 'c', ']', '<'][arg as usize % 7]),
                1 => Token::Single(k),
                2 => Token::Open(k),
                _ => Token::Close(k),
            }
        })
        .collect()
}

/// Round-trip and strip/validate/repair invariants for a well-formed sequence.
pub fn check_well_formed(tokens: &[Token]) -> Result<(), String> {
    let v = validate(tokens);
    if !v.is_empty() {
        return Err(format!("generated sequence invalid: {v:?}"));
    }
    let t = Transcript::from_tokens(tokens.to_vec()).map_err(|v| format!("{v:?}"))?;
    let s = serialize(&t);
    let back = parse(&s).map_err(|e| format!("parse({s:?}): {e}"))?;
    if back != t {
        return Err(format!("round trip changed {s:?}"));
    }
    if serialize(&back) != s {
        return Err(format!("serialize not canonical for {s:?}"));
    }
    if repair(tokens) != t {
        return Err(format!("repair changed well-formed {s:?}"));
    }
    let stripped = t.strip_phenomena();
    if stripped.has_phenomena() || stripped.text() != t.text() || stripped.len() != t.text().chars().count() {
        return Err(format!("strip broke {s:?}"));
    }
    if stripped.strip_phenomena() != stripped || !validate(stripped.tokens()).is_empty() {
        return Err(format!("strip not idempotent on {s:?}"));
    }
    let markers = tokens.iter().filter(|t| matches!(t, Token::Single(_) | Token::Open(_))).count();
    if phenomenon_stats([&t]).values().sum::<usize>() != markers {
        return Err(format!("stats miscounted {s:?}"));
    }
    Ok(())
}

/// Repair yields a valid, stable sequence that keeps every legal text token in order.
pub fn check_repair(tokens: &[Token]) -> Result<(), String> {
    let r = repair(tokens);
    if !validate(r.tokens()).is_empty() {
        return Err(format!("repair output invalid for {tokens:?}"));
    }
    if repair(r.tokens()) != r {
        return Err(format!("repair not idempotent for {tokens:?}"));
    }
    let legal: String = tokens
        .iter()
        .filter_map(|t| match t {
            Token::Text(c) if t.is_well_typed() => Some(*c),
            _ => None,
        })
        .collect();
    if r.text() != legal {
        return Err(format!("repair lost text for {tokens:?}"));
    }
    Ok(())
}

/// Outcome of fitting one fixed batch of utterances.
pub struct Overfit {
    pub floor: f64,
    pub log: Vec<EpochLog>,
}

impl Overfit {
    /// First step whose loss on the batch is within `ratio` of the floor.
    pub fn reached(&self, ratio: f64) -> Option<usize> {
        self.log.iter().position(|e| e.dev_loss <= ratio * self.floor).map(|i| i + 1)
    }

    pub fn best(&self) -> f64 {
        self.log.iter().map(|e| e.dev_loss).fold(f64::INFINITY, f64::min)
    }
}

/// Trains the tiny preset on one batch of `n` utterances, one step per epoch.
pub fn overfit(n: usize, steps: usize) -> Overfit {
    let corpus = generate_corpus(&SynthConfig {
        num_utterances: n,
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap();
    let targets: Vec<Transcript> = corpus.rich.entries.iter().map(|u| u.target().unwrap()).collect();
    let vocab = Vocab::build(&targets);
    let mut cache = FeatureCache::new();
    stack_features(&corpus.rich, &corpus.features, &mut cache);
    let model = ModelConfig::tiny(3 * 13, vocab.size());
    let cfg = TrainConfig {
        batch_size: n,
        dropout: 0.0,
        spec_augment: None,
        max_epochs: steps,
        max_steps: Some(steps),
        patience_epochs: steps,
        warmup_steps: 100,
        lr_scale: 1.0,
        seed: 5,
        ..TrainConfig::tiny()
    };
    let sets = vec![(corpus.rich.clone(), StyleToken::Rich)];
    let out = Trainer::new(&sets, &sets, &vocab, &model, &cfg).features(&cache).run().unwrap();
    Overfit {
        floor: rtasr::training::smoothed_ce_floor(vocab.size(), cfg.label_smoothing),
        log: out.log,
    }
}
