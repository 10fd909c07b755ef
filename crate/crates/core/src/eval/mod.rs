//! Character error rates with and without phenomenon symbols.
//!
//! Both rates pool errors over the corpus: `100 · Σ(S+D+I) / Σ ref_len`.
//! In the rich variant every phenomenon marker is one symbol, so an enclosed
//! span contributes two (its open and its close marker).

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transcript::{Token, Transcript};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("reference and hypothesis lists differ in length ({refs} vs {hyps})")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error("total reference length is zero")]
    EmptyReference,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_length: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Percentage error rate; `None` when the reference is empty.
    pub fn rate(&self) -> Option<f64> {
        (self.reference_length > 0).then(|| 100.0 * self.errors() as f64 / self.reference_length as f64)
    }
}

impl Add for ErrorCounts {
    type Output = Self;

    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

impl AddAssign for ErrorCounts {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.reference_length += o.reference_length;
    }
}

/// Levenshtein alignment with unit costs. On ties the backtrace takes a
/// substitution (or match) first, then a deletion, then an insertion.
pub fn edit_distance<S: PartialEq>(reference: &[S], hypothesis: &[S]) -> ErrorCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut c = ErrorCounts {
        reference_length: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let miss = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[(i - 1) * w + j - 1] + miss == here {
                c.substitutions += miss;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

fn pooled<F>(refs: &[Transcript], hyps: &[Transcript], symbols: F) -> Result<ErrorCounts, EvalError>
where
    F: Fn(&Transcript) -> Vec<Token>,
{
    if refs.len() != hyps.len() {
        return Err(EvalError::LengthMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    let total = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| edit_distance(&symbols(r), &symbols(h)))
        .fold(ErrorCounts::default(), Add::add);
    if total.reference_length == 0 {
        return Err(EvalError::EmptyReference);
    }
    Ok(total)
}

/// Pooled counts over graphemes only.
pub fn counts_without_phenomena(refs: &[Transcript], hyps: &[Transcript]) -> Result<ErrorCounts, EvalError> {
    pooled(refs, hyps, |t| t.strip_phenomena().into_tokens())
}

/// Pooled counts over graphemes and phenomenon markers.
pub fn counts_with_phenomena(refs: &[Transcript], hyps: &[Transcript]) -> Result<ErrorCounts, EvalError> {
    pooled(refs, hyps, |t| t.tokens().to_vec())
}

pub fn cer_without_phenomena(refs: &[Transcript], hyps: &[Transcript]) -> Result<f64, EvalError> {
    Ok(counts_without_phenomena(refs, hyps)?.rate().unwrap())
}

pub fn cer_with_phenomena(refs: &[Transcript], hyps: &[Transcript]) -> Result<f64, EvalError> {
    Ok(counts_with_phenomena(refs, hyps)?.rate().unwrap())
}

/// Share of phenomenon symbols among all symbols; 0 for no symbols.
pub fn phenomenon_emission_rate(hyps: &[Transcript]) -> f64 {
    let (mut ph, mut all) = (0usize, 0usize);
    for t in hyps {
        all += t.len();
        ph += t.tokens().iter().filter(|k| k.is_phenomenon()).count();
    }
    if all == 0 {
        0.0
    } else {
        ph as f64 / all as f64
    }
}

/// Scores for one system on one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemScore {
    pub system: String,
    pub train_data: String,
    pub style_token: bool,
    pub cer_plain: f64,
    pub cer_rich: f64,
    pub n_utts: usize,
    pub ref_symbols: usize,
}

impl SystemScore {
    pub fn compute(
        system: impl Into<String>,
        train_data: impl Into<String>,
        style_token: bool,
        refs: &[Transcript],
        hyps: &[Transcript],
    ) -> Result<Self, EvalError> {
        let plain = counts_without_phenomena(refs, hyps)?;
        let rich = counts_with_phenomena(refs, hyps)?;
        Ok(Self {
            system: system.into(),
            train_data: train_data.into(),
            style_token,
            cer_plain: round1(plain.rate().unwrap()),
            cer_rich: round1(rich.rate().unwrap()),
            n_utts: refs.len(),
            ref_symbols: rich.reference_length,
        })
    }
}

/// Rounds half away from zero to one decimal.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// One JSON object per line.
pub fn report_jsonl(rows: &[SystemScore]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect()
}

pub fn report_text(rows: &[SystemScore]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:<12} {:<6} {:>10} {:>10} {:>7} {:>9}",
        "system", "train_data", "style", "cer_plain", "cer_rich", "utts", "symbols"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:<12} {:<6} {:>10.1} {:>10.1} {:>7} {:>9}",
            r.system,
            r.train_data,
            if r.style_token { "yes" } else { "no" },
            r.cer_plain,
            r.cer_rich,
            r.n_utts,
            r.ref_symbols
        );
    }
    s
}
