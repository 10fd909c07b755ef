//! Token inventory and id mapping.
//!
//! Ids 0..=4 are reserved for the special symbols. The style token takes the
//! place of the usual start-of-sentence symbol: every encoded sequence starts
//! with `[rich]` or `[common]` and ends with EOS.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::transcript::{PhenomenonKind, Token, Transcript};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const EOS: usize = 2;
pub const STYLE_RICH: usize = 3;
pub const STYLE_COMMON: usize = 4;
pub const NUM_SPECIALS: usize = 5;

/// Number of phenomenon token types: one per single kind, open+close per enclosed kind.
pub const NUM_PHENOMENON_TOKENS: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleToken {
    Rich,
    Common,
}

impl StyleToken {
    pub fn id(self) -> usize {
        match self {
            StyleToken::Rich => STYLE_RICH,
            StyleToken::Common => STYLE_COMMON,
        }
    }

    pub fn from_id(id: usize) -> Option<Self> {
        match id {
            STYLE_RICH => Some(StyleToken::Rich),
            STYLE_COMMON => Some(StyleToken::Common),
            _ => None,
        }
    }
}

impl fmt::Display for StyleToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StyleToken::Rich => "rich",
            StyleToken::Common => "common",
        })
    }
}

impl std::str::FromStr for StyleToken {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rich" | "[rich]" => Ok(StyleToken::Rich),
            "common" | "[common]" => Ok(StyleToken::Common),
            other => Err(format!("unknown style `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Entry {
    Pad,
    Unk,
    Eos,
    Style(StyleToken),
    Token(Token),
}

impl Entry {
    const SPECIALS: [Entry; NUM_SPECIALS] = [
        Entry::Pad,
        Entry::Unk,
        Entry::Eos,
        Entry::Style(StyleToken::Rich),
        Entry::Style(StyleToken::Common),
    ];

    fn spelling(&self) -> String {
        match self {
            Entry::Pad => "<pad>".into(),
            Entry::Unk => "<unk>".into(),
            Entry::Eos => "<eos>".into(),
            Entry::Style(StyleToken::Rich) => "<rich>".into(),
            Entry::Style(StyleToken::Common) => "<common>".into(),
            Entry::Token(Token::Text(c)) => match c {
                '\\' => "\\\\".into(),
                '\n' => "\\n".into(),
                '\r' => "\\r".into(),
                '\t' => "\\t".into(),
                c => c.to_string(),
            },
            Entry::Token(t) => t.spelling(),
        }
    }

    fn from_spelling(s: &str) -> Option<Entry> {
        if let Some(e) = Self::SPECIALS.iter().find(|e| e.spelling() == s) {
            return Some(*e);
        }
        let unescaped = match s {
            "\\\\" => Some('\\'),
            "\\n" => Some('\n'),
            "\\r" => Some('\r'),
            "\\t" => Some('\t'),
            _ => None,
        };
        if let Some(c) = unescaped {
            return Some(Entry::Token(Token::Text(c)));
        }
        let mut chars = s.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            let token = Token::Text(c);
            return token.is_well_typed().then_some(Entry::Token(token));
        }
        // A single marker is a complete transcript on its own; open/close markers
        // are not, so match them against the inventory directly.
        PhenomenonKind::ALL.iter().find_map(|&k| {
            [Token::Single(k), Token::Open(k), Token::Close(k)]
                .into_iter()
                .find(|t| t.is_well_typed() && t.spelling() == s)
                .map(Entry::Token)
        })
    }
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("id sequence does not start with a style token (got {0:?})")]
    MalformedHeader(Option<usize>),
    #[error("vocab file line {line}: {reason}")]
    BadFile { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Bidirectional token/id map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    entries: Vec<Entry>,
    ids: HashMap<Token, usize>,
}

impl Vocab {
    fn from_entries(entries: Vec<Entry>) -> Self {
        let ids = entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| match e {
                Entry::Token(t) => Some((*t, i)),
                _ => None,
            })
            .collect();
        Self { entries, ids }
    }

    /// Specials, then the 18 phenomenon tokens, then graphemes in first-occurrence order.
    pub fn build<'a, I>(corpora: I) -> Self
    where
        I: IntoIterator<Item = &'a Transcript>,
    {
        let mut entries: Vec<Entry> = Entry::SPECIALS.to_vec();
        for k in PhenomenonKind::ALL {
            if k.is_single() {
                entries.push(Entry::Token(Token::Single(k)));
            } else {
                entries.push(Entry::Token(Token::Open(k)));
                entries.push(Entry::Token(Token::Close(k)));
            }
        }
        let mut vocab = Self::from_entries(entries);
        for t in corpora {
            for token in t.tokens() {
                if token.is_text() && !vocab.ids.contains_key(token) {
                    vocab.ids.insert(*token, vocab.entries.len());
                    vocab.entries.push(Entry::Token(*token));
                }
            }
        }
        vocab
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn id_of(&self, token: &Token) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn entry(&self, id: usize) -> Option<Entry> {
        self.entries.get(id).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<Token> {
        match self.entries.get(id)? {
            Entry::Token(t) => Some(*t),
            _ => None,
        }
    }

    pub fn is_phenomenon_id(&self, id: usize) -> bool {
        matches!(self.token_of(id), Some(t) if t.is_phenomenon())
    }

    /// `[style] ++ tokens ++ [EOS]`; out-of-vocabulary tokens map to UNK.
    pub fn encode(&self, t: &Transcript, style: StyleToken) -> Vec<usize> {
        let mut ids = Vec::with_capacity(t.len() + 2);
        ids.push(style.id());
        ids.extend(t.tokens().iter().map(|tok| self.id_of(tok).unwrap_or(UNK)));
        ids.push(EOS);
        ids
    }

    /// Splits an id sequence into its style and raw token sequence.
    ///
    /// Reading stops at the first EOS. PAD, UNK and stray style ids carry no
    /// token and are skipped. The tokens are returned as-is; use
    /// [`crate::transcript::repair`] to obtain a well-formed transcript.
    pub fn decode_ids(&self, ids: &[usize]) -> Result<(StyleToken, Vec<Token>), VocabError> {
        let style = ids
            .first()
            .and_then(|&id| StyleToken::from_id(id))
            .ok_or(VocabError::MalformedHeader(ids.first().copied()))?;
        let tokens = ids[1..]
            .iter()
            .take_while(|&&id| id != EOS)
            .filter_map(|&id| self.token_of(id))
            .collect();
        Ok((style, tokens))
    }

    /// Text form: one `<id>\t<spelling>` line per entry.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, e) in self.entries.iter().enumerate() {
            out.push_str(&format!("{id}\t{}\n", e.spelling()));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, VocabError> {
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let bad = |reason: String| VocabError::BadFile {
                line: idx + 1,
                reason,
            };
            let (id, spelling) = line
                .split_once('\t')
                .ok_or_else(|| bad("missing tab separator".into()))?;
            let id: usize = id.parse().map_err(|_| bad(format!("bad id `{id}`")))?;
            if id != entries.len() {
                return Err(bad(format!("expected id {}, found {id}", entries.len())));
            }
            let entry = Entry::from_spelling(spelling)
                .ok_or_else(|| bad(format!("unrecognized token `{spelling}`")))?;
            if id < NUM_SPECIALS && entry != Entry::SPECIALS[id] {
                return Err(bad(format!("reserved id {id} must be {}", Entry::SPECIALS[id].spelling())));
            }
            if id >= NUM_SPECIALS && !matches!(entry, Entry::Token(_)) {
                return Err(bad(format!("special `{spelling}` outside the reserved range")));
            }
            if entries.contains(&entry) {
                return Err(bad(format!("duplicate token `{spelling}`")));
            }
            entries.push(entry);
        }
        if entries.len() < NUM_SPECIALS {
            return Err(VocabError::BadFile {
                line: entries.len() + 1,
                reason: "missing reserved entries".into(),
            });
        }
        Ok(Self::from_entries(entries))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        fs::write(path, self.to_text())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the text form; checkpoints record it to detect vocab mismatches.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}
