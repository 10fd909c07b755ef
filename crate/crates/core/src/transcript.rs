//! Rich-transcription markup.
//!
//! A transcript is a sequence of single-character text tokens interleaved with
//! phenomenon markers. Point events (laughs, coughs, ...) are written `[name]`;
//! spanning events (fillers, stretches, ...) open with `[name>` and close with
//! `<name]`. Everything else is text, one token per Unicode scalar.
//!
//! ```
//! use rtasr::transcript::{PhenomenonKind, Token, Transcript};
//!
//! let t = Transcript::parse("[filler>uh<filler]ok[laugh]").unwrap();
//! assert_eq!(t.tokens()[0], Token::Open(PhenomenonKind::Filler));
//! assert_eq!(t.strip_phenomena().to_string(), "uhok");
//! assert_eq!(t.to_string(), "[filler>uh<filler]ok[laugh]");
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Characters that may never appear as text tokens.
pub const RESERVED_CHARS: [char; 4] = ['[', ']', '<', '>'];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arity {
    Single,
    Enclosed,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub enum PhenomenonKind {
    Fragment,
    Laugh,
    Cough,
    Sigh,
    Filler,
    Repetition,
    Misstatement,
    Stretch,
    Laughing,
    HardToHear,
    Emphasis,
}

impl PhenomenonKind {
    /// Inventory order. Single kinds come first.
    pub const ALL: [PhenomenonKind; 11] = [
        PhenomenonKind::Fragment,
        PhenomenonKind::Laugh,
        PhenomenonKind::Cough,
        PhenomenonKind::Sigh,
        PhenomenonKind::Filler,
        PhenomenonKind::Repetition,
        PhenomenonKind::Misstatement,
        PhenomenonKind::Stretch,
        PhenomenonKind::Laughing,
        PhenomenonKind::HardToHear,
        PhenomenonKind::Emphasis,
    ];

    pub fn arity(self) -> Arity {
        use PhenomenonKind::*;
        match self {
            Fragment | Laugh | Cough | Sigh => Arity::Single,
            _ => Arity::Enclosed,
        }
    }

    pub fn is_single(self) -> bool {
        self.arity() == Arity::Single
    }

    /// Name used inside the markup brackets.
    pub fn tag(self) -> &'static str {
        use PhenomenonKind::*;
        match self {
            Fragment => "frag",
            Laugh => "laugh",
            Cough => "cough",
            Sigh => "sigh",
            Filler => "filler",
            Repetition => "repeat",
            Misstatement => "miss",
            Stretch => "stretch",
            Laughing => "laughing",
            HardToHear => "hard2hear",
            Emphasis => "emph",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.tag() == tag)
    }

    /// Position in [`PhenomenonKind::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn singles() -> impl Iterator<Item = PhenomenonKind> {
        Self::ALL.into_iter().filter(|k| k.is_single())
    }

    pub fn enclosed() -> impl Iterator<Item = PhenomenonKind> {
        Self::ALL.into_iter().filter(|k| !k.is_single())
    }
}

impl fmt::Display for PhenomenonKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Text(char),
    Single(PhenomenonKind),
    Open(PhenomenonKind),
    Close(PhenomenonKind),
}

impl Token {
    pub fn is_text(&self) -> bool {
        matches!(self, Token::Text(_))
    }

    pub fn is_phenomenon(&self) -> bool {
        !self.is_text()
    }

    /// Whether the token respects arity and the reserved-character rule on its own.
    pub fn is_well_typed(&self) -> bool {
        match *self {
            Token::Text(c) => !RESERVED_CHARS.contains(&c),
            Token::Single(k) => k.is_single(),
            Token::Open(k) | Token::Close(k) => !k.is_single(),
        }
    }

    /// Canonical markup spelling of this one token.
    pub fn spelling(&self) -> String {
        match *self {
            Token::Text(c) => c.to_string(),
            Token::Single(k) => format!("[{}]", k.tag()),
            Token::Open(k) => format!("[{}>", k.tag()),
            Token::Close(k) => format!("<{}]", k.tag()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("unknown tag `{tag}` at char {pos}")]
    UnknownTag { pos: usize, tag: String },
    #[error("malformed markup at char {pos}")]
    MalformedTag { pos: usize },
    #[error("close tag for `{kind}` at char {pos} has no matching open")]
    UnmatchedClose { pos: usize, kind: PhenomenonKind },
    #[error("`{kind}` opened at char {pos} is never closed")]
    UnclosedOpen { pos: usize, kind: PhenomenonKind },
    #[error("`{kind}` opened at char {pos} while already open")]
    SelfNesting { pos: usize, kind: PhenomenonKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    UnmatchedClose,
    UnclosedOpen,
    SelfNesting,
    /// Single kind used as a span marker or vice versa.
    WrongArity,
    /// Text token holding a markup delimiter.
    ReservedChar,
}

/// A well-formedness violation at a token position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub position: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}@{}", self.kind, self.position)
    }
}

/// A well-formed token sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Transcript {
    tokens: Vec<Token>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    /// Wraps `tokens` if they are well-formed.
    pub fn from_tokens(tokens: Vec<Token>) -> Result<Self, Vec<Violation>> {
        let violations = validate(&tokens);
        if violations.is_empty() {
            Ok(Self { tokens })
        } else {
            Err(violations)
        }
    }

    /// Plain text, one token per character. Reserved characters are dropped.
    pub fn from_text(text: &str) -> Self {
        Self {
            tokens: text
                .chars()
                .filter(|c| !RESERVED_CHARS.contains(c))
                .map(Token::Text)
                .collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ParseError> {
        parse(text)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<Token> {
        self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Common-style view: markers removed, all text (including text inside spans) kept.
    pub fn strip_phenomena(&self) -> Transcript {
        Transcript {
            tokens: self.tokens.iter().copied().filter(Token::is_text).collect(),
        }
    }

    pub fn has_phenomena(&self) -> bool {
        self.tokens.iter().any(Token::is_phenomenon)
    }

    pub fn text(&self) -> String {
        self.tokens
            .iter()
            .filter_map(|t| match t {
                Token::Text(c) => Some(*c),
                _ => None,
            })
            .collect()
    }
}

impl fmt::Display for Transcript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for token in &self.tokens {
            match *token {
                Token::Text(c) => write!(f, "{c}")?,
                Token::Single(k) => write!(f, "[{}]", k.tag())?,
                Token::Open(k) => write!(f, "[{}>", k.tag())?,
                Token::Close(k) => write!(f, "<{}]", k.tag())?,
            }
        }
        Ok(())
    }
}

impl FromStr for Transcript {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

impl AsRef<[Token]> for Transcript {
    fn as_ref(&self) -> &[Token] {
        &self.tokens
    }
}

/// Parses markup into a well-formed transcript.
pub fn parse(text: &str) -> Result<Transcript, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::with_capacity(chars.len());
    // (kind, char position of the open tag)
    let mut open: Vec<(PhenomenonKind, usize)> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '[' | '<' => {
                let start = i;
                let mut j = i + 1;
                while j < chars.len() && !RESERVED_CHARS.contains(&chars[j]) {
                    j += 1;
                }
                if j >= chars.len() {
                    return Err(ParseError::MalformedTag { pos: start });
                }
                let name: String = chars[i + 1..j].iter().collect();
                let end = chars[j];
                let unknown = || ParseError::UnknownTag {
                    pos: start,
                    tag: chars[start..=j].iter().collect(),
                };
                let kind = PhenomenonKind::from_tag(&name);
                let token = match (c, end, kind) {
                    ('[', ']', Some(k)) if k.is_single() => Token::Single(k),
                    ('[', '>', Some(k)) if !k.is_single() => Token::Open(k),
                    ('<', ']', Some(k)) if !k.is_single() => Token::Close(k),
                    ('[', ']' | '>', _) | ('<', ']', _) => return Err(unknown()),
                    _ => return Err(ParseError::MalformedTag { pos: start }),
                };
                match token {
                    Token::Open(k) => {
                        if open.iter().any(|(o, _)| *o == k) {
                            return Err(ParseError::SelfNesting { pos: start, kind: k });
                        }
                        open.push((k, start));
                    }
                    Token::Close(k) => match open.iter().rposition(|(o, _)| *o == k) {
                        Some(idx) => {
                            open.remove(idx);
                        }
                        None => return Err(ParseError::UnmatchedClose { pos: start, kind: k }),
                    },
                    _ => {}
                }
                tokens.push(token);
                i = j + 1;
            }
            ']' | '>' => return Err(ParseError::MalformedTag { pos: i }),
            _ => {
                tokens.push(Token::Text(c));
                i += 1;
            }
        }
    }
    if let Some(&(kind, pos)) = open.first() {
        return Err(ParseError::UnclosedOpen { pos, kind });
    }
    Ok(Transcript { tokens })
}

/// Canonical markup for a transcript.
pub fn serialize(t: &Transcript) -> String {
    t.to_string()
}

/// Lists every well-formedness violation in a raw token sequence.
///
/// Self-nesting opens are treated as absent when checking later tokens, so a
/// single stray open does not also produce a spurious unmatched close.
pub fn validate(tokens: &[Token]) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut open: Vec<(PhenomenonKind, usize)> = Vec::new();
    for (position, token) in tokens.iter().enumerate() {
        if !token.is_well_typed() {
            let kind = if token.is_text() {
                ViolationKind::ReservedChar
            } else {
                ViolationKind::WrongArity
            };
            violations.push(Violation { position, kind });
            continue;
        }
        match *token {
            Token::Open(k) => {
                if open.iter().any(|(o, _)| *o == k) {
                    violations.push(Violation {
                        position,
                        kind: ViolationKind::SelfNesting,
                    });
                } else {
                    open.push((k, position));
                }
            }
            Token::Close(k) => match open.iter().rposition(|(o, _)| *o == k) {
                Some(idx) => {
                    open.remove(idx);
                }
                None => violations.push(Violation {
                    position,
                    kind: ViolationKind::UnmatchedClose,
                }),
            },
            _ => {}
        }
    }
    for (_, position) in open {
        violations.push(Violation {
            position,
            kind: ViolationKind::UnclosedOpen,
        });
    }
    violations.sort_by_key(|v| v.position);
    violations
}

/// Deterministic left-to-right repair into a well-formed transcript.
///
/// Unmatched closes and self-nesting opens are dropped, ill-typed tokens are
/// dropped, and spans still open at the end are closed in reverse opening
/// order.
pub fn repair(tokens: &[Token]) -> Transcript {
    let mut out = Vec::with_capacity(tokens.len() + 2);
    let mut open: Vec<PhenomenonKind> = Vec::new();
    for token in tokens {
        if !token.is_well_typed() {
            continue;
        }
        match *token {
            Token::Open(k) => {
                if open.contains(&k) {
                    continue;
                }
                open.push(k);
            }
            Token::Close(k) => match open.iter().rposition(|o| *o == k) {
                Some(idx) => {
                    open.remove(idx);
                }
                None => continue,
            },
            _ => {}
        }
        out.push(*token);
    }
    out.extend(open.iter().rev().map(|k| Token::Close(*k)));
    Transcript { tokens: out }
}

/// Phenomenon counts: one per single marker, one per span.
pub fn phenomenon_stats<'a, I>(corpus: I) -> BTreeMap<PhenomenonKind, usize>
where
    I: IntoIterator<Item = &'a Transcript>,
{
    let mut counts: BTreeMap<PhenomenonKind, usize> =
        PhenomenonKind::ALL.iter().map(|k| (*k, 0)).collect();
    for t in corpus {
        for token in t.tokens() {
            if let Token::Single(k) | Token::Open(k) = token {
                *counts.entry(*k).or_default() += 1;
            }
        }
    }
    counts
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: ParseError },
}

/// Reads a corpus file: one markup transcript per line.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Transcript>, CorpusError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        out.push(parse(line).map_err(|source| CorpusError::Parse {
            line: idx + 1,
            source,
        })?);
    }
    Ok(out)
}

pub fn write_corpus<'a>(
    path: impl AsRef<Path>,
    corpus: impl IntoIterator<Item = &'a Transcript>,
) -> io::Result<()> {
    let mut w = io::BufWriter::new(fs::File::create(path)?);
    for t in corpus {
        writeln!(w, "{t}")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::PhenomenonKind::*;
    use super::*;

    fn toks(s: &str) -> Vec<Token> {
        parse(s).unwrap().into_tokens()
    }

    #[test]
    fn inventory_arity_matches_types() {
        let singles: Vec<_> = PhenomenonKind::singles().collect();
        assert_eq!(singles, vec![Fragment, Laugh, Cough, Sigh]);
        assert_eq!(PhenomenonKind::enclosed().count(), 7);
        for k in PhenomenonKind::ALL {
            assert_eq!(PhenomenonKind::from_tag(k.tag()), Some(k));
        }
    }

    #[test]
    fn parse_examples() {
        assert_eq!(
            toks("a[laugh]b"),
            vec![Token::Text('a'), Token::Single(Laugh), Token::Text('b')]
        );
        assert!(toks("").is_empty());
        assert_eq!(
            toks("[filler>uh<filler]ok"),
            vec![
                Token::Open(Filler),
                Token::Text('u'),
                Token::Text('h'),
                Token::Close(Filler),
                Token::Text('o'),
                Token::Text('k'),
            ]
        );
        assert!(matches!(
            parse("<filler]x"),
            Err(ParseError::UnmatchedClose { pos: 0, kind: Filler })
        ));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse("[foo]"), Err(ParseError::UnknownTag { .. })));
        assert!(matches!(parse("[filler]"), Err(ParseError::UnknownTag { .. })));
        assert!(matches!(parse("[laugh>"), Err(ParseError::UnknownTag { .. })));
        assert!(matches!(parse("[filler>a"), Err(ParseError::UnclosedOpen { pos: 0, .. })));
        assert!(matches!(
            parse("[filler>[filler>a<filler]<filler]"),
            Err(ParseError::SelfNesting { pos: 8, .. })
        ));
        assert!(matches!(parse("a]"), Err(ParseError::MalformedTag { pos: 1 })));
        assert!(matches!(parse("a[laugh"), Err(ParseError::MalformedTag { pos: 1 })));
        assert!(matches!(parse("<laugh>"), Err(ParseError::MalformedTag { .. })));
    }

    #[test]
    fn different_kinds_nest() {
        let t = parse("[stretch>a[laughing>b<laughing]<stretch]").unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t.to_string(), "[stretch>a[laughing>b<laughing]<stretch]");
    }

    #[test]
    fn unicode_text_is_one_token_per_scalar() {
        let t = parse("え[laugh]と").unwrap();
        assert_eq!(t.tokens(), &[Token::Text('え'), Token::Single(Laugh), Token::Text('と')]);
    }

    #[test]
    fn serialize_examples() {
        let t = Transcript::from_tokens(vec![Token::Single(Laugh)]).unwrap();
        assert_eq!(serialize(&t), "[laugh]");
        assert_eq!(serialize(&Transcript::new()), "");
    }

    #[test]
    fn strip_examples() {
        assert_eq!(parse("a[laugh]b").unwrap().strip_phenomena().tokens(), &toks("ab")[..]);
        assert_eq!(
            parse("[filler>u<filler]").unwrap().strip_phenomena().tokens(),
            &[Token::Text('u')]
        );
        let plain = parse("abc").unwrap();
        assert_eq!(plain.strip_phenomena(), plain);
    }

    #[test]
    fn validate_examples() {
        assert!(validate(&toks("a[filler>b<filler]")).is_empty());
        assert_eq!(
            validate(&[Token::Open(Filler)]),
            vec![Violation { position: 0, kind: ViolationKind::UnclosedOpen }]
        );
        let v = validate(&[Token::Open(Filler), Token::Open(Filler)]);
        assert!(v.contains(&Violation { position: 1, kind: ViolationKind::SelfNesting }));
        assert_eq!(
            validate(&[Token::Single(Filler), Token::Open(Laugh), Token::Text('[')])
                .iter()
                .map(|v| v.kind)
                .collect::<Vec<_>>(),
            vec![
                ViolationKind::WrongArity,
                ViolationKind::WrongArity,
                ViolationKind::ReservedChar
            ]
        );
    }

    #[test]
    fn repair_examples() {
        assert_eq!(
            repair(&[Token::Close(Filler), Token::Text('a')]).tokens(),
            &[Token::Text('a')]
        );
        assert_eq!(
            repair(&[Token::Open(Filler), Token::Text('a')]).tokens(),
            &[Token::Open(Filler), Token::Text('a'), Token::Close(Filler)]
        );
        let wf = toks("[emph>x[laugh]<emph]y");
        assert_eq!(repair(&wf).tokens(), &wf[..]);
    }

    #[test]
    fn repair_closes_in_reverse_opening_order() {
        let r = repair(&[Token::Open(Filler), Token::Open(Stretch), Token::Text('a')]);
        assert_eq!(r.to_string(), "[filler>[stretch>a<stretch]<filler]");
    }

    #[test]
    fn stats_examples() {
        let laugh = parse("[laugh]").unwrap();
        let s = phenomenon_stats([&laugh, &laugh]);
        assert_eq!(s[&Laugh], 2);
        assert_eq!(s.values().sum::<usize>(), 2);

        let filler = parse("[filler>u<filler]").unwrap();
        assert_eq!(phenomenon_stats([&filler])[&Filler], 1);

        let empty: Vec<Transcript> = vec![];
        let s = phenomenon_stats(&empty);
        assert_eq!(s.len(), 11);
        assert!(s.values().all(|&c| c == 0));
    }

    #[test]
    fn corpus_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        let corpus = vec![parse("a[laugh]").unwrap(), Transcript::new(), parse("[miss>x<miss]").unwrap()];
        write_corpus(&path, &corpus).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), corpus);
    }
}
