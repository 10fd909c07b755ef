//! On-disk formats: JSONL manifests and binary feature files.
//!
//! Feature file layout (little-endian): magic `FEAT`, `u32` frames, `u32` dim,
//! then `frames × dim` `f32` values row-major.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::FeatureMatrix;
use super::SynthError;
use crate::transcript::{parse, Transcript};
use crate::vocab::StyleToken;

const FEAT_MAGIC: &[u8; 4] = b"FEAT";

pub fn write_features(path: impl AsRef<Path>, f: &FeatureMatrix) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode_features(f))?;
    w.flush()
}

pub fn encode_features(f: &FeatureMatrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + f.data().len() * 4);
    buf.extend_from_slice(FEAT_MAGIC);
    buf.extend_from_slice(&(f.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(f.dim() as u32).to_le_bytes());
    for x in f.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix, SynthError> {
    let bad = |msg: &str| SynthError::Format(msg.to_string());
    if bytes.len() < 12 || &bytes[..4] != FEAT_MAGIC {
        return Err(bad("missing FEAT header"));
    }
    let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != frames * dim * 4 {
        return Err(bad("feature payload length does not match header"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureMatrix::new(frames, dim, data))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix, SynthError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_features(&bytes)
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub feature_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rich_text: Option<String>,
    pub common_text: String,
    pub style: StyleToken,
    /// Set on machine-labeled entries, whose `rich_text` need not strip to `common_text`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub pseudo: bool,
}

impl Utterance {
    /// Training target for this entry's style.
    pub fn target(&self) -> Result<Transcript, SynthError> {
        match (self.style, &self.rich_text) {
            (StyleToken::Rich, Some(r)) => Ok(parse(r)?),
            (StyleToken::Rich, None) => Err(SynthError::Invariant(format!(
                "rich utterance {} has no rich_text",
                self.id
            ))),
            (StyleToken::Common, _) => Ok(parse(&self.common_text)?),
        }
    }

    /// Checks that the rich text strips to the common text, unless the entry is pseudo-labeled.
    pub fn check(&self) -> Result<(), SynthError> {
        let common = parse(&self.common_text)?;
        if common.has_phenomena() {
            return Err(SynthError::Invariant(format!(
                "common_text of {} contains phenomenon markup",
                self.id
            )));
        }
        if let Some(rich) = &self.rich_text {
            let rich = parse(rich)?;
            if !self.pseudo && rich.strip_phenomena() != common {
                return Err(SynthError::Invariant(format!(
                    "rich_text of {} does not strip to common_text",
                    self.id
                )));
            }
        } else if self.style == StyleToken::Rich {
            return Err(SynthError::Invariant(format!("rich utterance {} has no rich_text", self.id)));
        }
        Ok(())
    }
}

/// An ordered, single-style list of utterances.
///
/// Relative feature paths resolve against `root`, the directory the manifest
/// was loaded from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub style: StyleToken,
    pub entries: Vec<Utterance>,
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(style: StyleToken, entries: Vec<Utterance>) -> Result<Self, SynthError> {
        let m = Self {
            style,
            entries,
            root: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.root = root.into();
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.style != self.style {
                return Err(SynthError::Invariant(format!(
                    "utterance {} has style {} in a {} manifest",
                    e.id, e.style, self.style
                )));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(SynthError::Invariant(format!("duplicate utterance id {}", e.id)));
            }
            e.check()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn feature_file(&self, u: &Utterance) -> PathBuf {
        let p = Path::new(&u.feature_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Leading `ceil(fraction · len)` entries, in manifest order.
    pub fn truncated(&self, fraction: f64) -> Self {
        let keep = ((self.len() as f64) * fraction.clamp(0.0, 1.0)).ceil() as usize;
        Self {
            style: self.style,
            entries: self.entries[..keep.min(self.len())].to_vec(),
            root: self.root.clone(),
        }
    }

    /// Same utterances relabeled as common style (phenomena dropped from targets).
    pub fn as_common(&self) -> Self {
        Self {
            style: StyleToken::Common,
            entries: self
                .entries
                .iter()
                .map(|u| Utterance {
                    rich_text: None,
                    style: StyleToken::Common,
                    pseudo: false,
                    ..u.clone()
                })
                .collect(),
            root: self.root.clone(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("utterance serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        fs::write(path, self.to_jsonl())
    }

    /// Loads a JSONL manifest. An empty file yields an empty manifest of `default_style`.
    pub fn load(path: impl AsRef<Path>, default_style: StyleToken) -> Result<Self, SynthError> {
        let path = path.as_ref();
        let reader = BufReader::new(fs::File::open(path)?);
        let mut entries = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let u: Utterance = serde_json::from_str(&line)
                .map_err(|e| SynthError::Format(format!("{}:{}: {e}", path.display(), idx + 1)))?;
            entries.push(u);
        }
        let style = entries.first().map_or(default_style, |u| u.style);
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self::new(style, entries)?.with_root(root))
    }

    /// Loads every referenced feature file, keyed by resolved path.
    pub fn load_features(&self) -> Result<BTreeMap<PathBuf, FeatureMatrix>, SynthError> {
        let mut out = BTreeMap::new();
        for u in &self.entries {
            let p = self.feature_file(u);
            if !out.contains_key(&p) {
                let f = read_features(&p)?;
                out.insert(p, f);
            }
        }
        Ok(out)
    }
}
