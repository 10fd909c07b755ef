//! The three-step semi-supervised procedure and the experiment driver.
//!
//! Step 1 trains on common and rich data with their style tokens. Step 2
//! relabels every common utterance by decoding it with the rich style. Step 3
//! trains again on common, rich and pseudo-rich data. The experiment driver
//! also builds the general-ASR and rich-only baselines, scores everything on a
//! held-out rich split and optionally sweeps the amount of pseudo-rich data.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decode::{beam_search, hypothesis_transcript, BeamConfig};
use crate::eval::{counts_with_phenomena, counts_without_phenomena, phenomenon_emission_rate, round1, SystemScore};
use crate::model::{Checkpoint, ModelConfig, ModelParams, Preset};
use crate::synth::{
    add_dynamics, derive_seed, generate_corpus, normalize, read_features, write_features, FeatureMatrix, Manifest,
    SynthConfig, Utterance,
};
use crate::training::{stack_features, FeatureCache, TrainConfig, TrainError, TrainOutcome, Trainer};
use crate::transcript::Transcript;
use crate::vocab::{StyleToken, Vocab};

const STREAM_CORPUS: u64 = 0x636f_7270;
const STREAM_TRAIN: u64 = 0x7472_6e;

/// Pseudo-data fractions of the sweep.
pub const SWEEP_FRACTIONS: [f64; 4] = [0.0, 0.25, 0.5, 1.0];

/// A failure tagged with the stage it happened in.
#[derive(Debug, Error)]
#[error("[{stage}] {message}")]
pub struct PipelineError {
    pub stage: String,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: impl Into<String>, message: impl fmt::Display) -> Self {
        Self {
            stage: stage.into(),
            message: message.to_string(),
        }
    }
}

fn at<E: fmt::Display>(stage: &str) -> impl Fn(E) -> PipelineError + '_ {
    move |e| PipelineError::new(stage, e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum System {
    #[serde(rename = "ASR_C")]
    AsrC,
    #[serde(rename = "ASR_CR")]
    AsrCr,
    #[serde(rename = "RT_R")]
    RtR,
    #[serde(rename = "RT_CR")]
    RtCr,
    #[serde(rename = "RT_CRPR")]
    RtCrpr,
}

impl System {
    pub const ALL: [System; 5] = [System::AsrC, System::AsrCr, System::RtR, System::RtCr, System::RtCrpr];

    pub fn label(self) -> &'static str {
        match self {
            System::AsrC => "ASR_C",
            System::AsrCr => "ASR_CR",
            System::RtR => "RT_R",
            System::RtCr => "RT_CR",
            System::RtCrpr => "RT_CRPR",
        }
    }

    pub fn train_data(self) -> &'static str {
        match self {
            System::AsrC => "C",
            System::AsrCr | System::RtCr => "C+R",
            System::RtR => "R",
            System::RtCrpr => "C+R+PR",
        }
    }

    /// Whether the system relies on the style token to choose its output style.
    pub fn style_token(self) -> bool {
        matches!(self, System::RtCr | System::RtCrpr)
    }

    /// Style used when decoding the evaluation split.
    pub fn eval_style(self) -> StyleToken {
        match self {
            System::AsrC | System::AsrCr => StyleToken::Common,
            _ => StyleToken::Rich,
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for System {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        System::ALL
            .into_iter()
            .find(|x| x.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown system {s:?}"))
    }
}

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Generator settings; `num_utterances` and `seed` are set per split and seed.
    pub synth: SynthConfig,
    pub rich_utterances: usize,
    pub common_utterances: usize,
    pub dev_utterances: usize,
    pub eval_utterances: usize,
    pub preset: Preset,
    pub train: TrainConfig,
    /// Beam width for evaluation decoding.
    pub beam: usize,
    /// Beam width for pseudo-labeling; `None` uses `beam`.
    pub pseudo_label_beam: Option<usize>,
    pub max_len: Option<usize>,
    pub pr_fraction: f64,
    /// Also train and score every fraction in [`SWEEP_FRACTIONS`].
    pub sweep: bool,
    /// Start Step 3 from the Step 1 parameters instead of a fresh initialization.
    pub warm_start_step3: bool,
    pub systems: BTreeSet<System>,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            rich_utterances: 500,
            common_utterances: 5000,
            dev_utterances: 100,
            eval_utterances: 200,
            preset: Preset::Tiny,
            train: TrainConfig::tiny(),
            beam: 20,
            pseudo_label_beam: None,
            max_len: None,
            pr_fraction: 1.0,
            sweep: false,
            warm_start_step3: false,
            systems: System::ALL.into_iter().collect(),
            output_dir: PathBuf::from("experiment"),
            seeds: vec![0, 1, 2],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::new("config", m));
        if !(0.0..=1.0).contains(&self.pr_fraction) {
            return bad("pr_fraction must lie in [0, 1]");
        }
        if self.systems.is_empty() {
            return bad("at least one system is required");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.beam == 0 || self.pseudo_label_beam == Some(0) || self.max_len == Some(0) {
            return bad("beam widths and max_len must be positive");
        }
        if self.rich_utterances == 0 || self.eval_utterances == 0 {
            return bad("rich and eval splits must be nonempty");
        }
        if self.common_utterances == 0
            && (self.systems.iter().any(|s| *s != System::RtR) || self.sweep)
        {
            return bad("the common split must be nonempty for systems other than RT_R");
        }
        let mut seen = BTreeSet::new();
        if !self.seeds.iter().all(|s| seen.insert(*s)) {
            return bad("seeds must be distinct");
        }
        self.synth.validate().map_err(at("config"))?;
        self.train.validate().map_err(at("config"))
    }

    fn beam_config(&self, beam: usize) -> BeamConfig {
        BeamConfig {
            beam,
            max_len: self.max_len,
            length_norm: false,
        }
    }

    fn needs_step1(&self) -> bool {
        self.sweep || self.systems.contains(&System::RtCr) || self.systems.contains(&System::RtCrpr)
    }

    fn fractions(&self) -> Vec<f64> {
        let mut f: Vec<f64> = if self.sweep { SWEEP_FRACTIONS.to_vec() } else { Vec::new() };
        if self.systems.contains(&System::RtCrpr) && !f.contains(&self.pr_fraction) {
            f.push(self.pr_fraction);
        }
        f
    }
}

/// Step 1: trains Θ̂ on `{(D_c, [common]), (D_r, [rich])}`.
#[allow(clippy::too_many_arguments)]
pub fn step1_train(
    d_c: &Manifest,
    d_r: &Manifest,
    dev: &[(Manifest, StyleToken)],
    vocab: &Vocab,
    model: &ModelConfig,
    cfg: &TrainConfig,
    cache: Option<&FeatureCache>,
) -> Result<TrainOutcome, TrainError> {
    let data = [(d_c.clone(), StyleToken::Common), (d_r.clone(), StyleToken::Rich)];
    run_training(&data, dev, vocab, model, cfg, cache, None)
}

/// Step 3: trains Θ̃ on `{(D_c, [common]), (D_r, [rich]), (D_pr, [rich])}`, with
/// D_pr cut to its leading `pr_fraction` share.
#[allow(clippy::too_many_arguments)]
pub fn step3_train(
    d_c: &Manifest,
    d_r: &Manifest,
    d_pr: &Manifest,
    pr_fraction: f64,
    dev: &[(Manifest, StyleToken)],
    vocab: &Vocab,
    model: &ModelConfig,
    cfg: &TrainConfig,
    cache: Option<&FeatureCache>,
    warm_start: Option<&ModelParams<f32>>,
) -> Result<TrainOutcome, TrainError> {
    let data = [
        (d_c.clone(), StyleToken::Common),
        (d_r.clone(), StyleToken::Rich),
        (d_pr.truncated(pr_fraction), StyleToken::Rich),
    ];
    run_training(&data, dev, vocab, model, cfg, cache, warm_start)
}

fn run_training(
    data: &[(Manifest, StyleToken)],
    dev: &[(Manifest, StyleToken)],
    vocab: &Vocab,
    model: &ModelConfig,
    cfg: &TrainConfig,
    cache: Option<&FeatureCache>,
    warm_start: Option<&ModelParams<f32>>,
) -> Result<TrainOutcome, TrainError> {
    let mut t = Trainer::new(data, dev, vocab, model, cfg);
    if let Some(c) = cache {
        t = t.features(c);
    }
    if let Some(p) = warm_start {
        t = t.warm_start(p);
    }
    t.run()
}

/// Normalized decoder input for one manifest entry.
fn model_input(
    ckpt: &Checkpoint,
    manifest: &Manifest,
    u: &Utterance,
    cache: Option<&FeatureCache>,
) -> Result<FeatureMatrix, String> {
    let path = manifest.feature_file(u);
    let stacked = match cache.and_then(|c| c.get(&path)) {
        Some(f) => f.clone(),
        None => add_dynamics(&read_features(&path).map_err(|e| e.to_string())?),
    };
    Ok(normalize(&stacked, &ckpt.norm))
}

/// Decodes every entry with `style`, in manifest order. Work is split across
/// threads; the output order does not depend on the split.
pub fn decode_manifest(
    ckpt: &Checkpoint,
    vocab: &Vocab,
    manifest: &Manifest,
    style: StyleToken,
    beam: BeamConfig,
    cache: Option<&FeatureCache>,
) -> Result<Vec<Transcript>, PipelineError> {
    let one = |u: &Utterance| -> Result<Transcript, String> {
        let f = model_input(ckpt, manifest, u, cache)?;
        let hyps = beam_search(&ckpt.params, &f, style, beam).map_err(|e| e.to_string())?;
        hypothesis_transcript(vocab, &hyps[0]).map_err(|e| e.to_string())
    };
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let chunk = manifest.len().div_ceil(threads).max(1);
    let parts: Vec<Result<Vec<Transcript>, PipelineError>> = std::thread::scope(|s| {
        let handles: Vec<_> = manifest
            .entries
            .chunks(chunk)
            .map(|c| {
                s.spawn(move || {
                    c.iter()
                        .map(|u| one(u).map_err(|e| PipelineError::new("decode", format!("utterance {}: {e}", u.id))))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("decode worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(manifest.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Step 2: relabels every common utterance with its rich-style decoding.
///
/// The result has one entry per input entry, keeps ids, feature paths and
/// common text, and marks the entries as pseudo-labeled.
pub fn step2_pseudo_label(
    ckpt: &Checkpoint,
    vocab: &Vocab,
    d_c: &Manifest,
    beam: BeamConfig,
    cache: Option<&FeatureCache>,
) -> Result<Manifest, PipelineError> {
    if d_c.is_empty() {
        return Err(PipelineError::new("pseudo-label", "common manifest is empty"));
    }
    let hyps = decode_manifest(ckpt, vocab, d_c, StyleToken::Rich, beam, cache)
        .map_err(|e| PipelineError::new("pseudo-label", e.message))?;
    let entries = d_c
        .entries
        .iter()
        .zip(hyps)
        .map(|(u, h)| Utterance {
            id: u.id.clone(),
            feature_path: u.feature_path.clone(),
            rich_text: Some(h.to_string()),
            common_text: u.common_text.clone(),
            style: StyleToken::Rich,
            pseudo: true,
        })
        .collect();
    Manifest::new(StyleToken::Rich, entries)
        .map(|m| m.with_root(d_c.root.clone()))
        .map_err(at("pseudo-label"))
}

/// Raw pooled rates for one system on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemResult {
    pub system: System,
    pub seed: u64,
    pub cer_plain: f64,
    pub cer_rich: f64,
    pub n_utts: usize,
    pub ref_symbols: usize,
}

/// One point of the pseudo-data sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub seed: Option<u64>,
    pub pr_fraction: f64,
    pub pr_utterances: usize,
    pub cer_plain: f64,
    pub cer_rich: f64,
}

/// Phenomenon emission rates of the Step 3 model under both style tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSwitch {
    pub seed: Option<u64>,
    pub rich_rate: f64,
    pub common_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub results: Vec<SystemResult>,
    pub sweep: Vec<SweepPoint>,
    pub style_switch: Vec<StyleSwitch>,
}

impl ExperimentReport {
    /// Per-system rates averaged over seeds, in system order.
    pub fn mean_results(&self) -> Vec<SystemResult> {
        let mut by: BTreeMap<System, Vec<&SystemResult>> = BTreeMap::new();
        for r in &self.results {
            by.entry(r.system).or_default().push(r);
        }
        by.into_iter()
            .map(|(system, rs)| {
                let n = rs.len() as f64;
                SystemResult {
                    system,
                    seed: 0,
                    cer_plain: rs.iter().map(|r| r.cer_plain).sum::<f64>() / n,
                    cer_rich: rs.iter().map(|r| r.cer_rich).sum::<f64>() / n,
                    n_utts: rs.iter().map(|r| r.n_utts).sum(),
                    ref_symbols: rs.iter().map(|r| r.ref_symbols).sum(),
                }
            })
            .collect()
    }

    pub fn mean(&self, system: System) -> Option<SystemResult> {
        self.mean_results().into_iter().find(|r| r.system == system)
    }

    /// Sweep points averaged over seeds, by fraction.
    pub fn mean_sweep(&self) -> Vec<SweepPoint> {
        let mut by: BTreeMap<u64, Vec<&SweepPoint>> = BTreeMap::new();
        for p in &self.sweep {
            by.entry(p.pr_fraction.to_bits()).or_default().push(p);
        }
        let mut out: Vec<SweepPoint> = by
            .into_values()
            .map(|ps| {
                let n = ps.len() as f64;
                SweepPoint {
                    seed: None,
                    pr_fraction: ps[0].pr_fraction,
                    pr_utterances: ps.iter().map(|p| p.pr_utterances).sum::<usize>() / ps.len(),
                    cer_plain: ps.iter().map(|p| p.cer_plain).sum::<f64>() / n,
                    cer_rich: ps.iter().map(|p| p.cer_rich).sum::<f64>() / n,
                }
            })
            .collect();
        out.sort_by(|a, b| a.pr_fraction.total_cmp(&b.pr_fraction));
        out
    }

    pub fn mean_style_switch(&self) -> Option<StyleSwitch> {
        if self.style_switch.is_empty() {
            return None;
        }
        let n = self.style_switch.len() as f64;
        Some(StyleSwitch {
            seed: None,
            rich_rate: self.style_switch.iter().map(|s| s.rich_rate).sum::<f64>() / n,
            common_rate: self.style_switch.iter().map(|s| s.common_rate).sum::<f64>() / n,
        })
    }

    /// Table rows with one-decimal rates, averaged over seeds.
    pub fn table(&self) -> Vec<SystemScore> {
        self.mean_results().iter().map(score_row).collect()
    }
}

fn score_row(r: &SystemResult) -> SystemScore {
    SystemScore {
        system: r.system.label().to_string(),
        train_data: r.system.train_data().to_string(),
        style_token: r.system.style_token(),
        cer_plain: round1(r.cer_plain),
        cer_rich: round1(r.cer_rich),
        n_utts: r.n_utts,
        ref_symbols: r.ref_symbols,
    }
}

/// Report text with the table, the sweep and the style-switch rates.
pub fn render_report(report: &ExperimentReport) -> String {
    let mut s = crate::eval::report_text(&report.table());
    if report.results.iter().any(|r| r.system == System::RtCr) {
        s.push_str("note: RT_CR is the Step 1 model\n");
    }
    let sweep = report.mean_sweep();
    if !sweep.is_empty() {
        s.push_str("\npr_fraction  pr_utts  cer_plain  cer_rich\n");
        for p in sweep {
            s.push_str(&format!(
                "{:>11.2} {:>8} {:>10.1} {:>9.1}\n",
                p.pr_fraction,
                p.pr_utterances,
                round1(p.cer_plain),
                round1(p.cer_rich)
            ));
        }
    }
    if let Some(sw) = report.mean_style_switch() {
        s.push_str(&format!(
            "\nphenomenon emission of RT_CRPR: [rich] {:.4}, [common] {:.4}\n",
            sw.rich_rate, sw.common_rate
        ));
    }
    s
}

fn jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    rows.into_iter()
        .map(|r| serde_json::to_string(&r).expect("row serializes") + "\n")
        .collect()
}

/// SHA-256 of every file under `dir`, keyed by relative path with `/` separators.
pub fn hash_tree(dir: &Path) -> std::io::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(std::io::Error::other)?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("under root");
        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        out.insert(key, hex::encode(Sha256::digest(fs::read(entry.path())?)));
    }
    Ok(out)
}

/// The splits of one seed's corpus.
#[derive(Debug, Clone)]
pub struct Splits {
    pub rich: Manifest,
    pub common: Manifest,
    pub dev_rich: Manifest,
    pub dev_common: Manifest,
    pub eval: Manifest,
}

/// Generates one seed's corpus, writes it under `dir` and fills `cache` with
/// delta-stacked features.
pub fn build_splits(cfg: &ExperimentConfig, seed: u64, dir: &Path, cache: &mut FeatureCache) -> Result<Splits, PipelineError> {
    let sizes = [
        cfg.rich_utterances,
        cfg.common_utterances,
        cfg.dev_utterances,
        cfg.eval_utterances,
    ];
    let synth = SynthConfig {
        num_utterances: sizes.iter().sum(),
        seed: derive_seed(seed, STREAM_CORPUS, 0),
        ..cfg.synth.clone()
    };
    let corpus = generate_corpus(&synth).map_err(at("synth"))?;
    fs::create_dir_all(dir.join("feats")).map_err(at("synth"))?;
    for (u, f) in corpus.rich.entries.iter().zip(&corpus.features) {
        write_features(dir.join(&u.feature_path), f).map_err(at("synth"))?;
    }
    let mut bounds = [0usize; 5];
    for (i, n) in sizes.iter().enumerate() {
        bounds[i + 1] = bounds[i] + n;
    }
    let cut = |m: &Manifest, i: usize| -> Result<Manifest, PipelineError> {
        Manifest::new(m.style, m.entries[bounds[i]..bounds[i + 1]].to_vec())
            .map(|m| m.with_root(dir))
            .map_err(at("synth"))
    };
    let splits = Splits {
        rich: cut(&corpus.rich, 0)?,
        common: cut(&corpus.common, 1)?,
        dev_rich: cut(&corpus.rich, 2)?,
        dev_common: cut(&corpus.common, 2)?,
        eval: cut(&corpus.rich, 3)?,
    };
    for (name, m) in [
        ("rich", &splits.rich),
        ("common", &splits.common),
        ("dev_rich", &splits.dev_rich),
        ("dev_common", &splits.dev_common),
        ("eval", &splits.eval),
    ] {
        m.save(dir.join(format!("{name}.jsonl"))).map_err(at("synth"))?;
    }
    let all = Manifest {
        style: StyleToken::Rich,
        entries: corpus.rich.entries.clone(),
        root: dir.to_path_buf(),
    };
    stack_features(&all, &corpus.features, cache);
    Ok(splits)
}

/// Vocabulary over the training targets of both styles.
pub fn build_vocab(splits: &Splits) -> Result<Vocab, PipelineError> {
    let mut ts = Vec::new();
    for u in splits.rich.entries.iter().chain(&splits.common.entries) {
        ts.push(u.target().map_err(at("vocab"))?);
    }
    Ok(Vocab::build(ts.iter()))
}

fn fraction_dir(f: f64) -> String {
    format!("step3_pr{f:.2}")
}

struct SeedRun<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    dir: PathBuf,
    splits: Splits,
    vocab: Vocab,
    model: ModelConfig,
    train: TrainConfig,
    cache: FeatureCache,
    log: &'a mut dyn FnMut(&str),
}

impl SeedRun<'_> {
    fn train(
        &mut self,
        stage: &str,
        name: &str,
        data: &[(Manifest, StyleToken)],
        dev: &[(Manifest, StyleToken)],
        warm: Option<&ModelParams<f32>>,
    ) -> Result<TrainOutcome, PipelineError> {
        let examples: usize = data.iter().map(|(m, _)| m.len()).sum();
        (self.log)(&format!("seed {}: training {name} on {examples} utterances", self.seed));
        let out = run_training(data, dev, &self.vocab, &self.model, &self.train, Some(&self.cache), warm)
            .map_err(at(stage))?;
        self.save_outcome(stage, name, &out)?;
        (self.log)(&format!(
            "seed {}: {name} best epoch {} of {}, dev loss {:.4}",
            self.seed,
            out.best_epoch,
            out.log.len(),
            out.best_dev_loss
        ));
        Ok(out)
    }

    fn save_outcome(&self, stage: &str, name: &str, out: &TrainOutcome) -> Result<(), PipelineError> {
        let d = self.dir.join(name);
        fs::create_dir_all(&d).map_err(at(stage))?;
        out.checkpoint.save(d.join("model.ckpt")).map_err(at(stage))?;
        fs::write(d.join("train_log.jsonl"), out.log_jsonl()).map_err(at(stage))
    }

    fn decode_eval(&mut self, name: &str, ckpt: &Checkpoint, style: StyleToken) -> Result<Vec<Transcript>, PipelineError> {
        let hyps = decode_manifest(
            ckpt,
            &self.vocab,
            &self.splits.eval,
            style,
            self.cfg.beam_config(self.cfg.beam),
            Some(&self.cache),
        )
        .map_err(|e| PipelineError::new("decode", format!("{name}: {}", e.message)))?;
        let text: String = hyps.iter().map(|h| h.to_string() + "\n").collect();
        fs::write(self.dir.join(name).join(format!("eval_{style}.txt")), text).map_err(at("decode"))?;
        Ok(hyps)
    }

    fn score(&self, system: System, hyps: &[Transcript]) -> Result<SystemResult, PipelineError> {
        let refs: Vec<Transcript> = self
            .splits
            .eval
            .entries
            .iter()
            .map(|u| u.target())
            .collect::<Result<_, _>>()
            .map_err(at("score"))?;
        let plain = counts_without_phenomena(&refs, hyps).map_err(at("score"))?;
        let rich = counts_with_phenomena(&refs, hyps).map_err(at("score"))?;
        Ok(SystemResult {
            system,
            seed: self.seed,
            cer_plain: plain.rate().unwrap_or(0.0),
            cer_rich: rich.rate().unwrap_or(0.0),
            n_utts: refs.len(),
            ref_symbols: rich.reference_length,
        })
    }

    fn run(mut self, report: &mut ExperimentReport) -> Result<(), PipelineError> {
        let cfg = self.cfg;
        let s = &self.splits;
        let (d_r, d_c) = (s.rich.clone(), s.common.clone());
        let dev_both = vec![(s.dev_common.clone(), StyleToken::Common), (s.dev_rich.clone(), StyleToken::Rich)];
        let dev_common = vec![(s.dev_common.clone(), StyleToken::Common)];
        let dev_rich = vec![(s.dev_rich.clone(), StyleToken::Rich)];
        let mut results = Vec::new();

        for (system, data, dev) in [
            (System::AsrC, vec![(d_c.clone(), StyleToken::Common)], &dev_common),
            (
                System::AsrCr,
                vec![(d_c.clone(), StyleToken::Common), (d_r.as_common(), StyleToken::Common)],
                &dev_common,
            ),
            (System::RtR, vec![(d_r.clone(), StyleToken::Rich)], &dev_rich),
        ] {
            if cfg.systems.contains(&system) {
                let out = self.train("train", system.label(), &data, dev, None)?;
                let hyps = self.decode_eval(system.label(), &out.checkpoint, system.eval_style())?;
                results.push(self.score(system, &hyps)?);
            }
        }

        if cfg.needs_step1() {
            let data = [(d_c.clone(), StyleToken::Common), (d_r.clone(), StyleToken::Rich)];
            let step1 = self.train("step1", "step1", &data, &dev_both, None)?;
            let step1_hyps = self.decode_eval("step1", &step1.checkpoint, StyleToken::Rich)?;
            let step1_result = self.score(System::RtCr, &step1_hyps)?;
            if cfg.systems.contains(&System::RtCr) {
                results.push(step1_result.clone());
            }
            let fractions = cfg.fractions();
            if !fractions.is_empty() {
                (self.log)(&format!("seed {}: pseudo-labeling {} utterances", self.seed, d_c.len()));
                let beam = cfg.beam_config(cfg.pseudo_label_beam.unwrap_or(cfg.beam));
                let d_pr = step2_pseudo_label(&step1.checkpoint, &self.vocab, &d_c, beam, Some(&self.cache))?;
                d_pr.save(d_pr.root.join("pseudo_rich.jsonl")).map_err(at("pseudo-label"))?;

                for f in fractions {
                    let used = d_pr.truncated(f).len();
                    let name = fraction_dir(f);
                    let (ckpt, hyps, dir) = if used == 0 {
                        (step1.checkpoint.clone(), step1_hyps.clone(), "step1".to_string())
                    } else {
                        let data = [
                            (d_c.clone(), StyleToken::Common),
                            (d_r.clone(), StyleToken::Rich),
                            (d_pr.truncated(f), StyleToken::Rich),
                        ];
                        let warm = cfg.warm_start_step3.then_some(&step1.checkpoint.params);
                        let out = self.train("step3", &name, &data, &dev_both, warm)?;
                        let hyps = self.decode_eval(&name, &out.checkpoint, StyleToken::Rich)?;
                        (out.checkpoint, hyps, name)
                    };
                    let result = self.score(System::RtCrpr, &hyps)?;
                    if cfg.sweep {
                        report.sweep.push(SweepPoint {
                            seed: Some(self.seed),
                            pr_fraction: f,
                            pr_utterances: used,
                            cer_plain: result.cer_plain,
                            cer_rich: result.cer_rich,
                        });
                    }
                    if cfg.systems.contains(&System::RtCrpr) && f == cfg.pr_fraction {
                        let common = self.decode_eval(&dir, &ckpt, StyleToken::Common)?;
                        report.style_switch.push(StyleSwitch {
                            seed: Some(self.seed),
                            rich_rate: phenomenon_emission_rate(&hyps),
                            common_rate: phenomenon_emission_rate(&common),
                        });
                        results.push(result);
                    }
                }
            }
        }
        results.sort_by_key(|r| r.system);
        let rows: Vec<SystemScore> = results.iter().map(score_row).collect();
        fs::write(self.dir.join("report.jsonl"), crate::eval::report_jsonl(&rows)).map_err(at("report"))?;
        report.results.extend(results);
        Ok(())
    }
}

/// Runs every requested system for every seed and writes the artifacts,
/// the reports and `manifest.json` (file hashes) under `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, PipelineError> {
    run_experiment_with(cfg, &mut |_| {})
}

/// [`run_experiment`] with a progress callback.
pub fn run_experiment_with(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<ExperimentReport, PipelineError> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(at("setup"))?;
    fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(cfg).expect("config serializes") + "\n",
    )
    .map_err(at("setup"))?;
    let mut report = ExperimentReport::default();
    for &seed in &cfg.seeds {
        let dir = out.join(format!("seed_{seed}"));
        log(&format!("seed {seed}: generating corpus"));
        let mut cache = FeatureCache::new();
        let splits = build_splits(cfg, seed, &dir.join("corpus"), &mut cache)?;
        let vocab = build_vocab(&splits)?;
        vocab.save(dir.join("vocab.txt")).map_err(at("vocab"))?;
        let model = cfg.preset.config(3 * cfg.synth.base_dim, vocab.size());
        let train = TrainConfig {
            seed: derive_seed(seed, STREAM_TRAIN, 0),
            ..cfg.train.clone()
        };
        SeedRun {
            cfg,
            seed,
            dir,
            splits,
            vocab,
            model,
            train,
            cache,
            log: &mut *log,
        }
        .run(&mut report)?;
    }
    fs::write(out.join("report.jsonl"), crate::eval::report_jsonl(&report.table())).map_err(at("report"))?;
    fs::write(out.join("report.txt"), render_report(&report)).map_err(at("report"))?;
    fs::write(out.join("results.jsonl"), jsonl(&report.results)).map_err(at("report"))?;
    if cfg.sweep {
        fs::write(out.join("sweep.jsonl"), jsonl(report.sweep.iter().chain(&report.mean_sweep()))).map_err(at("report"))?;
    }
    if !report.style_switch.is_empty() {
        let rows = report.style_switch.iter().cloned().chain(report.mean_style_switch());
        fs::write(out.join("style_switch.jsonl"), jsonl(rows)).map_err(at("report"))?;
    }
    let _ = fs::remove_file(out.join("manifest.json"));
    let hashes = hash_tree(out).map_err(at("report"))?;
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&hashes).expect("hashes serialize") + "\n",
    )
    .map_err(at("report"))?;
    Ok(report)
}
