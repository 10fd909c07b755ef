//! Style-conditioned maximum-likelihood training.
//!
//! Every example is encoded with the style token of the dataset it came from.
//! Batches are packed without padding; the loss is label-smoothed cross
//! entropy averaged over target positions, optimized with Adam under the
//! Noam schedule and global-norm clipping. The checkpoint with the lowest
//! development loss is kept; training stops once it has not improved for
//! `patience_epochs` epochs.

mod optim;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use optim::{adam_step, clip_gradients, global_norm, noam_lr, OptimState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::model::{teacher_forced_graph, Checkpoint, Dropout, ModelConfig, ModelError, ModelParams};
use crate::synth::{add_dynamics, normalize, FeatureMatrix, FeatureStats, Manifest, SpecAugment, SynthError};
use crate::vocab::{StyleToken, Vocab, PAD};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training examples")]
    EmptyDataset,
    #[error("every target position is padding")]
    AllPadded,
    #[error("loss became non-finite at step {0}")]
    Diverged(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} does not match the vocabulary")]
    Vocab(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] SynthError),
}

/// Optimization hyperparameters.
/// Missing fields in serialized form take their [`Default`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub warmup_steps: usize,
    pub max_grad_norm: f64,
    pub patience_epochs: usize,
    /// Hard cap on epochs regardless of early stopping.
    pub max_epochs: usize,
    /// Optional cap on optimizer steps.
    pub max_steps: Option<usize>,
    pub lr_scale: f64,
    /// Masking applied to normalized training features; `None` disables it.
    pub spec_augment: Option<SpecAugment>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            label_smoothing: 0.1,
            dropout: 0.1,
            warmup_steps: 25000,
            max_grad_norm: 5.0,
            patience_epochs: 5,
            max_epochs: 1000,
            max_steps: None,
            lr_scale: 1.0,
            spec_augment: Some(SpecAugment::mild(13)),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings: 400 warmup steps, half the Noam rate, at most 30 epochs.
    pub fn tiny() -> Self {
        Self {
            warmup_steps: 400,
            max_epochs: 30,
            lr_scale: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.warmup_steps == 0 || self.max_epochs == 0 {
            return bad("batch_size, warmup_steps and max_epochs must be positive");
        }
        if self.patience_epochs == 0 {
            return bad("patience_epochs must be at least 1");
        }
        if !(self.max_grad_norm > 0.0 && self.lr_scale > 0.0) {
            return bad("max_grad_norm and lr_scale must be positive");
        }
        Ok(())
    }
}

/// Smoothed target distribution: `1 − ε` on the target, `ε / (V − 1)` elsewhere.
/// PAD targets give an all-zero row.
fn smoothed_targets<T: Real>(targets: &[usize], vocab: usize, eps: f64, pad_id: usize) -> (Tensor<T>, usize) {
    let off = if vocab > 1 { eps / (vocab - 1) as f64 } else { 0.0 };
    let mut q = vec![T::zero(); targets.len() * vocab];
    let mut live = 0;
    for (r, &t) in targets.iter().enumerate() {
        if t == pad_id {
            continue;
        }
        live += 1;
        let row = &mut q[r * vocab..(r + 1) * vocab];
        row.iter_mut().for_each(|x| *x = T::of(off));
        row[t] = T::of(1.0 - eps);
    }
    (Tensor::new(&[targets.len(), vocab], q).expect("target shape"), live)
}

/// Mean over non-PAD positions of `−Σ_v q_v · logprob_v`.
pub fn loss_label_smoothed_ce<T: Real>(
    logprobs: &Tensor<T>,
    targets: &[usize],
    eps: f64,
    pad_id: usize,
) -> Result<f64, TrainError> {
    let v = logprobs.cols();
    let (q, live) = smoothed_targets::<T>(targets, v, eps, pad_id);
    if live == 0 {
        return Err(TrainError::AllPadded);
    }
    let total: f64 = q
        .data()
        .iter()
        .zip(logprobs.data())
        .filter(|(q, _)| **q != T::zero())
        .map(|(&q, &l)| -(q * l).as_f64())
        .sum();
    Ok(total / live as f64)
}

/// Graph form of [`loss_label_smoothed_ce`].
pub fn smoothed_ce_graph<T: Real>(
    g: &mut Graph<'_, T>,
    logprobs: Var,
    targets: &[usize],
    eps: f64,
    pad_id: usize,
) -> Result<Var, TrainError> {
    let v = *g.shape(logprobs).last().unwrap_or(&1);
    let (q, live) = smoothed_targets::<T>(targets, v, eps, pad_id);
    if live == 0 {
        return Err(TrainError::AllPadded);
    }
    let q = g.constant(q);
    let prod = g.mul(logprobs, q).map_err(ModelError::from)?;
    let s = g.sum(prod);
    Ok(g.scale(s, T::of(-1.0 / live as f64)))
}

/// Lowest achievable smoothed cross entropy: the entropy of the smoothed target.
pub fn smoothed_ce_floor(vocab: usize, eps: f64) -> f64 {
    let mut h = 0.0;
    if eps < 1.0 {
        h -= (1.0 - eps) * (1.0 - eps).ln();
    }
    if eps > 0.0 && vocab > 1 {
        h -= eps * (eps / (vocab - 1) as f64).ln();
    }
    h
}

/// One training or development example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Index of the source dataset.
    pub dataset: usize,
    pub utterance: String,
    pub feature: PathBuf,
    /// `[style] ++ tokens ++ [EOS]`.
    pub ids: Vec<usize>,
}

impl Example {
    pub fn style(&self) -> Option<StyleToken> {
        self.ids.first().and_then(|&i| StyleToken::from_id(i))
    }
}

/// Encodes every utterance with its dataset's style token.
pub fn encode_examples(datasets: &[(Manifest, StyleToken)], vocab: &Vocab) -> Result<Vec<Example>, TrainError> {
    let mut out = Vec::new();
    for (d, (m, style)) in datasets.iter().enumerate() {
        for u in &m.entries {
            let t = match style {
                StyleToken::Rich => u.target()?,
                StyleToken::Common => crate::transcript::parse(&u.common_text).map_err(SynthError::from)?,
            };
            out.push(Example {
                dataset: d,
                utterance: u.id.clone(),
                feature: m.feature_file(u),
                ids: vocab.encode(&t, *style),
            });
        }
    }
    Ok(out)
}

/// Per-epoch record, written as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub lr: f64,
    pub best_flag: bool,
}

/// Progress notifications from [`Trainer::run`].
#[derive(Debug, Clone)]
pub enum TrainEvent<'a> {
    /// A batch is about to be used for an update.
    Batch { step: usize, examples: Vec<&'a Example> },
    /// An optimizer step finished.
    Step { step: usize, loss: f64, lr: f64, grad_norm: f64 },
    Epoch(&'a EpochLog),
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest development loss.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|e| serde_json::to_string(e).expect("log serializes") + "\n")
            .collect()
    }
}

/// Features after delta stacking, keyed by file.
pub type FeatureCache = BTreeMap<PathBuf, FeatureMatrix>;

/// Loads and delta-stacks every feature file referenced by the manifests.
pub fn load_stacked(manifests: &[&Manifest], cache: &mut FeatureCache) -> Result<(), TrainError> {
    for m in manifests {
        for u in &m.entries {
            let p = m.feature_file(u);
            if !cache.contains_key(&p) {
                let f = crate::synth::read_features(&p)?;
                cache.insert(p, add_dynamics(&f));
            }
        }
    }
    Ok(())
}

/// Delta-stacks in-memory features given in manifest order.
pub fn stack_features(manifest: &Manifest, features: &[FeatureMatrix], cache: &mut FeatureCache) {
    for (u, f) in manifest.entries.iter().zip(features) {
        cache.entry(manifest.feature_file(u)).or_insert_with(|| add_dynamics(f));
    }
}

/// Training driver with optional warm start, shared feature cache and observer.
pub struct Trainer<'a> {
    datasets: &'a [(Manifest, StyleToken)],
    dev: &'a [(Manifest, StyleToken)],
    vocab: &'a Vocab,
    model: ModelConfig,
    cfg: TrainConfig,
    warm_start: Option<&'a ModelParams<f32>>,
    cache: Option<&'a FeatureCache>,
    observer: Option<&'a mut dyn FnMut(TrainEvent<'_>)>,
}

/// Trains on the union of `datasets` and returns the best checkpoint by development loss.
pub fn train(
    datasets: &[(Manifest, StyleToken)],
    dev: &[(Manifest, StyleToken)],
    vocab: &Vocab,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    Trainer::new(datasets, dev, vocab, model, cfg).run()
}

impl<'a> Trainer<'a> {
    pub fn new(
        datasets: &'a [(Manifest, StyleToken)],
        dev: &'a [(Manifest, StyleToken)],
        vocab: &'a Vocab,
        model: &ModelConfig,
        cfg: &TrainConfig,
    ) -> Self {
        Self {
            datasets,
            dev,
            vocab,
            model: model.clone(),
            cfg: cfg.clone(),
            warm_start: None,
            cache: None,
            observer: None,
        }
    }

    /// Starts from existing parameters instead of a fresh initialization.
    pub fn warm_start(mut self, params: &'a ModelParams<f32>) -> Self {
        self.warm_start = Some(params);
        self
    }

    /// Uses already delta-stacked features instead of reading files.
    pub fn features(mut self, cache: &'a FeatureCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn observe(mut self, f: &'a mut dyn FnMut(TrainEvent<'_>)) -> Self {
        self.observer = Some(f);
        self
    }

    pub fn run(mut self) -> Result<TrainOutcome, TrainError> {
        let cfg = self.cfg.clone();
        cfg.validate()?;
        let mut model_cfg = self.model.clone();
        model_cfg.dropout = cfg.dropout;
        model_cfg.validate()?;
        if model_cfg.vocab_size != self.vocab.size() {
            return Err(TrainError::Vocab(format!("model vocab_size {}", model_cfg.vocab_size)));
        }
        let train_ex = encode_examples(self.datasets, self.vocab)?;
        if train_ex.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let dev_ex = encode_examples(self.dev, self.vocab)?;

        let mut owned = FeatureCache::new();
        let cache: &FeatureCache = match self.cache {
            Some(c) => c,
            None => {
                let all: Vec<&Manifest> = self.datasets.iter().chain(self.dev).map(|(m, _)| m).collect();
                load_stacked(&all, &mut owned)?;
                &owned
            }
        };
        let lookup = |p: &PathBuf| {
            cache
                .get(p)
                .ok_or_else(|| SynthError::Format(format!("features for {} not loaded", p.display())))
        };
        let mut unique: Vec<&PathBuf> = train_ex.iter().map(|e| &e.feature).collect();
        unique.sort();
        unique.dedup();
        let train_feats = unique.iter().map(|p| lookup(p)).collect::<Result<Vec<_>, _>>()?;
        let stats = FeatureStats::compute(train_feats.iter().copied())
            .ok_or_else(|| TrainError::Config("inconsistent feature widths".into()))?;
        if stats.dim() != model_cfg.feat_dim {
            return Err(ModelError::ShapeMismatch {
                what: "feature width",
                expected: model_cfg.feat_dim,
                got: stats.dim(),
            }
            .into());
        }
        let mut normed: BTreeMap<&PathBuf, FeatureMatrix> = BTreeMap::new();
        for e in train_ex.iter().chain(&dev_ex) {
            if !normed.contains_key(&e.feature) {
                normed.insert(&e.feature, normalize(lookup(&e.feature)?, &stats));
            }
        }

        let mut params = match self.warm_start {
            Some(p) => {
                let mut p = p.clone();
                p.set_dropout(model_cfg.dropout);
                if p.config() != &model_cfg {
                    return Err(TrainError::Config("warm-start parameters have a different architecture".into()));
                }
                p
            }
            None => ModelParams::<f32>::init(&model_cfg, cfg.seed),
        };
        let mut opt = OptimState::new(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(crate::synth::derive_seed(cfg.seed, 0x7472_6169_6e, 0));
        let mut order: Vec<usize> = (0..train_ex.len()).collect();

        let mut log = Vec::new();
        let mut best = (f64::INFINITY, 0usize, params.clone());
        let mut step = 0usize;
        let mut stale = 0usize;
        let mut lr = 0.0;
        'epochs: for epoch in 1..=cfg.max_epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                if cfg.max_steps.is_some_and(|m| step >= m) {
                    break;
                }
                step += 1;
                let batch: Vec<&Example> = chunk.iter().map(|&i| &train_ex[i]).collect();
                if let Some(obs) = self.observer.as_mut() {
                    obs(TrainEvent::Batch {
                        step,
                        examples: batch.clone(),
                    });
                }
                let feats: Vec<FeatureMatrix> = batch
                    .iter()
                    .map(|e| {
                        let f = &normed[&e.feature];
                        match &cfg.spec_augment {
                            Some(sa) => sa.apply(f, &mut rng),
                            None => f.clone(),
                        }
                    })
                    .collect();
                let items: Vec<(&FeatureMatrix, &[usize])> =
                    feats.iter().zip(&batch).map(|(f, e)| (f, e.ids.as_slice())).collect();
                let (loss, mut grads) = loss_and_grads(&params, &items, &cfg, Some(&mut rng))?;
                if !loss.is_finite() {
                    return Err(TrainError::Diverged(step));
                }
                let grad_norm = clip_gradients(&mut grads, cfg.max_grad_norm);
                lr = noam_lr(step, model_cfg.model_dim, cfg.warmup_steps, cfg.lr_scale);
                adam_step(&mut params, &grads, &mut opt, lr);
                if !params.is_finite() {
                    return Err(TrainError::Diverged(step));
                }
                if let Some(obs) = self.observer.as_mut() {
                    obs(TrainEvent::Step {
                        step,
                        loss,
                        lr,
                        grad_norm,
                    });
                }
                loss_sum += loss;
                batches += 1;
            }
            if batches == 0 {
                break;
            }
            let train_loss = loss_sum / batches as f64;
            let dev_loss = if dev_ex.is_empty() {
                train_loss
            } else {
                evaluate_loss(&params, &dev_ex, &normed, &cfg)?
            };
            let improved = dev_loss < best.0;
            if improved {
                best = (dev_loss, epoch, params.clone());
                stale = 0;
            } else {
                stale += 1;
            }
            let entry = EpochLog {
                epoch,
                train_loss,
                dev_loss,
                lr,
                best_flag: improved,
            };
            if let Some(obs) = self.observer.as_mut() {
                obs(TrainEvent::Epoch(&entry));
            }
            log.push(entry);
            if stale >= cfg.patience_epochs || cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
        }
        let (best_dev_loss, best_epoch, params) = best;
        Ok(TrainOutcome {
            checkpoint: Checkpoint {
                params,
                norm: stats,
                vocab_fingerprint: self.vocab.fingerprint(),
            },
            log,
            best_epoch,
            best_dev_loss,
            steps: step,
        })
    }
}

/// Batch loss and per-tensor gradients. Dropout is active when `rng` is given.
pub fn loss_and_grads(
    params: &ModelParams<f32>,
    items: &[(&FeatureMatrix, &[usize])],
    cfg: &TrainConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Vec<f32>>), TrainError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let dropout = rng.map(|r| Dropout {
        rate: cfg.dropout,
        rng: r,
    });
    let (logp, _) = teacher_forced_graph(&mut g, params, &bound, items, dropout)?;
    let targets: Vec<usize> = items.iter().flat_map(|(_, ids)| ids[1..].iter().copied()).collect();
    let loss = smoothed_ce_graph(&mut g, logp, &targets, cfg.label_smoothing, PAD)?;
    let value = g.value(loss)[0] as f64;
    g.backward(loss).map_err(ModelError::from)?;
    let grads = bound
        .vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| match g.grad_slice(v) {
            Some(s) => s.to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect();
    Ok((value, grads))
}

/// Token-weighted smoothed loss over `examples` with dropout and augmentation off.
pub fn evaluate_loss(
    params: &ModelParams<f32>,
    examples: &[Example],
    feats: &BTreeMap<&PathBuf, FeatureMatrix>,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in examples.chunks(cfg.batch_size) {
        let items: Vec<(&FeatureMatrix, &[usize])> =
            chunk.iter().map(|e| (&feats[&e.feature], e.ids.as_slice())).collect();
        let out = crate::model::forward_teacher_forced_batch(params, &items)?;
        for (lp, e) in out.iter().zip(chunk) {
            let n = e.ids.len() - 1;
            total += loss_label_smoothed_ce(lp, &e.ids[1..], cfg.label_smoothing, PAD)? * n as f64;
            count += n;
        }
    }
    if count == 0 {
        return Err(TrainError::AllPadded);
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests;
