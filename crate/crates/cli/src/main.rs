use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Result};
use clap::{Args, Parser, Subcommand};
use rtasr::decode::BeamConfig;
use rtasr::eval::{report_jsonl, report_text, SystemScore};
use rtasr::model::{Checkpoint, Preset};
use rtasr::pipeline::{decode_manifest, run_experiment_with, step2_pseudo_label, ExperimentConfig, System};
use rtasr::synth::{generate_corpus, Manifest};
use rtasr::training::{TrainEvent, Trainer};
use rtasr::transcript::{parse, Transcript};
use rtasr::vocab::{StyleToken, Vocab};

#[derive(Parser)]
#[command(name = "rtasr", version, about = "Rich-transcription ASR with style tokens and pseudo-labeling")]
struct Cli {
    /// Seed for corpus generation, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    preset: Option<Preset>,
    /// JSON experiment config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (rich.jsonl, common.jsonl, feats/).
    Synth {
        #[arg(long)]
        utterances: Option<usize>,
        #[arg(long)]
        grapheme_count: Option<usize>,
        #[arg(long)]
        noise_sigma: Option<f64>,
    },
    /// Train a model on one or more manifests.
    Train(TrainArgs),
    /// Relabel a common-style manifest by decoding it with the rich style.
    PseudoLabel {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        beam: BeamArgs,
    },
    /// Decode a manifest into `hyps.txt` (`id<TAB>transcript` per line).
    Decode {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "rich")]
        style: StyleToken,
        #[command(flatten)]
        beam: BeamArgs,
    },
    /// Score hypotheses against a manifest's references.
    Score {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long, default_value = "system")]
        system: String,
        #[arg(long, default_value = "-")]
        train_data: String,
        #[arg(long)]
        style_token: bool,
    },
    /// Run the full experiment: baselines, the three steps and optionally the sweep.
    Experiment {
        /// Comma-separated system names.
        #[arg(long, value_delimiter = ',')]
        systems: Option<Vec<System>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        pr_fraction: Option<f64>,
        #[arg(long)]
        rich_utterances: Option<usize>,
        #[arg(long)]
        common_utterances: Option<usize>,
        #[arg(long)]
        eval_utterances: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        warm_start_step3: bool,
        #[command(flatten)]
        beam: BeamArgs,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Args)]
struct BeamArgs {
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest, optionally suffixed `:rich` or `:common` to force a style.
    #[arg(long, required = true)]
    data: Vec<String>,
    #[arg(long)]
    dev: Vec<String>,
    /// Existing vocabulary; built from the training targets otherwise.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    warm_start: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    no_augment: bool,
}

trait Stage<T> {
    fn stage(self, name: &str) -> Result<T>;
}

impl<T, E: Display> Stage<T> for std::result::Result<T, E> {
    fn stage(self, name: &str) -> Result<T> {
        self.map_err(|e| anyhow!("[{name}] {e}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).stage("config")?;
            serde_json::from_str::<ExperimentConfig>(&text).stage("config")?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(p) = cli.preset {
        cfg.preset = p;
    }
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).stage("setup")?;
    match cli.command {
        Command::Synth {
            utterances,
            grapheme_count,
            noise_sigma,
        } => {
            let mut s = cfg.synth.clone();
            if let Some(n) = utterances {
                s.num_utterances = n;
            }
            if let Some(g) = grapheme_count {
                s.grapheme_count = g;
            }
            if let Some(n) = noise_sigma {
                s.noise_sigma = n;
            }
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let corpus = generate_corpus(&s).stage("synth")?;
            corpus.write(&out).stage("synth")?;
            println!("wrote {} utterances to {}", corpus.rich.len(), out.display());
        }
        Command::Train(args) => train(&cfg, cli.seed, &args)?,
        Command::PseudoLabel { model, data, beam } => {
            let (ckpt, vocab) = load_model(&model, "pseudo-label")?;
            let d_c = Manifest::load(&data, StyleToken::Common).stage("pseudo-label")?;
            let d_pr = step2_pseudo_label(&ckpt, &vocab, &d_c, beam_config(&cfg, &beam), None)?;
            let path = out.join("pseudo_rich.jsonl");
            rebase(d_pr, &out).stage("pseudo-label")?.save(&path).stage("pseudo-label")?;
            println!("wrote {} pseudo-labeled utterances to {}", d_c.len(), path.display());
        }
        Command::Decode {
            model,
            data,
            style,
            beam,
        } => {
            let (ckpt, vocab) = load_model(&model, "decode")?;
            let m = Manifest::load(&data, style).stage("decode")?;
            let hyps = decode_manifest(&ckpt, &vocab, &m, style, beam_config(&cfg, &beam), None)?;
            let text: String = m.entries.iter().zip(&hyps).map(|(u, h)| format!("{}\t{h}\n", u.id)).collect();
            let path = out.join("hyps.txt");
            fs::write(&path, text).stage("decode")?;
            println!("wrote {} hypotheses to {}", hyps.len(), path.display());
        }
        Command::Score {
            refs,
            hyps,
            system,
            train_data,
            style_token,
        } => {
            let m = Manifest::load(&refs, StyleToken::Rich).stage("score")?;
            let by_id = read_hyps(&hyps)?;
            let mut r = Vec::new();
            let mut h = Vec::new();
            for u in &m.entries {
                r.push(u.target().stage("score")?);
                h.push(
                    by_id
                        .get(&u.id)
                        .cloned()
                        .ok_or_else(|| anyhow!("[score] no hypothesis for {}", u.id))?,
                );
            }
            let row = SystemScore::compute(system, train_data, style_token, &r, &h).stage("score")?;
            fs::write(out.join("report.jsonl"), report_jsonl(std::slice::from_ref(&row))).stage("score")?;
            print!("{}", report_text(&[row]));
        }
        Command::Experiment {
            systems,
            seeds,
            sweep,
            pr_fraction,
            rich_utterances,
            common_utterances,
            eval_utterances,
            epochs,
            warm_start_step3,
            beam,
        } => {
            if let Some(s) = systems {
                cfg.systems = s.into_iter().collect();
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
            } else if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            cfg.sweep |= sweep;
            cfg.warm_start_step3 |= warm_start_step3;
            if let Some(f) = pr_fraction {
                cfg.pr_fraction = f;
            }
            if let Some(n) = rich_utterances {
                cfg.rich_utterances = n;
            }
            if let Some(n) = common_utterances {
                cfg.common_utterances = n;
            }
            if let Some(n) = eval_utterances {
                cfg.eval_utterances = n;
            }
            if let Some(e) = epochs {
                cfg.train.max_epochs = e;
            }
            if let Some(b) = beam.beam {
                cfg.beam = b;
            }
            if beam.max_len.is_some() {
                cfg.max_len = beam.max_len;
            }
            let t0 = Instant::now();
            let report = run_experiment_with(&cfg, &mut |m| {
                eprintln!("[{:8.1}s] {m}", t0.elapsed().as_secs_f64())
            })?;
            print!("{}", rtasr::pipeline::render_report(&report));
        }
    }
    Ok(())
}

fn beam_config(cfg: &ExperimentConfig, b: &BeamArgs) -> BeamConfig {
    BeamConfig {
        beam: b.beam.unwrap_or(cfg.beam),
        max_len: b.max_len.or(cfg.max_len),
        length_norm: false,
    }
}

fn load_model(args: &ModelArgs, stage: &str) -> Result<(Checkpoint, Vocab)> {
    let vocab = Vocab::load(&args.vocab).stage(stage)?;
    let ckpt = Checkpoint::load(&args.model, Some(&vocab.fingerprint())).stage(stage)?;
    Ok((ckpt, vocab))
}

/// Rewrites relative feature paths so they resolve from `dir`.
fn rebase(mut m: Manifest, dir: &Path) -> std::io::Result<Manifest> {
    let same = fs::canonicalize(&m.root).ok() == fs::canonicalize(dir).ok();
    if !same {
        for i in 0..m.entries.len() {
            let p = m.feature_file(&m.entries[i]);
            let abs = fs::canonicalize(&p)?;
            m.entries[i].feature_path = abs.to_string_lossy().into_owned();
        }
        m.root = dir.to_path_buf();
    }
    Ok(m)
}

fn read_hyps(path: &Path) -> Result<BTreeMap<String, Transcript>> {
    let text = fs::read_to_string(path).stage("score")?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, t) = line.split_once('\t').unwrap_or((line, ""));
        let t = parse(t).map_err(|e| anyhow!("[score] {}:{}: {e}", path.display(), n + 1))?;
        out.insert(id.to_string(), t);
    }
    Ok(out)
}

/// `path`, `path:rich` or `path:common`.
fn dataset(spec: &str) -> Result<(Manifest, StyleToken)> {
    let (path, forced) = match spec.rsplit_once(':') {
        Some((p, s)) if s == "rich" || s == "common" => (p, Some(s.parse::<StyleToken>().stage("train")?)),
        _ => (spec, None),
    };
    let m = Manifest::load(path, forced.unwrap_or(StyleToken::Rich)).stage("train")?;
    match (m.style, forced) {
        (_, None) => {
            let s = m.style;
            Ok((m, s))
        }
        (StyleToken::Rich, Some(StyleToken::Common)) => Ok((m.as_common(), StyleToken::Common)),
        (a, Some(b)) if a == b => Ok((m, b)),
        (a, Some(b)) => bail!("[train] {path} is a {a} manifest and cannot be trained as {b}"),
    }
}

fn train(cfg: &ExperimentConfig, seed: Option<u64>, args: &TrainArgs) -> Result<()> {
    let data = args.data.iter().map(|s| dataset(s)).collect::<Result<Vec<_>>>()?;
    let dev = args.dev.iter().map(|s| dataset(s)).collect::<Result<Vec<_>>>()?;
    let vocab = match &args.vocab {
        Some(p) => Vocab::load(p).stage("train")?,
        None => {
            let mut ts = Vec::new();
            for (m, _) in &data {
                for u in &m.entries {
                    ts.push(u.target().stage("train")?);
                }
            }
            Vocab::build(ts.iter())
        }
    };
    let mut t = cfg.train.clone();
    if let Some(s) = seed {
        t.seed = s;
    }
    if let Some(e) = args.epochs {
        t.max_epochs = e;
    }
    t.max_steps = args.max_steps.or(t.max_steps);
    if let Some(b) = args.batch_size {
        t.batch_size = b;
    }
    if let Some(w) = args.warmup_steps {
        t.warmup_steps = w;
    }
    if args.no_augment {
        t.spec_augment = None;
    }
    let feat_dim = match data.iter().flat_map(|(m, _)| m.entries.first().map(|u| m.feature_file(u))).next() {
        Some(p) => rtasr::synth::read_features(p).stage("train")?.dim() * 3,
        None => bail!("[train] no training utterances"),
    };
    let model = cfg.preset.config(feat_dim, vocab.size());
    let warm = match &args.warm_start {
        Some(p) => Some(Checkpoint::load(p, Some(&vocab.fingerprint())).stage("train")?.params),
        None => None,
    };
    let mut on_epoch = |e: TrainEvent<'_>| {
        if let TrainEvent::Epoch(l) = e {
            eprintln!(
                "epoch {:3}  train {:.4}  dev {:.4}  lr {:.2e}{}",
                l.epoch,
                l.train_loss,
                l.dev_loss,
                l.lr,
                if l.best_flag { "  *" } else { "" }
            );
        }
    };
    let mut trainer = Trainer::new(&data, &dev, &vocab, &model, &t).observe(&mut on_epoch);
    if let Some(p) = &warm {
        trainer = trainer.warm_start(p);
    }
    let outcome = trainer.run().stage("train")?;
    let out = &cfg.output_dir;
    outcome.checkpoint.save(out.join("model.ckpt")).stage("train")?;
    vocab.save(out.join("vocab.txt")).stage("train")?;
    fs::write(out.join("train_log.jsonl"), outcome.log_jsonl()).stage("train")?;
    println!(
        "best epoch {} (dev loss {:.4}) after {} steps; wrote {}",
        outcome.best_epoch,
        outcome.best_dev_loss,
        outcome.steps,
        out.join("model.ckpt").display()
    );
    Ok(())
}
