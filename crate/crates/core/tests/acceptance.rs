mod common;

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtasr::autodiff::{grad_check, grad_check_at, AutogradError, Graph, Patches, Tensor, Var};
use rtasr::decode::{beam_search_with, DecodeError, Hypothesis, StepScorer};
use rtasr::eval::edit_distance;
use rtasr::model::{
    decode_step, encode_audio, forward_teacher_forced_batch, teacher_forced_graph, Bound, ModelConfig, ModelError,
    ModelParams,
};
use rtasr::pipeline::{hash_tree, run_experiment, run_experiment_with, ExperimentConfig, ExperimentReport, System};
use rtasr::synth::{derive_seed, FeatureMatrix, SynthConfig};
use rtasr::training::{clip_gradients, global_norm, loss_label_smoothed_ce, noam_lr, TrainConfig};
use rtasr::vocab::{EOS, STYLE_COMMON, STYLE_RICH};

const EXPERIMENT_EPOCHS: usize = 16;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(n: usize, name: &str, o: &Outcome) {
    let mark = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {n} [{mark}] {name}: {}", o.detail);
}

fn grammar() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = Vec::new();
    let mut markers = 0;
    for _ in 0..10_000 {
        let len = rng.random_range(0..48);
        let ops: Vec<(u8, u8)> = (0..len).map(|_| (rng.random(), rng.random())).collect();
        let tokens = common::build(&ops);
        markers += tokens.iter().filter(|t| t.is_phenomenon()).count();
        if let Err(e) = common::check_well_formed(&tokens) {
            failures.push(e);
        }
        let len = rng.random_range(0..32);
        let ops: Vec<(u8, u8)> = (0..len).map(|_| (rng.random(), rng.random())).collect();
        if let Err(e) = common::check_repair(&common::raw(&ops)) {
            failures.push(e);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let first = failures.first().cloned().unwrap_or_default();
    outcome(
        failures.is_empty() && secs < 5.0,
        format!(
            "10000 transcripts ({markers} markers), {} failures, {secs:.2} s (limit 5 s) {first}",
            failures.len()
        ),
    )
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn project(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Result<Var, AutogradError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(&mut rng, g.shape(out));
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

type Check = Box<dyn Fn(&mut Graph<'_, f64>, Var) -> Result<Var, AutogradError>>;

fn primitive_checks() -> Vec<(&'static str, Tensor<f64>, Check)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut out: Vec<(&'static str, Tensor<f64>, Check)> = Vec::new();
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = randn(&mut rng, if ta { &[4, 3] } else { &[3, 4] });
        let b = randn(&mut rng, if tb { &[5, 4] } else { &[4, 5] });
        let bc = b.clone();
        out.push((
            "matmul lhs",
            a.clone(),
            Box::new(move |g, a| {
                let b = g.constant(bc.clone());
                let c = g.matmul_t(a, b, ta, tb)?;
                project(g, c, 1)
            }),
        ));
        out.push((
            "matmul rhs",
            b,
            Box::new(move |g, b| {
                let a = g.constant(a.clone());
                let c = g.matmul_t(a, b, ta, tb)?;
                project(g, c, 1)
            }),
        ));
    }
    let other = randn(&mut rng, &[3, 4]);
    out.push((
        "add broadcast",
        randn(&mut rng, &[4]),
        Box::new(move |g, b| {
            let x = g.constant(other.clone());
            let y = g.add(x, b)?;
            project(g, y, 2)
        }),
    ));
    let other = randn(&mut rng, &[3, 4]);
    out.push((
        "mul",
        randn(&mut rng, &[3, 4]),
        Box::new(move |g, x| {
            let o = g.constant(other.clone());
            let y = g.mul(x, o)?;
            let y = g.mul(y, x)?;
            project(g, y, 3)
        }),
    ));
    out.push((
        "scale relu",
        randn(&mut rng, &[3, 4]),
        Box::new(|g, x| {
            let y = g.scale(x, -1.7);
            let y = g.relu(y);
            project(g, y, 4)
        }),
    ));
    out.push(("softmax", randn(&mut rng, &[3, 5]), Box::new(|g, x| {
        let y = g.softmax(x);
        project(g, y, 5)
    })));
    out.push(("log_softmax", randn(&mut rng, &[3, 5]), Box::new(|g, x| {
        let y = g.log_softmax(x);
        project(g, y, 6)
    })));
    let mask: Vec<bool> = (0..16).map(|i| i % 4 > i / 4).collect();
    out.push((
        "masked_fill",
        randn(&mut rng, &[4, 4]),
        Box::new(move |g, x| {
            let y = g.masked_fill(x, &mask)?;
            let y = g.softmax(y);
            project(g, y, 7)
        }),
    ));
    let (xs, gain, bias) = (randn(&mut rng, &[3, 6]), randn(&mut rng, &[6]), randn(&mut rng, &[6]));
    for (which, name) in [(0, "layer_norm x"), (1, "layer_norm gain"), (2, "layer_norm bias")] {
        let parts = [xs.clone(), gain.clone(), bias.clone()];
        out.push((
            name,
            parts[which].clone(),
            Box::new(move |g, v| {
                let mut vars: Vec<Var> = parts.iter().map(|p| g.constant(p.clone())).collect();
                vars[which] = v;
                let y = g.layer_norm(vars[0], vars[1], vars[2])?;
                project(g, y, 8)
            }),
        ));
    }
    out.push((
        "slice concat reshape transpose",
        randn(&mut rng, &[2, 3, 4]),
        Box::new(|g, x| {
            let a = g.slice(x, 2, 1, 2)?;
            let b = g.slice(x, 2, 0, 1)?;
            let c = g.concat(&[a, b, a], 2)?;
            let d = g.slice(c, 1, 1, 2)?;
            let e = g.reshape(d, &[4, 5])?;
            let f = g.transpose(e)?;
            let h = g.concat(&[f, f], 0)?;
            project(g, h, 9)
        }),
    ));
    out.push((
        "embedding dropout",
        randn(&mut rng, &[5, 3]),
        Box::new(|g, t| {
            let e = g.embedding(t, &[4, 0, 4, 2])?;
            let mut r = ChaCha8Rng::seed_from_u64(77);
            let d = g.dropout(e, 0.3, &mut r, true);
            project(g, d, 10)
        }),
    ));
    let w = randn(&mut rng, &[18, 3]);
    out.push((
        "unfold",
        randn(&mut rng, &[5, 4, 2]),
        Box::new(move |g, x| {
            let p = g.unfold(
                x,
                Patches {
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                },
            )?;
            let w = g.constant(w.clone());
            let y = g.matmul(p, w)?;
            project(g, y, 11)
        }),
    ));
    out.push(("sum mean", randn(&mut rng, &[3, 4]), Box::new(|g, x| {
        let y = g.mul(x, x)?;
        let m = g.mean(y);
        let s = g.sum(x);
        let z = g.mul(m, s)?;
        Ok(g.sum(z))
    })));
    out
}

fn micro_config() -> ModelConfig {
    ModelConfig {
        feat_dim: 6,
        num_encoder_blocks: 2,
        num_decoder_blocks: 2,
        model_dim: 8,
        ffn_dim: 12,
        num_heads: 2,
        conv_channels: (2, 4),
        vocab_size: 9,
        dropout: 0.0,
        max_positions: 64,
    }
}

fn features(frames: usize, dim: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMatrix::new(frames, dim, (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn composite_error() -> f64 {
    let cfg = micro_config();
    let params = ModelParams::<f64>::init(&cfg, 3);
    let (f1, f2) = (features(9, 6, 4), features(5, 6, 5));
    let a = [STYLE_RICH, 5, 6, EOS];
    let b = [STYLE_COMMON, 7, EOS];
    let batch = [(&f1, &a[..]), (&f2, &b[..])];
    let targets: Vec<usize> = a[1..].iter().chain(&b[1..]).copied().collect();
    let mut onehot = Tensor::<f64>::zeros(&[targets.len(), cfg.vocab_size]);
    for (r, &t) in targets.iter().enumerate() {
        onehot.data_mut()[r * cfg.vocab_size + t] = 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for idx in 0..params.len() {
        let x = params.tensors()[idx].clone();
        let picks: Vec<usize> = (0..4.min(x.numel())).map(|_| rng.random_range(0..x.numel())).collect();
        let err = grad_check_at(
            |g, xv| {
                let mut bound = Bound {
                    vars: params.tensors().iter().map(|t| g.constant(t.clone())).collect(),
                };
                bound.substitute(idx, xv);
                let (logp, _) = teacher_forced_graph(g, &params, &bound, &batch, None).map_err(|e| match e {
                    ModelError::Autograd(a) => a,
                    other => panic!("{other}"),
                })?;
                let m = g.constant(onehot.clone());
                let picked = g.mul(logp, m)?;
                let s = g.sum(picked);
                Ok(g.scale(s, -1.0 / targets.len() as f64))
            },
            &x,
            1e-5,
            &picks,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

fn autodiff() -> Outcome {
    let t0 = Instant::now();
    let mut prim: f64 = 0.0;
    let mut worst_name = "";
    let checks = primitive_checks();
    for (name, x, f) in &checks {
        let e = grad_check(f, x, 1e-5).unwrap();
        if e > prim {
            prim = e;
            worst_name = name;
        }
    }
    let comp = composite_error();
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        prim < 1e-4 && comp < 1e-3 && secs < 60.0,
        format!(
            "{} primitive checks max rel err {prim:.2e} ({worst_name}, limit 1e-4), composite {comp:.2e} (limit 1e-3), {secs:.1} s",
            checks.len()
        ),
    )
}

type Split = (usize, usize, usize);

fn cer_recursion(r: &[u8], h: &[u8]) -> Split {
    fn go(r: &[u8], h: &[u8], i: usize, j: usize, memo: &mut HashMap<(usize, usize), Split>) -> Split {
        if i == 0 || j == 0 {
            return (0, i, j);
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let (s, d, n) = go(r, h, i - 1, j - 1, memo);
        let mut best = (s + usize::from(r[i - 1] != h[j - 1]), d, n);
        let (s, d, n) = go(r, h, i - 1, j, memo);
        let del = (s, d + 1, n);
        let (s, d, n) = go(r, h, i, j - 1, memo);
        let ins = (s, d, n + 1);
        for c in [del, ins] {
            if c.0 + c.1 + c.2 < best.0 + best.1 + best.2 {
                best = c;
            }
        }
        memo.insert((i, j), best);
        best
    }
    go(r, h, r.len(), h.len(), &mut HashMap::new())
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Fixed pseudo-random logits per prefix.
struct FixedLogits {
    seed: u64,
}

impl FixedLogits {
    fn dist(&self, ids: &[usize]) -> Vec<f64> {
        let key = ids.iter().fold(self.seed, |h, &i| derive_seed(h, i as u64, ids.len() as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        log_softmax(&(0..3).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>())
    }
}

impl StepScorer for FixedLogits {
    type State = Vec<usize>;

    fn vocab_size(&self) -> usize {
        3
    }

    fn start(&self, style_id: usize) -> Result<(Vec<usize>, Vec<f64>), DecodeError> {
        Ok((vec![style_id], self.dist(&[style_id])))
    }

    fn advance(&self, states: &mut [Vec<usize>], tokens: &[usize]) -> Result<Vec<Vec<f64>>, DecodeError> {
        Ok(states
            .iter_mut()
            .zip(tokens)
            .map(|(s, &t)| {
                s.push(t);
                self.dist(s)
            })
            .collect())
    }
}

fn enumerate(m: &FixedLogits, style: usize, max_len: usize) -> Vec<Hypothesis> {
    let mut out = Vec::new();
    let mut stack = vec![Hypothesis {
        ids: vec![style],
        score: 0.0,
        finished: false,
    }];
    while let Some(h) = stack.pop() {
        if h.finished || h.ids.len() - 1 == max_len {
            out.push(h);
            continue;
        }
        for (v, l) in m.dist(&h.ids).iter().enumerate() {
            let mut ids = h.ids.clone();
            ids.push(v);
            stack.push(Hypothesis {
                ids,
                score: h.score + l,
                finished: v == EOS,
            });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.ids.cmp(&b.ids)));
    out
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cer_bad = 0;
    for _ in 0..1000 {
        let r: Vec<u8> = (0..rng.random_range(0..=12)).map(|_| rng.random_range(0..3)).collect();
        let h: Vec<u8> = (0..rng.random_range(0..=12)).map(|_| rng.random_range(0..3)).collect();
        let c = edit_distance(&r, &h);
        if (c.substitutions, c.deletions, c.insertions) != cer_recursion(&r, &h) || c.reference_length != r.len() {
            cer_bad += 1;
        }
    }

    let mut beam_bad = 0;
    let mut compared = 0;
    for seed in 0..200 {
        let m = FixedLogits { seed };
        for max_len in 1..=3 {
            let all = enumerate(&m, STYLE_RICH, max_len);
            let beam = beam_search_with(&m, STYLE_RICH, all.len(), max_len, false).unwrap();
            compared += 1;
            let same = beam.len() == all.len()
                && beam.iter().zip(&all).all(|(b, a)| b.ids == a.ids && b.score == a.score);
            if !same {
                beam_bad += 1;
            }
        }
    }

    let cfg = micro_config();
    let p = ModelParams::<f32>::init(&cfg, 7);
    let (f1, f2) = (features(13, 6, 8), features(7, 6, 9));
    let a = [STYLE_RICH, 5, 8, 6, 6, EOS];
    let b = [STYLE_COMMON, 7, EOS];
    let rows = forward_teacher_forced_batch(&p, &[(&f1, &a[..]), (&f2, &b[..])]).unwrap();
    let mut tf_err: f64 = 0.0;
    for (out, (f, ids)) in rows.iter().zip([(&f1, &a[..]), (&f2, &b[..])]) {
        let enc = encode_audio(&p, f).unwrap();
        for t in 0..ids.len() - 1 {
            let inc = decode_step(&p, &enc, &ids[..=t]).unwrap();
            for (x, y) in out.row(t).iter().zip(&inc) {
                tf_err = tf_err.max((*x as f64 - *y as f64).abs());
            }
        }
    }
    outcome(
        cer_bad == 0 && beam_bad == 0 && tf_err < 1e-5,
        format!(
            "CER DP vs recursion {cer_bad}/1000 mismatches; beam vs enumeration {beam_bad}/{compared} mismatches; teacher-forced vs incremental max diff {tf_err:.2e} (limit 1e-5)"
        ),
    )
}

fn formulas() -> Outcome {
    let lr = noam_lr(25000, 256, 25000, 1.0);
    let lp = Tensor::new(&[1, 3], vec![0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()]).unwrap();
    let ce = loss_label_smoothed_ce(&lp, &[0], 0.1, usize::MAX).unwrap();
    let mut g = vec![vec![6.0f32, 0.0, -2.5], vec![8.0, 1.25]];
    clip_gradients(&mut g, 5.0);
    let clipped = global_norm(&g);
    let ok = (lr - 3.953e-4).abs() <= 1e-7 && (ce - 0.5166).abs() <= 1e-4 && (clipped - 5.0).abs() <= 1e-6;
    outcome(
        ok,
        format!("noam_lr {lr:.4e} (3.953e-4 ± 1e-7), smoothed CE {ce:.5} (0.5166 ± 1e-4), clipped norm {clipped:.7} (5 ± 1e-6)"),
    )
}

fn trainability() -> Outcome {
    let t0 = Instant::now();
    let run = common::overfit(8, 300);
    let secs = t0.elapsed().as_secs_f64();
    let step = run.reached(1.2);
    outcome(
        step.is_some() && secs < 180.0,
        format!(
            "floor {:.4}, best loss {:.4} ({:.3}x floor), within 1.2x at step {}, {secs:.1} s (limit 180 s)",
            run.floor,
            run.best(),
            run.best() / run.floor,
            step.map_or("never".to_string(), |s| s.to_string())
        ),
    )
}

fn experiment_config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        train: TrainConfig {
            max_epochs: EXPERIMENT_EPOCHS,
            lr_scale: 0.5,
            ..TrainConfig::tiny()
        },
        beam: 8,
        pseudo_label_beam: Some(4),
        sweep: true,
        systems: [System::AsrCr, System::RtR, System::RtCr, System::RtCrpr].into_iter().collect(),
        seeds: vec![0, 1, 2],
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn ordering(r: &ExperimentReport, secs: f64) -> Outcome {
    let get = |s| r.mean(s).expect("system result");
    let (asr, rt_r, rt_cr, crpr) = (get(System::AsrCr), get(System::RtR), get(System::RtCr), get(System::RtCrpr));
    let a = crpr.cer_rich <= rt_r.cer_rich - 5.0;
    let b = crpr.cer_rich <= rt_cr.cer_rich + 1.0;
    let c = rt_cr.cer_plain <= asr.cer_plain + 1.0;
    let d = secs <= 1800.0;
    let mark = |ok: bool| if ok { "ok" } else { "FAILED" };
    outcome(
        a && b && c && d,
        format!(
            "rich CER RT_CRPR {:.2} vs RT_R {:.2} - 5 [{}]; RT_CRPR {:.2} vs RT_CR {:.2} + 1 [{}]; plain CER RT_CR {:.2} vs ASR_CR {:.2} + 1 [{}]; {secs:.0} s of 1800 s [{}]",
            crpr.cer_rich,
            rt_r.cer_rich,
            mark(a),
            crpr.cer_rich,
            rt_cr.cer_rich,
            mark(b),
            rt_cr.cer_plain,
            asr.cer_plain,
            mark(c),
            mark(d)
        ),
    )
}

fn style_switch(r: &ExperimentReport) -> Outcome {
    match r.mean_style_switch() {
        Some(s) => outcome(
            s.common_rate <= 0.25 * s.rich_rate,
            format!(
                "emission rate with [common] {:.4} vs 0.25 x rate with [rich] {:.4} ({} seeds)",
                s.common_rate,
                0.25 * s.rich_rate,
                r.style_switch.len()
            ),
        ),
        None => outcome(false, "no style-switch measurement".to_string()),
    }
}

fn sweep(r: &ExperimentReport) -> Outcome {
    let pts = r.mean_sweep();
    let at = |f: f64| pts.iter().find(|p| (p.pr_fraction - f).abs() < 1e-9).map(|p| p.cer_rich);
    match (at(0.0), at(0.25), at(0.5), at(1.0)) {
        (Some(z), Some(q), Some(h), Some(one)) => outcome(
            one <= z && (h - one).abs() <= 3.0,
            format!("mean rich CER at 0 / 0.25 / 0.5 / 1.0: {z:.2} / {q:.2} / {h:.2} / {one:.2}; need 1.0 <= 0 and |0.5 - 1.0| <= 3"),
        ),
        _ => outcome(false, format!("sweep incomplete: {} points", pts.len())),
    }
}

fn small_config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        synth: SynthConfig::default(),
        rich_utterances: 24,
        common_utterances: 48,
        dev_utterances: 8,
        eval_utterances: 12,
        train: TrainConfig {
            batch_size: 8,
            max_epochs: 2,
            ..TrainConfig::tiny()
        },
        beam: 3,
        pseudo_label_beam: Some(2),
        sweep: true,
        seeds: vec![4, 5],
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn determinism(dir: &Path) -> Outcome {
    let cfg = small_config(dir);
    let first = run_experiment(&cfg).unwrap();
    let tree_a = hash_tree(dir).unwrap();
    std::fs::remove_dir_all(dir).unwrap();
    let second = run_experiment(&cfg).unwrap();
    let tree_b = hash_tree(dir).unwrap();
    let differing: Vec<&String> = tree_a
        .keys()
        .chain(tree_b.keys())
        .filter(|k| tree_a.get(*k) != tree_b.get(*k))
        .collect();
    let kinds = ["manifest.json", ".ckpt", "train_log.jsonl", "report.jsonl"];
    let covered = kinds.iter().all(|k| tree_a.keys().any(|p| p.ends_with(k)));
    outcome(
        differing.is_empty() && covered && first == second,
        format!(
            "{} files compared across two runs (manifests, checkpoints, logs, reports), {} differ{}",
            tree_a.len(),
            differing.len(),
            differing.first().map(|p| format!(", first: {p}")).unwrap_or_default()
        ),
    )
}

fn main() {
    let mut results = Vec::new();
    let mut record = |n: usize, name: &str, o: Outcome| {
        report(n, name, &o);
        results.push(o.pass);
    };
    record(1, "grammar round-trip", grammar());
    record(2, "autodiff correctness", autodiff());
    record(3, "oracle equivalences", oracles());
    record(4, "unit formulas", formulas());
    record(5, "trainability", trainability());

    let tmp = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let exp = run_experiment_with(&experiment_config(&tmp.path().join("experiment")), &mut |m| {
        eprintln!("[{:7.1}s] {m}", t0.elapsed().as_secs_f64())
    })
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    println!("{}", rtasr::pipeline::render_report(&exp));
    record(6, "semi-supervised ordering", ordering(&exp, secs));
    record(7, "style-token switching", style_switch(&exp));
    record(8, "pseudo-label fraction sweep", sweep(&exp));
    record(9, "determinism", determinism(&tmp.path().join("repeat")));

    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
