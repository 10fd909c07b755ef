use proptest::prelude::*;

use super::*;
use crate::synth::{generate_corpus, SynthConfig};
use crate::vocab::{STYLE_COMMON, STYLE_RICH};

#[test]
fn noam_reference_value() {
    let lr = noam_lr(25000, 256, 25000, 1.0);
    assert!((lr - 3.953e-4).abs() < 1e-7, "{lr}");
    let oracle = 1.0 / (256f64.sqrt() * 25000f64.sqrt());
    assert!((lr - oracle).abs() < 1e-15);
}

#[test]
fn noam_shape() {
    let w = 400;
    let warm = (w as f64).powf(-1.5) * w as f64;
    let decay = (w as f64).powf(-0.5);
    assert!((warm - decay).abs() < 1e-15);
    let (a, b) = (noam_lr(1, 64, w, 1.0), noam_lr(2, 64, w, 1.0));
    assert!((b / a - 2.0).abs() < 1e-12);
    for s in w..w + 500 {
        assert!(noam_lr(s + 1, 64, w, 1.0) < noam_lr(s, 64, w, 1.0));
    }
    assert_eq!(noam_lr(10, 64, w, 0.5), 0.5 * noam_lr(10, 64, w, 1.0));
}

#[test]
fn smoothed_loss_examples() {
    let lp = Tensor::new(&[1, 3], vec![0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()]).unwrap();
    let loss = loss_label_smoothed_ce(&lp, &[0], 0.1, usize::MAX).unwrap();
    let oracle = -(0.9 * 0.7f64.ln() + 0.05 * 0.2f64.ln() + 0.05 * 0.1f64.ln());
    assert!((loss - oracle).abs() < 1e-12);
    assert!((loss - 0.5166).abs() < 1e-4, "{loss}");

    let onehot = Tensor::new(&[2, 3], vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY])
        .unwrap();
    assert_eq!(loss_label_smoothed_ce(&onehot, &[0, 1], 0.0, 99).unwrap(), 0.0);

    let v = 7;
    let uniform = Tensor::full(&[3, v], -(v as f64).ln());
    for eps in [0.0, 0.1, 0.5] {
        let l = loss_label_smoothed_ce(&uniform, &[3, 4, 5], eps, PAD).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn smoothed_loss_ignores_padding() {
    let lp = Tensor::new(&[2, 3], vec![0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln(), -5.0, -5.0, -5.0]).unwrap();
    let one = loss_label_smoothed_ce(&lp, &[1, PAD], 0.1, PAD).unwrap();
    let single = Tensor::new(&[1, 3], lp.data()[..3].to_vec()).unwrap();
    assert_eq!(one, loss_label_smoothed_ce(&single, &[1], 0.1, PAD).unwrap());
    assert!(matches!(loss_label_smoothed_ce(&lp, &[PAD, PAD], 0.1, PAD), Err(TrainError::AllPadded)));
}

#[test]
fn graph_loss_matches_direct_loss() {
    let lp = Tensor::new(&[3, 4], (0..12).map(|i| -0.3 * i as f64 - 0.1).collect()).unwrap();
    let targets = [2, PAD, 3];
    let direct = loss_label_smoothed_ce(&lp, &targets, 0.2, PAD).unwrap();
    let mut g = Graph::new();
    let v = g.constant(lp.clone());
    let l = smoothed_ce_graph(&mut g, v, &targets, 0.2, PAD).unwrap();
    assert!((g.value(l)[0] - direct).abs() < 1e-12);
}

#[test]
fn floor_is_entropy_of_smoothed_target() {
    let (v, eps) = (45, 0.1);
    let q_off = eps / (v - 1) as f64;
    let mut row = vec![q_off.ln(); v];
    row[0] = (1.0 - eps).ln();
    let lp = Tensor::new(&[1, v], row).unwrap();
    let at_optimum = loss_label_smoothed_ce(&lp, &[0], eps, usize::MAX).unwrap();
    assert!((smoothed_ce_floor(v, eps) - at_optimum).abs() < 1e-12);
    assert_eq!(smoothed_ce_floor(v, 0.0), 0.0);
}

#[test]
fn clipping_examples() {
    let mut g = vec![vec![1.2f32, 0.0], vec![1.6]];
    let before = g.clone();
    assert!((clip_gradients(&mut g, 5.0) - 2.0).abs() < 1e-6);
    assert_eq!(g, before);

    let mut g = vec![vec![6.0f32, 0.0], vec![8.0]];
    assert!((clip_gradients(&mut g, 5.0) - 10.0).abs() < 1e-6);
    assert_eq!(g, vec![vec![3.0, 0.0], vec![4.0]]);
    assert!((global_norm(&g) - 5.0).abs() < 1e-6);

    let mut z = vec![vec![0.0f32; 3]];
    clip_gradients(&mut z, 5.0);
    assert_eq!(z, vec![vec![0.0; 3]]);
}

proptest! {
    #[test]
    fn clipping_never_grows(v in proptest::collection::vec(-100.0f32..100.0, 1..40), max in 0.1f64..50.0) {
        let mut g = vec![v.clone()];
        clip_gradients(&mut g, max);
        for (a, b) in g[0].iter().zip(&v) {
            prop_assert!(a.abs() <= b.abs());
        }
        prop_assert!(global_norm(&g) <= max.max(global_norm(&[v])) + 1e-4);
    }
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut x = vec![1.5f32, -2.0];
    let mut st = OptimState::with_sizes([2]);
    optim::adam_update(&mut [&mut x[..]], &[vec![0.0, 0.0]], &mut st, 0.1);
    assert_eq!(x, vec![1.5, -2.0]);
    assert_eq!(st.step, 1);
}

#[test]
fn adam_first_moments() {
    let mut x = vec![1.0f32];
    let mut st = OptimState::with_sizes([1]);
    let g = 0.5;
    optim::adam_update(&mut [&mut x[..]], &[vec![g as f32]], &mut st, 0.01);
    assert!((st.m[0][0] - (1.0 - 0.9) * g).abs() < 1e-12);
    assert!((st.v[0][0] - (1.0 - 0.98) * g * g).abs() < 1e-12);
    assert!((x[0] as f64 - (1.0 - 0.01)).abs() < 1e-6);
}

#[test]
fn adam_minimizes_quadratic_like_reference() {
    let (b1, b2, eps, lr) = (0.9f64, 0.98f64, 1e-9f64, 1e-2f64);
    let (mut rx, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut x = vec![1.0f32];
    let mut st = OptimState::with_sizes([1]);
    for t in 1..=200 {
        let g = 2.0 * rx;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        rx -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        let gx = 2.0 * x[0];
        optim::adam_update(&mut [&mut x[..]], &[vec![gx]], &mut st, lr);
    }
    assert!(rx.abs() < 0.1, "{rx}");
    assert!((x[0] as f64 - rx).abs() < 1e-4);
}

fn tiny_corpus(n: usize, seed: u64) -> (crate::synth::Corpus, Vocab, FeatureCache) {
    let cfg = SynthConfig {
        num_utterances: n,
        seed,
        grapheme_count: 6,
        utterance_length_range: (2, 4),
        base_dim: 6,
        ..SynthConfig::default()
    };
    let c = generate_corpus(&cfg).unwrap();
    let ts: Vec<_> = c.rich.entries.iter().map(|u| u.target().unwrap()).collect();
    let vocab = Vocab::build(&ts);
    let mut cache = FeatureCache::new();
    stack_features(&c.rich, &c.features, &mut cache);
    (c, vocab, cache)
}

fn micro_model(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        num_encoder_blocks: 1,
        num_decoder_blocks: 1,
        model_dim: 16,
        ffn_dim: 32,
        num_heads: 2,
        conv_channels: (4, 16),
        ..ModelConfig::tiny(18, vocab.size())
    }
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        warmup_steps: 20,
        max_epochs: 3,
        spec_augment: Some(SpecAugment::mild(6)),
        seed: 3,
        ..TrainConfig::tiny()
    }
}

#[test]
fn examples_carry_their_dataset_style() {
    let (c, vocab, cache) = tiny_corpus(12, 1);
    let (rich, common) = (c.rich.truncated(0.5), c.common);
    let sets = vec![(common, StyleToken::Common), (rich, StyleToken::Rich)];
    let mut seen = Vec::new();
    let mut obs = |e: TrainEvent<'_>| {
        if let TrainEvent::Batch { examples, .. } = e {
            seen.extend(examples.iter().map(|x| (x.dataset, x.ids[0])));
        }
    };
    Trainer::new(&sets, &[], &vocab, &micro_model(&vocab), &TrainConfig { max_epochs: 1, ..quick_cfg() })
        .features(&cache)
        .observe(&mut obs)
        .run()
        .unwrap();
    assert_eq!(seen.len(), 18);
    for (d, style) in seen {
        assert_eq!(style, if d == 0 { STYLE_COMMON } else { STYLE_RICH });
    }
}

#[test]
fn training_is_deterministic() {
    let (c, vocab, cache) = tiny_corpus(10, 2);
    let sets = vec![(c.rich.clone(), StyleToken::Rich)];
    let dev = vec![(c.rich.truncated(0.3), StyleToken::Rich)];
    let run = || {
        Trainer::new(&sets, &dev, &vocab, &micro_model(&vocab), &quick_cfg())
            .features(&cache)
            .run()
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.log.len(), 3);
    let best = a.log.iter().map(|e| e.dev_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(a.best_dev_loss, best);
    assert!(a.best_dev_loss <= a.log[0].dev_loss);
}

#[test]
fn early_stopping_waits_for_a_stall() {
    let (c, vocab, cache) = tiny_corpus(8, 3);
    let sets = vec![(c.rich.clone(), StyleToken::Rich)];
    let cfg = TrainConfig {
        patience_epochs: 1,
        max_epochs: 200,
        lr_scale: 8.0,
        ..quick_cfg()
    };
    let out = Trainer::new(&sets, &sets, &vocab, &micro_model(&vocab), &cfg)
        .features(&cache)
        .run()
        .unwrap();
    let n = out.log.len();
    assert!(n < 200, "never stalled");
    assert!(!out.log[n - 1].best_flag);
    assert!(out.log[..n - 1].iter().all(|e| e.best_flag));
}

#[test]
fn rejects_empty_and_mismatched_inputs() {
    let (c, vocab, cache) = tiny_corpus(4, 4);
    let empty = vec![(c.rich.truncated(0.0), StyleToken::Rich)];
    let r = Trainer::new(&empty, &[], &vocab, &micro_model(&vocab), &quick_cfg()).features(&cache).run();
    assert!(matches!(r, Err(TrainError::EmptyDataset)));
    let sets = vec![(c.rich.clone(), StyleToken::Rich)];
    let mut m = micro_model(&vocab);
    m.vocab_size += 1;
    assert!(matches!(
        Trainer::new(&sets, &[], &vocab, &m, &quick_cfg()).features(&cache).run(),
        Err(TrainError::Vocab(_))
    ));
    let bad = TrainConfig {
        label_smoothing: 1.0,
        ..quick_cfg()
    };
    assert!(matches!(
        Trainer::new(&sets, &[], &vocab, &micro_model(&vocab), &bad).features(&cache).run(),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn epoch_log_json_fields() {
    let e = EpochLog {
        epoch: 1,
        train_loss: 2.0,
        dev_loss: 1.5,
        lr: 1e-3,
        best_flag: true,
    };
    let v: serde_json::Value = serde_json::to_value(&e).unwrap();
    for k in ["epoch", "train_loss", "dev_loss", "lr", "best_flag"] {
        assert!(v.get(k).is_some(), "{k}");
    }
}
