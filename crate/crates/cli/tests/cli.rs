use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rtasr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtasr")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> usize {
    fs::read_to_string(p).unwrap().lines().count()
}

#[test]
fn stepwise_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let model = tmp.path().join("model");
    let pseudo = tmp.path().join("pseudo");
    let dec = tmp.path().join("dec");

    ok(&rtasr(&["synth", "--utterances", "12", "--seed", "4", "--output-dir", s(&corpus)]));
    assert_eq!(lines(&corpus.join("rich.jsonl")), 12);
    assert_eq!(lines(&corpus.join("common.jsonl")), 12);
    assert!(corpus.join("feats/utt000011.feat").exists());

    let rich = corpus.join("rich.jsonl");
    let common = corpus.join("common.jsonl");
    ok(&rtasr(&[
        "train",
        "--data",
        s(&common),
        "--data",
        s(&rich),
        "--dev",
        &format!("{}:common", s(&rich)),
        "--max-steps",
        "3",
        "--batch-size",
        "4",
        "--no-augment",
        "--output-dir",
        s(&model),
    ]));
    for f in ["model.ckpt", "vocab.txt", "train_log.jsonl"] {
        assert!(model.join(f).exists(), "{f}");
    }
    let ckpt = model.join("model.ckpt");
    let vocab = model.join("vocab.txt");

    ok(&rtasr(&[
        "pseudo-label",
        "--model",
        s(&ckpt),
        "--vocab",
        s(&vocab),
        "--data",
        s(&common),
        "--beam",
        "2",
        "--max-len",
        "6",
        "--output-dir",
        s(&pseudo),
    ]));
    let pr = fs::read_to_string(pseudo.join("pseudo_rich.jsonl")).unwrap();
    assert_eq!(pr.lines().count(), 12);
    for line in pr.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["style"], "rich");
        assert!(Path::new(v["feature_path"].as_str().unwrap()).exists());
    }

    ok(&rtasr(&[
        "decode",
        "--model",
        s(&ckpt),
        "--vocab",
        s(&vocab),
        "--data",
        s(&rich),
        "--beam",
        "2",
        "--max-len",
        "6",
        "--output-dir",
        s(&dec),
    ]));
    assert_eq!(lines(&dec.join("hyps.txt")), 12);

    let text = ok(&rtasr(&[
        "score",
        "--refs",
        s(&rich),
        "--hyps",
        s(&dec.join("hyps.txt")),
        "--system",
        "RT_CR",
        "--style-token",
        "--output-dir",
        s(&dec),
    ]));
    assert!(text.starts_with("system"));
    let row: serde_json::Value = serde_json::from_str(fs::read_to_string(dec.join("report.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(row["system"], "RT_CR");
    assert_eq!(row["n_utts"], 12);
    assert!(row["cer_rich"].as_f64().unwrap() >= 0.0);
}

#[test]
fn experiment_from_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{
  "synth": {"num_utterances": 0, "grapheme_count": 5, "frames_per_token": 4, "noise_sigma": 0.1,
            "phenomenon_rates": {"Laugh": 0.1, "Filler": 0.1}, "utterance_length_range": [2, 4],
            "max_span": 2, "base_dim": 13, "seed": 0},
  "rich_utterances": 8, "common_utterances": 8, "dev_utterances": 2, "eval_utterances": 3,
  "train": {"batch_size": 4, "label_smoothing": 0.1, "dropout": 0.1, "warmup_steps": 10,
            "max_grad_norm": 5.0, "patience_epochs": 2, "max_epochs": 1, "max_steps": 2,
            "lr_scale": 1.0, "seed": 0},
  "beam": 2, "max_len": 6, "systems": ["RT_R", "RT_CR"]
}"#,
    )
    .unwrap();
    let out_dir = tmp.path().join("exp");
    let text = ok(&rtasr(&[
        "experiment",
        "--config",
        s(&cfg),
        "--seed",
        "7",
        "--output-dir",
        s(&out_dir),
    ]));
    assert!(text.contains("RT_R") && text.contains("RT_CR"));
    assert_eq!(lines(&out_dir.join("report.jsonl")), 2);
    assert!(out_dir.join("seed_7/step1/model.ckpt").exists());
    assert!(out_dir.join("manifest.json").exists());
}

#[test]
fn failures_exit_nonzero_with_stage_tag() {
    let tmp = tempfile::tempdir().unwrap();
    let out = rtasr(&[
        "train",
        "--data",
        s(&tmp.path().join("missing.jsonl")),
        "--output-dir",
        s(tmp.path()),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("[train]"));

    let out = rtasr(&["experiment", "--pr-fraction", "2", "--output-dir", s(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("[config]"));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{not json").unwrap();
    let out = rtasr(&["experiment", "--config", s(&bad)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("[config]"));

    let out = rtasr(&["experiment", "--preset", "huge"]);
    assert!(!out.status.success());
}
