use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn agent(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agent"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(extra: Value) -> Value {
    let stack = json!({"layers": 1, "heads": 2, "ff_mult": 2});
    let mut c = json!({
        "model": {
            "dims": [8, 10, 12, 14],
            "caps": [6, 4, 4],
            "encoder": stack,
            "decoder": stack,
            "dense_layers": 1,
            "discriminator_widths": [2, 3],
            "discriminator_channels": 3,
            "pndb": {"mode": "leave-one-out", "questions": 2, "filters": 8}
        },
        "steps": 3,
        "batch_size": 2,
        "checkpoint_every": 2,
        "gan": {"steps": 2},
        "seed": 11
    });
    for (k, v) in extra.as_object().unwrap() {
        c[k] = v.clone();
    }
    c
}

fn write_corpus(dir: &Path) -> std::path::PathBuf {
    let docs = [
        r#"{"paragraphs":[{"sentences":["alice met bob","bob left"]},{"sentences":["alice stayed home"]}]}"#,
        r#"{"paragraphs":[{"sentences":["carol saw the sea","the sea was calm"]},{"sentences":["carol swam"]}]}"#,
        r#"{"paragraphs":[{"sentences":["dave read a book"]},{"sentences":["the book was long","dave slept"]}]}"#,
    ];
    let p = dir.join("corpus.jsonl");
    std::fs::write(&p, docs.join("\n")).unwrap();
    p
}

fn write_config(dir: &Path, cfg: &Value) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(agent(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(agent(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_field_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(json!({"stepz": 3})));
    let corpus = write_corpus(dir.path());
    let out = agent(&[
        "build-vocab",
        "--config",
        s(&cfg),
        "--corpus",
        s(&corpus),
        "--out",
        s(&dir.path().join("v")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn missing_seed_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config(json!({}));
    c.as_object_mut().unwrap().remove("seed");
    let cfg = write_config(dir.path(), &c);
    let corpus = write_corpus(dir.path());
    let v = dir.path().join("v");
    assert_eq!(
        agent(&[
            "build-vocab",
            "--config",
            s(&cfg),
            "--corpus",
            s(&corpus),
            "--out",
            s(&v)
        ])
        .status
        .code(),
        Some(1)
    );
    let out = agent(&[
        "build-vocab",
        "--config",
        s(&cfg),
        "--seed",
        "3",
        "--corpus",
        s(&corpus),
        "--out",
        s(&v),
    ]);
    assert!(out.status.success());
}

#[test]
fn malformed_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(json!({})));
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"paragraphs\":[]}\n").unwrap();
    let out = agent(&[
        "train",
        "--config",
        s(&cfg),
        "--corpus",
        s(&bad),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = agent(&[
        "train",
        "--config",
        s(&cfg),
        "--corpus",
        s(&dir.path().join("absent.jsonl")),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn build_vocab_lists_corpus_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(json!({})));
    let corpus = write_corpus(dir.path());
    let v = dir.path().join("vocab.txt");
    assert!(agent(&[
        "build-vocab",
        "--config",
        s(&cfg),
        "--corpus",
        s(&corpus),
        "--out",
        s(&v)
    ])
    .status
    .success());
    let text = std::fs::read_to_string(v).unwrap();
    assert!(text.lines().any(|l| l == "alice"));
    assert!(text.lines().any(|l| l == "sea"));
}

#[test]
fn train_embed_generate_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(json!({})));
    let corpus = write_corpus(dir.path());
    let run = dir.path().join("run");
    let out = agent(&[
        "train",
        "--config",
        s(&cfg),
        "--corpus",
        s(&corpus),
        "--out",
        s(&run),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ck = run.join("checkpoint.bin");
    assert!(ck.exists());

    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let steps: Vec<u64> = metrics
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["step"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(steps.len(), 5);
    assert!(steps.windows(2).all(|w| w[0] < w[1]));

    let doc = dir.path().join("doc.json");
    std::fs::write(&doc, r#"{"paragraphs":[{"sentences":["alice met bob"]}]}"#).unwrap();
    let out = agent(&["embed", "--checkpoint", s(&ck), s(&doc)]);
    assert!(out.status.success());
    let recs: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    // document, paragraph, sentence, three tokens
    assert_eq!(recs.len(), 6);
    assert_eq!(recs[0]["level"], "document");
    assert_eq!(recs[0]["vector"].as_array().unwrap().len(), 14);

    let dvt = dir.path().join("dvt.json");
    let answers = dir.path().join("answers.json");
    let gen = |seed: &str| {
        let out = agent(&[
            "generate",
            "--checkpoint",
            s(&ck),
            "--seed",
            seed,
            "--edit-steps",
            "1",
            "--dump-dvt",
            s(&dvt),
            "--dump-answers",
            s(&answers),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    };
    let a = gen("5");
    assert_eq!(a, gen("5"));
    let text: Value = serde_json::from_str(a.trim()).unwrap();
    assert!(text["paragraphs"].is_array());
    let d: Value = serde_json::from_str(&std::fs::read_to_string(&dvt).unwrap()).unwrap();
    assert_eq!(d["level"], 3);
    let a: Value = serde_json::from_str(&std::fs::read_to_string(&answers).unwrap()).unwrap();
    assert_eq!(a.as_array().unwrap().len(), 2);

    let out = agent(&["eval", "--checkpoint", s(&ck), "--corpus", s(&corpus)]);
    assert!(out.status.success());
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(r["token_accuracy"].as_f64().unwrap() >= 0.0);
}

#[test]
fn same_seed_gives_identical_checkpoints_and_resume_of_finished_run_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let cfg = write_config(dir.path(), &tiny_config(json!({"steps": 4})));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert!(agent(&[
            "train",
            "--config",
            s(&cfg),
            "--corpus",
            s(&corpus),
            "--out",
            s(d)
        ])
        .status
        .success());
    }
    let bytes = std::fs::read(a.join("checkpoint.bin")).unwrap();
    assert_eq!(bytes, std::fs::read(b.join("checkpoint.bin")).unwrap());
    let out = agent(&[
        "train",
        "--config",
        s(&cfg),
        "--corpus",
        s(&corpus),
        "--resume",
        "--out",
        s(&a),
    ]);
    assert!(out.status.success());
    assert_eq!(bytes, std::fs::read(a.join("checkpoint.bin")).unwrap());
}

#[test]
fn check_grads_reports_only_enabled_components() {
    let dir = tempfile::tempdir().unwrap();
    let w = json!({"reconstruction": 1.0, "mlm": 0.0, "coherence": 0.0});
    let off = json!({"reconstruction": 0.0, "mlm": 0.0, "coherence": 0.0});
    let mut c =
        tiny_config(json!({"weights": [w, off, off], "ae_weight": 0.0, "gan": {"mode": "off"}}));
    c["model"]["pndb"]["mode"] = json!("off");
    let cfg = write_config(dir.path(), &c);
    let out = agent(&["check-grads", "--config", s(&cfg)]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    let names: Vec<&str> = r["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["name"].as_str().unwrap())
        .collect();
    assert!(names.contains(&"reconstruction.token"));
    assert!(names
        .iter()
        .all(|n| !n.starts_with("mlm") && !n.starts_with("coherence") && !n.contains("gan")));
    assert!(names.iter().any(|n| n.starts_with("negative-control")));
}
