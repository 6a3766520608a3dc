use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn iat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iat"))
        .args(args)
        .output()
        .expect("run iat")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_corpus(dir: &TempDir) -> std::path::PathBuf {
    let corpus = dir.path().join("corpus");
    let o = iat(&["gen-corpus", "--out", s(&corpus), "--seed", "2", "--dialogues", "60"]);
    assert!(o.status.success(), "{}", stderr(&o));
    corpus
}

fn dialogues_file(dir: &TempDir) -> std::path::PathBuf {
    let path = dir.path().join("in.jsonl");
    fs::write(
        &path,
        concat!(
            r#"{"dialogue":["hello there","i saw a dog","what dog ?","a big dog"]}"#,
            "\n",
            r#"{"dialogue":["one two three","four five","six"]}"#,
            "\n"
        ),
    )
    .unwrap();
    path
}

#[test]
fn gen_corpus_writes_all_files_deterministically() {
    let dir = TempDir::new().unwrap();
    let a = small_corpus(&dir);
    let b = dir.path().join("again");
    assert!(iat(&["gen-corpus", "--out", s(&b), "--seed", "2", "--dialogues", "60"]).status.success());
    for f in ["train.jsonl", "valid.jsonl", "test.jsonl", "vocab.txt", "pos.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read_to_string(a.join("train.jsonl")).unwrap().lines().count(), 48);
}

#[test]
fn invalid_generic_rate_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let o = iat(&["gen-corpus", "--out", s(&dir.path().join("c")), "--generic-rate", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("generic_rate"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = TempDir::new().unwrap();
    let corpus = small_corpus(&dir);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"learning_rat": 0.01}"#).unwrap();
    let o = iat(&["pretrain", "--corpus", s(&corpus), "--config", s(&cfg), "--out", s(&dir.path().join("m.ckpt"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
}

#[test]
fn train_iat_requires_init() {
    let dir = TempDir::new().unwrap();
    let corpus = small_corpus(&dir);
    let o = iat(&["train-iat", "--corpus", s(&corpus), "--out", s(&dir.path().join("m.ckpt"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn perturb_identity_and_double_reverse_round_trip() {
    let dir = TempDir::new().unwrap();
    let input = dialogues_file(&dir);
    let id = dir.path().join("id.jsonl");
    assert!(iat(&["perturb", "--in", s(&input), "--op", "identity", "--out", s(&id)]).status.success());
    assert_eq!(fs::read_to_string(&id).unwrap(), fs::read_to_string(&input).unwrap());

    let once = dir.path().join("once.jsonl");
    let twice = dir.path().join("twice.jsonl");
    assert!(iat(&["perturb", "--in", s(&input), "--op", "rev", "--out", s(&once)]).status.success());
    assert!(iat(&["perturb", "--in", s(&once), "--op", "rev", "--out", s(&twice)]).status.success());
    assert_ne!(fs::read_to_string(&once).unwrap(), fs::read_to_string(&input).unwrap());
    assert_eq!(fs::read_to_string(&twice).unwrap(), fs::read_to_string(&input).unwrap());
    // the response turn is never touched
    assert!(fs::read_to_string(&once).unwrap().contains(r#""a big dog"]"#));
}

#[test]
fn perturb_rejects_unknown_op_and_repl_without_pool() {
    let dir = TempDir::new().unwrap();
    let input = dialogues_file(&dir);
    let out = dir.path().join("o.jsonl");
    let o = iat(&["perturb", "--in", s(&input), "--op", "scramble", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("word-shuffle"), "{}", stderr(&o));
    let o = iat(&["perturb", "--in", s(&input), "--op", "repl", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(iat(&["perturb", "--in", s(&input), "--op", "repl", "--pool", s(&input), "--out", s(&out)])
        .status
        .success());
}

#[test]
fn train_evaluate_decode_and_aux_checks() {
    let dir = TempDir::new().unwrap();
    let corpus = small_corpus(&dir);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"max_epochs": 1, "max_batches_per_epoch": 2}"#).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let small = ["--embed-dim", "8", "--hidden-dim", "8"];
    let mut args = vec!["pretrain", "--corpus", s(&corpus), "--config", s(&cfg), "--out", s(&ckpt)];
    args.extend(small);
    let o = iat(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(ckpt.with_extension("log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,valid_ppl,mean_reward,mean_penalty,seconds"));

    let report = dir.path().join("r.json");
    let o = iat(&[
        "evaluate", "--corpus", s(&corpus), "--ckpt", s(&ckpt), "--report", s(&report), "--seeds", "0", "--max-examples",
        "20",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = iat_core::MetricsReport::from_json(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.num_examples, 20);
    assert!(report.with_extension("csv").exists());

    let o = iat(&["evaluate", "--corpus", s(&corpus), "--ckpt", s(&ckpt), "--mode", "mmi-bidi", "--report", s(&report)]);
    assert_eq!(o.status.code(), Some(2));

    let vocab = corpus.join("vocab.txt");
    let o = iat(&["decode", "--ckpt", s(&ckpt), "--vocab", s(&vocab), "--history", "i saw the cat today ."]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = String::from_utf8(o.stdout).unwrap();
    let score: f64 = line.trim_end().rsplit('\t').next().unwrap().parse().unwrap();
    assert!(score <= 0.0);

    // wrong-sized model for the corpus vocabulary
    let o = iat(&["decode", "--ckpt", s(&ckpt), "--vocab", s(&dialogues_file(&dir)), "--history", "x"]);
    assert_eq!(o.status.code(), Some(2));
}
