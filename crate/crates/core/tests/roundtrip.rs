//! File-format and serialization round trips.

use std::collections::BTreeMap;

use iat_core::corpus::{load_dialogues, read_pos_entries, tokenize, write_dialogues, write_pos_entries, write_text_dialogues};
use iat_core::eval::MetricsReport;
use iat_core::{Error, Model, ModelConfig, ModelRole, PerturbationKind, PosTag, TrainConfig, Vocabulary};
use proptest::prelude::*;

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["hi", "the", "cat", "don't", "ok", "yes", "well", "a"]).prop_map(String::from)
}

fn punct() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["", ".", "!", "?", ","]).prop_map(String::from)
}

fn utterance() -> impl Strategy<Value = String> {
    (prop::collection::vec(word(), 1..6), punct()).prop_map(|(w, p)| format!("{}{p}", w.join(" ")))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn dialogue_files_round_trip(dialogues in prop::collection::vec(prop::collection::vec(utterance(), 2..5), 1..6)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_text_dialogues(&path, &dialogues).unwrap();
        let loaded = load_dialogues(&path).unwrap();
        prop_assert_eq!(loaded.dropped, 0);
        let expected: Vec<Vec<Vec<String>>> = dialogues.iter().map(|d| d.iter().map(|u| tokenize(u)).collect()).collect();
        prop_assert_eq!(&loaded.dialogues, &expected);

        // encoded form survives a write/load cycle through the vocabulary
        let vocab = Vocabulary::build(&loaded.dialogues, 100, 1).unwrap();
        let encoded: Vec<_> = loaded.dialogues.iter().map(|d| vocab.encode_dialogue(d)).collect();
        let path2 = dir.path().join("e.jsonl");
        write_dialogues(&path2, &vocab, &encoded).unwrap();
        let again = load_dialogues(&path2).unwrap();
        prop_assert_eq!(again.dialogues, loaded.dialogues);
    }
}

#[test]
fn malformed_line_is_reported_with_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    std::fs::write(&path, "{\"dialogue\": [\"a\", \"b\"]}\n{\"dialogue\": 3}\n").unwrap();
    match load_dialogues(&path) {
        Err(Error::MalformedRecord { line }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn vocabulary_and_pos_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let dialogues = vec![vec![tokenize("the cat sat ."), tokenize("a dog ran !")]];
    let vocab = Vocabulary::build(&dialogues, 50, 1).unwrap();
    vocab.save(&dir.path().join("v.txt")).unwrap();
    assert_eq!(Vocabulary::load(&dir.path().join("v.txt")).unwrap(), vocab);

    let mut pos = BTreeMap::new();
    pos.insert("cat".to_string(), PosTag::Noun);
    pos.insert("sat".to_string(), PosTag::Verb);
    pos.insert("the".to_string(), PosTag::Other);
    write_pos_entries(&dir.path().join("p.txt"), &pos).unwrap();
    assert_eq!(read_pos_entries(&dir.path().join("p.txt")).unwrap(), pos);
}

#[test]
fn metrics_report_json_is_lossless() {
    let mut deltas = BTreeMap::new();
    let mut stds = BTreeMap::new();
    for (i, k) in PerturbationKind::ALL.into_iter().enumerate() {
        deltas.insert(k, 0.1 + i as f64 / 7.0);
        stds.insert(k, (i as f64).sqrt() / 3.0);
    }
    let report = MetricsReport {
        perplexity_orig: 1.0 / 3.0 + 1.0,
        ppl_delta_macro: deltas.values().sum::<f64>() / 11.0,
        ppl_delta_by_kind: deltas,
        ppl_delta_std_by_kind: stds,
        distinct_1: 0.1 + 0.2,
        distinct_2: std::f64::consts::PI / 10.0,
        distinct_3: 1e-300,
        overlap_pct: 33.333333333333336,
        stopword_pct: 99.99999999999999,
        num_examples: 17,
        seeds_used: vec![0, 1, u64::MAX],
    };
    let back = MetricsReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
    assert!(lines[0].contains("delta_word-repl"));
}

#[test]
fn train_config_round_trips_and_rejects_unknown_keys() {
    let c = TrainConfig {
        learning_rate: 3e-3,
        seed: 9,
        max_batches_per_epoch: Some(4),
        ..Default::default()
    };
    let text = serde_json::to_string(&c).unwrap();
    assert_eq!(TrainConfig::from_json(&text).unwrap(), c);
    let err = TrainConfig::from_json(r#"{"learning_rat": 0.1}"#).unwrap_err();
    assert!(err.to_string().contains("learning_rat"), "{err}");
}

#[test]
fn checkpoint_keeps_role_and_values() {
    let dir = tempfile::tempdir().unwrap();
    for role in [ModelRole::Forward, ModelRole::Backward, ModelRole::ResponseLm] {
        let m = Model::random(ModelConfig::new(11, 4, 5).with_role(role), 2).unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.role(), role);
        assert_eq!(back.params(), m.params());
    }
}
