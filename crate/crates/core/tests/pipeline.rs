//! Short end-to-end runs on the synthetic corpus.

use iat_core::corpus::{examples_from, gen_synthetic};
use iat_core::eval::perplexity;
use iat_core::trainer::{pretrain_mle, train_iat};
use iat_core::{Model, ModelConfig, PosLexicon, SynthConfig, TrainConfig, Utterance, Vocabulary};

#[test]
fn pretraining_cuts_validation_perplexity_and_iat_runs() {
    let corpus = gen_synthetic(&SynthConfig::default()).unwrap();
    let tokenized = corpus.tokenized();
    let (train_d, valid_d) = tokenized.split_at(1800);
    let vocab = Vocabulary::build(train_d, 300, 1).unwrap();
    assert!(vocab.len() <= 300);
    let encode = |ds: &[Vec<Vec<String>>]| -> Vec<_> { ds.iter().map(|d| vocab.encode_dialogue(d)).collect() };
    let train_dialogues = encode(train_d);
    let train = examples_from(&train_dialogues, usize::MAX).unwrap();
    let valid = examples_from(&encode(valid_d), usize::MAX).unwrap();

    let model = Model::random(ModelConfig::new(vocab.len(), 32, 64), 1).unwrap();
    let config = TrainConfig {
        learning_rate: 3e-3,
        max_epochs: 1,
        ..Default::default()
    };
    let (params, log) = pretrain_mle(&model, &train, &valid, &config).unwrap();
    assert_eq!(log.records.len(), 1);
    assert!(log.best_valid_ppl() < 0.7 * log.initial_valid_ppl, "{log:?}");
    let pretrained = Model::new(model.config().clone(), params).unwrap();
    assert_eq!(perplexity(&pretrained, &valid, None).unwrap(), log.best_valid_ppl());

    let pool: Vec<Utterance> = train_dialogues.iter().flatten().cloned().collect();
    let lexicon = PosLexicon::resolve(&vocab, &corpus.pos);
    let iat_config = TrainConfig {
        learning_rate: 3e-4,
        max_epochs: 1,
        max_batches_per_epoch: Some(5),
        ..Default::default()
    };
    let (_, iat_log) = train_iat(&pretrained, &train, &valid, &pool, &lexicon, &iat_config).unwrap();
    assert_eq!(iat_log.records.len(), 1);
    assert!(iat_log.records[0].mean_penalty <= 0.0);
    assert!(iat_log.records[0].valid_ppl.is_finite());
}
