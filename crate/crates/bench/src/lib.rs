//! Shared fixtures for the benchmarks.

use iat_core::corpus::{examples_from, gen_synthetic, SynthConfig};
use iat_core::{Example, Model, ModelConfig, PosLexicon, Utterance, Vocabulary};

/// A small synthetic corpus with a randomly initialised model at the default
/// layer sizes.
pub struct Fixture {
    pub vocab: Vocabulary,
    pub lexicon: PosLexicon,
    pub examples: Vec<Example>,
    pub pool: Vec<Utterance>,
    pub model: Model,
}

impl Fixture {
    pub fn new(num_dialogues: usize) -> Self {
        let corpus = gen_synthetic(&SynthConfig { num_dialogues, ..SynthConfig::default() }).expect("synthetic corpus");
        let tokenized = corpus.tokenized();
        let vocab = Vocabulary::build(&tokenized, 300, 1).expect("vocabulary");
        let dialogues: Vec<_> = tokenized.iter().map(|d| vocab.encode_dialogue(d)).collect();
        let examples = examples_from(&dialogues, usize::MAX).expect("examples");
        let pool = dialogues.iter().flatten().cloned().collect();
        let lexicon = PosLexicon::resolve(&vocab, &corpus.pos);
        let model = Model::random(ModelConfig::new(vocab.len(), 32, 64), 0).expect("model");
        Self { vocab, lexicon, examples, pool, model }
    }
}
