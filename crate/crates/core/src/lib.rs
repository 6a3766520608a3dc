//! Inverse adversarial training (IAT) for small recurrent dialogue models.
//!
//! The crate is organized bottom-up:
//!
//! * [`corpus`]: tokenization, vocabularies, dialogue files and a synthetic
//!   corpus with planted history dependence and a planted generic-response
//!   imbalance.
//! * [`perturb`]: the eleven dialogue-history corruptions (utterance and
//!   word level) plus the identity control.
//! * [`seqmodel`]: a GRU encoder-decoder with exact analytic gradients,
//!   greedy / sampling / beam decoding and a versioned checkpoint format.
//! * [`objectives`]: likelihood-gap rewards, the max-margin penalty, the
//!   score-function gradient, and MMI re-ranking scores.
//! * [`trainer`]: Adam, MLE pretraining with early stopping, IAT fine-tuning
//!   and auxiliary (backward / response LM) models.
//! * [`eval`]: perplexity, perturbation sensitivity, distinct-n, overlap and
//!   stop-word rate.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod perturb;
pub mod seqmodel;
pub mod trainer;

pub use corpus::{
    Dialogue, Example, History, PosLexicon, PosTag, SynthConfig, TokenId, Utterance, Vocabulary,
};
pub use error::{Error, Result};
pub use eval::{DecodeMode, MetricsReport, StopwordList};
pub use objectives::RewardRecord;
pub use perturb::{PerturbationKind, Perturber};
pub use seqmodel::{Gradients, Hypothesis, Model, ModelConfig, ModelRole, Parameters};
pub use trainer::{TrainConfig, TrainLog};

/// Derive an independent 64-bit seed from a base seed and a stream of indices.
///
/// Used wherever a random stream has to be partitioned per example, epoch or
/// seed so that results do not depend on iteration or thread order.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    // splitmix64 finalizer folded over the parts
    let mut x = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        x = x.wrapping_add(p.wrapping_mul(0xBF58_476D_1CE4_E5B9)) ^ 0x94D0_49BB_1331_11EB;
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

pub(crate) fn rng_from(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
