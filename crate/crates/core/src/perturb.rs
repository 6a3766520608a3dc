//! Dialogue-history corruptions at the utterance and word level.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{History, PosLexicon, PosTag, TokenId, Utterance, NUM_RESERVED};
use crate::error::{Error, Result};

/// Per-event probability for Drop, Repl, WordDrop and WordRepl.
pub const PERTURB_RATE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PerturbationKind {
    Shuf,
    Rev,
    Drop,
    Truncate,
    Repl,
    WordShuffle,
    WordReverse,
    WordDrop,
    NounDrop,
    VerbDrop,
    WordRepl,
    Identity,
}

impl PerturbationKind {
    /// The eleven corrupting kinds, utterance level first.
    pub const ALL: [PerturbationKind; 11] = [
        PerturbationKind::Shuf,
        PerturbationKind::Rev,
        PerturbationKind::Drop,
        PerturbationKind::Truncate,
        PerturbationKind::Repl,
        PerturbationKind::WordShuffle,
        PerturbationKind::WordReverse,
        PerturbationKind::WordDrop,
        PerturbationKind::NounDrop,
        PerturbationKind::VerbDrop,
        PerturbationKind::WordRepl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::Shuf => "shuf",
            PerturbationKind::Rev => "rev",
            PerturbationKind::Drop => "drop",
            PerturbationKind::Truncate => "truncate",
            PerturbationKind::Repl => "repl",
            PerturbationKind::WordShuffle => "word-shuffle",
            PerturbationKind::WordReverse => "word-reverse",
            PerturbationKind::WordDrop => "word-drop",
            PerturbationKind::NounDrop => "noun-drop",
            PerturbationKind::VerbDrop => "verb-drop",
            PerturbationKind::WordRepl => "word-repl",
            PerturbationKind::Identity => "identity",
        }
    }

    pub fn is_utterance_level(self) -> bool {
        matches!(
            self,
            PerturbationKind::Shuf
                | PerturbationKind::Rev
                | PerturbationKind::Drop
                | PerturbationKind::Truncate
                | PerturbationKind::Repl
        )
    }

    /// Every accepted name, for usage messages.
    pub fn valid_names() -> Vec<&'static str> {
        Self::ALL
            .iter()
            .chain(std::iter::once(&PerturbationKind::Identity))
            .map(|k| k.name())
            .collect()
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .chain(std::iter::once(PerturbationKind::Identity))
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown perturbation {s:?}; valid names: {}",
                    Self::valid_names().join(", ")
                ))
            })
    }
}

impl TryFrom<String> for PerturbationKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PerturbationKind> for String {
    fn from(k: PerturbationKind) -> Self {
        k.name().to_string()
    }
}

/// Uniform draw over `enabled`.
pub fn sample_kind<R: Rng + ?Sized>(enabled: &[PerturbationKind], rng: &mut R) -> Result<PerturbationKind> {
    if enabled.is_empty() {
        return Err(Error::Config("no perturbation kinds enabled".into()));
    }
    Ok(enabled[rng.random_range(0..enabled.len())])
}

/// Bernoulli bookkeeping for the rate-driven kinds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BernoulliTally {
    pub events: usize,
    pub hits: usize,
}

impl BernoulliTally {
    fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> bool {
        let hit = rng.random_bool(PERTURB_RATE);
        self.events += 1;
        self.hits += hit as usize;
        hit
    }
}

/// Read-only context shared by all perturbations: the replacement pool for
/// `Repl`, the POS lexicon for noun/verb drops and the vocabulary size for
/// `WordRepl`.
#[derive(Debug, Clone, Copy)]
pub struct Perturber<'a> {
    pool: &'a [Utterance],
    lexicon: &'a PosLexicon,
    vocab_size: usize,
}

impl<'a> Perturber<'a> {
    pub fn new(pool: &'a [Utterance], lexicon: &'a PosLexicon, vocab_size: usize) -> Result<Self> {
        if vocab_size <= NUM_RESERVED {
            return Err(Error::Config(format!(
                "vocab_size must be at least {}, got {vocab_size}",
                NUM_RESERVED + 1
            )));
        }
        Ok(Self {
            pool,
            lexicon,
            vocab_size,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn perturb_history<R: Rng + ?Sized>(
        &self,
        history: &History,
        kind: PerturbationKind,
        rng: &mut R,
    ) -> Result<History> {
        self.perturb_traced(history, kind, rng).map(|(h, _)| h)
    }

    /// Like [`Perturber::perturb_history`], also returning the Bernoulli
    /// events drawn along the way.
    pub fn perturb_traced<R: Rng + ?Sized>(
        &self,
        history: &History,
        kind: PerturbationKind,
        rng: &mut R,
    ) -> Result<(History, BernoulliTally)> {
        if history.is_empty() {
            return Err(Error::Precondition("cannot perturb an empty history".into()));
        }
        if history.iter().any(Vec::is_empty) {
            return Err(Error::Precondition("history contains an empty utterance".into()));
        }
        let mut tally = BernoulliTally::default();
        let out = match kind {
            PerturbationKind::Identity => history.clone(),
            PerturbationKind::Shuf => shuffle_nontrivial(history, rng),
            PerturbationKind::Rev => history.iter().rev().cloned().collect(),
            PerturbationKind::Drop => {
                let keep: Vec<bool> = history.iter().map(|_| !tally.draw(rng)).collect();
                let mut out: History = history
                    .iter()
                    .zip(&keep)
                    .filter(|(_, &k)| k)
                    .map(|(u, _)| u.clone())
                    .collect();
                if out.is_empty() {
                    out.push(history[rng.random_range(0..history.len())].clone());
                }
                out
            }
            PerturbationKind::Truncate => {
                let n = history.len();
                if n < 2 {
                    history.clone()
                } else {
                    truncate_recent(history, rng.random_range(1..n))
                }
            }
            PerturbationKind::Repl => {
                if self.pool.is_empty() {
                    return Err(Error::Config("Repl requires a non-empty utterance pool".into()));
                }
                history
                    .iter()
                    .map(|u| {
                        if tally.draw(rng) {
                            self.pool[rng.random_range(0..self.pool.len())].clone()
                        } else {
                            u.clone()
                        }
                    })
                    .collect()
            }
            PerturbationKind::WordShuffle => history
                .iter()
                .map(|u| {
                    let mut u = u.clone();
                    u.shuffle(rng);
                    u
                })
                .collect(),
            PerturbationKind::WordReverse => history
                .iter()
                .map(|u| u.iter().rev().copied().collect())
                .collect(),
            PerturbationKind::WordDrop => history
                .iter()
                .map(|u| {
                    let keep: Vec<bool> = u.iter().map(|_| !tally.draw(rng)).collect();
                    filter_or_keep_one(u, &keep, rng)
                })
                .collect(),
            PerturbationKind::NounDrop | PerturbationKind::VerbDrop => {
                let target = if kind == PerturbationKind::NounDrop {
                    PosTag::Noun
                } else {
                    PosTag::Verb
                };
                history
                    .iter()
                    .map(|u| {
                        let keep: Vec<bool> =
                            u.iter().map(|&t| self.lexicon.tag(t) != target).collect();
                        filter_or_keep_one(u, &keep, rng)
                    })
                    .collect()
            }
            PerturbationKind::WordRepl => history
                .iter()
                .map(|u| {
                    u.iter()
                        .map(|&t| {
                            if tally.draw(rng) {
                                rng.random_range(NUM_RESERVED..self.vocab_size)
                            } else {
                                t
                            }
                        })
                        .collect()
                })
                .collect(),
        };
        Ok((out, tally))
    }
}

/// The `k` most recent utterances (`k` clamped to `[1, n]`).
pub fn truncate_recent(history: &History, k: usize) -> History {
    let k = k.clamp(1, history.len().max(1));
    history[history.len() - k..].to_vec()
}

fn shuffle_nontrivial<R: Rng + ?Sized>(history: &History, rng: &mut R) -> History {
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.shuffle(rng);
    if history.len() >= 2 && order.iter().enumerate().all(|(i, &j)| i == j) {
        order.shuffle(rng);
    }
    order.into_iter().map(|i| history[i].clone()).collect()
}

// Kept tokens in order; if nothing survives, one original token at random.
fn filter_or_keep_one<R: Rng + ?Sized>(u: &[TokenId], keep: &[bool], rng: &mut R) -> Utterance {
    let out: Utterance = u
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(&t, _)| t)
        .collect();
    if out.is_empty() {
        vec![u[rng.random_range(0..u.len())]]
    } else {
        out
    }
}
