use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, log_softmax, Model};
use crate::corpus::{History, TokenId, Utterance, BOS, EOS};
use crate::error::{Error, Result};

/// A decoded sequence: BOS-free, ending in EOS unless it hit the length cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    /// Total log-probability of `tokens` (temperature 1).
    pub score: f64,
}

impl Hypothesis {
    /// Tokens without the terminating EOS.
    pub fn response(&self) -> Utterance {
        match self.tokens.last() {
            Some(&EOS) => self.tokens[..self.tokens.len() - 1].to_vec(),
            _ => self.tokens.clone(),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

/// Descending score, then ascending token order.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Draws an index from `softmax(logits / temperature)`.
pub fn sample_from_logits<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> TokenId {
    let scaled: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    let probs: Vec<f64> = log_softmax(&scaled).into_iter().map(f64::exp).collect();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the total mass; fall back to the likeliest token
    argmax(&probs)
}

struct Beam {
    hyp: Hypothesis,
    h: Vec<f64>,
}

impl Model {
    /// Argmax decoding with lowest-id tie-breaking.
    pub fn greedy_decode(&self, history: &History) -> Result<Hypothesis> {
        let source = self.decode_source(history)?;
        let mut h = self.initial_state(&source)?;
        let mut prev = BOS;
        let mut hyp = Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
        };
        while hyp.tokens.len() < self.config.max_decode_len {
            let (nh, logp) = self.decoder_step(&h, prev);
            let tok = argmax(&logp);
            hyp.tokens.push(tok);
            hyp.score += logp[tok];
            if tok == EOS {
                break;
            }
            h = nh;
            prev = tok;
        }
        Ok(hyp)
    }

    pub(crate) fn sample_from_source<R: Rng + ?Sized>(
        &self,
        source: &[TokenId],
        temperature: f64,
        rng: &mut R,
    ) -> Result<Hypothesis> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Precondition(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let mut h = self.initial_state(source)?;
        let mut prev = BOS;
        let mut hyp = Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
        };
        while hyp.tokens.len() < self.config.max_decode_len {
            let (nh, _) = super::gru::step(&self.params.decoder, self.embedding_row(prev), &h);
            let logits = self.logits(&nh);
            let tok = sample_from_logits(&logits, temperature, rng);
            hyp.tokens.push(tok);
            hyp.score += log_softmax(&logits)[tok];
            if tok == EOS {
                break;
            }
            h = nh;
            prev = tok;
        }
        Ok(hyp)
    }

    /// Length-unnormalized beam search. Hypotheses that emit EOS leave the
    /// beam; after `max_decode_len` steps the surviving beams are kept as
    /// capped hypotheses. Returns the best `n_best`, score descending, ties
    /// by token order.
    pub fn beam_search(&self, history: &History, beam_width: usize, n_best: usize) -> Result<Vec<Hypothesis>> {
        if n_best == 0 || n_best > beam_width {
            return Err(Error::Precondition(format!(
                "need 1 <= n_best <= beam_width, got n_best {n_best}, beam_width {beam_width}"
            )));
        }
        let source = self.decode_source(history)?;
        let mut live = vec![Beam {
            hyp: Hypothesis {
                tokens: Vec::new(),
                score: 0.0,
            },
            h: self.initial_state(&source)?,
        }];
        let mut finished: Vec<Hypothesis> = Vec::new();
        for step in 0..self.config.max_decode_len {
            let last_step = step + 1 == self.config.max_decode_len;
            // (score, parent, token); all live beams have the same length, so
            // token order is parent-prefix order then token id
            let mut candidates: Vec<(f64, usize, TokenId)> = Vec::new();
            let mut states = Vec::with_capacity(live.len());
            for (parent, beam) in live.iter().enumerate() {
                let prev = beam.hyp.tokens.last().copied().unwrap_or(BOS);
                let (nh, logp) = self.decoder_step(&beam.h, prev);
                states.push(nh);
                candidates.extend(logp.iter().enumerate().map(|(tok, lp)| (beam.hyp.score + lp, parent, tok)));
            }
            candidates.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| live[a.1].hyp.tokens.cmp(&live[b.1].hyp.tokens))
                    .then(a.2.cmp(&b.2))
            });
            candidates.truncate(beam_width);
            let mut next = Vec::with_capacity(candidates.len());
            for (score, parent, tok) in candidates {
                let mut tokens = live[parent].hyp.tokens.clone();
                tokens.push(tok);
                let hyp = Hypothesis { tokens, score };
                if hyp.is_finished() || last_step {
                    finished.push(hyp);
                } else {
                    next.push(Beam {
                        hyp,
                        h: states[parent].clone(),
                    });
                }
            }
            live = next;
            if live.is_empty() {
                break;
            }
        }
        finished.sort_by(rank);
        finished.truncate(n_best);
        Ok(finished)
    }
}
