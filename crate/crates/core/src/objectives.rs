//! Likelihood-gap reward, max-margin penalty, the score-function gradient
//! that combines them, and MMI re-ranking scores.
//!
//! For a response `Y`, original history `X` and perturbed history `X'`:
//!
//! ```text
//! NLL_orig = -sum_i log P(y_i | y_<i, X)
//! NLL_adv  = -sum_i log P(y_i | y_<i, X')
//! R        = NLL_adv - NLL_orig
//! P        = min(0, R - M)
//! grad     = R * grad log P(Y | X) + P * grad log P(Y | X')
//! ```
//!
//! `R` and `P` are constants for differentiation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{History, Utterance};
use crate::error::{Error, Result};
use crate::perturb::PerturbationKind;
use crate::seqmodel::{Gradients, Hypothesis, Model, WeightedExample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub nll_orig: f64,
    pub nll_adv: f64,
    pub reward: f64,
    pub penalty: f64,
    pub margin: f64,
}

impl RewardRecord {
    pub fn from_nlls(nll_orig: f64, nll_adv: f64, margin: f64) -> Self {
        let reward = nll_adv - nll_orig;
        Self {
            nll_orig,
            nll_adv,
            reward,
            penalty: (reward - margin).min(0.0),
            margin,
        }
    }
}

/// How the reward is computed from the two likelihoods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSettings {
    pub margin: f64,
    /// Divide both NLLs by the scored token count before differencing.
    pub length_normalized: bool,
}

impl RewardSettings {
    pub fn with_margin(margin: f64) -> Self {
        Self {
            margin,
            length_normalized: false,
        }
    }
}

/// `-sum log P(y_i | y_<i, history)`, EOS included.
pub fn nll(model: &Model, history: &History, response: &Utterance) -> Result<f64> {
    Ok(-model.sequence_log_probs(history, response)?.iter().sum::<f64>())
}

pub fn reward(
    model: &Model,
    history: &History,
    perturbed: &History,
    response: &Utterance,
    margin: f64,
) -> Result<RewardRecord> {
    reward_with(model, history, perturbed, response, RewardSettings::with_margin(margin))
}

pub fn reward_with(
    model: &Model,
    history: &History,
    perturbed: &History,
    response: &Utterance,
    settings: RewardSettings,
) -> Result<RewardRecord> {
    if !(settings.margin >= 0.0) {
        return Err(Error::Config(format!("margin must be non-negative, got {}", settings.margin)));
    }
    let mut orig = nll(model, history, response)?;
    let mut adv = nll(model, perturbed, response)?;
    if settings.length_normalized {
        let n = (response.len() + 1) as f64;
        orig /= n;
        adv /= n;
    }
    Ok(RewardRecord::from_nlls(orig, adv, settings.margin))
}

/// `R * grad log P(Y|X) + P * grad log P(Y|X')` for frozen `R`, `P`.
pub fn weighted_iat_gradient(
    model: &Model,
    history: &History,
    perturbed: &History,
    response: &Utterance,
    reward: f64,
    penalty: f64,
) -> Result<Gradients> {
    let n = response.len() + 1;
    let reward_w = vec![reward; n];
    let penalty_w = vec![penalty; n];
    let mut grads = model.backward(&[WeightedExample {
        history,
        response,
        weights: &reward_w,
    }])?;
    let pen = model.backward(&[WeightedExample {
        history: perturbed,
        response,
        weights: &penalty_w,
    }])?;
    grads.add_scaled(&pen, 1.0);
    Ok(grads)
}

/// Reward record and the combined ascent direction for one example.
pub fn iat_gradient(
    model: &Model,
    history: &History,
    perturbed: &History,
    response: &Utterance,
    margin: f64,
) -> Result<(Gradients, RewardRecord)> {
    iat_gradient_with(model, history, perturbed, response, RewardSettings::with_margin(margin))
}

pub fn iat_gradient_with(
    model: &Model,
    history: &History,
    perturbed: &History,
    response: &Utterance,
    settings: RewardSettings,
) -> Result<(Gradients, RewardRecord)> {
    let record = reward_with(model, history, perturbed, response, settings)?;
    let grads = weighted_iat_gradient(model, history, perturbed, response, record.reward, record.penalty)?;
    Ok((grads, record))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IatBatchStats {
    pub mean_reward: f64,
    pub mean_penalty: f64,
    pub zero_penalty_fraction: f64,
    pub kind_counts: BTreeMap<PerturbationKind, usize>,
}

impl IatBatchStats {
    pub fn from_records(records: &[(PerturbationKind, RewardRecord)]) -> Self {
        let mut stats = Self::default();
        if records.is_empty() {
            return stats;
        }
        let n = records.len() as f64;
        for (kind, r) in records {
            stats.mean_reward += r.reward;
            stats.mean_penalty += r.penalty;
            stats.zero_penalty_fraction += (r.penalty == 0.0) as u8 as f64;
            *stats.kind_counts.entry(*kind).or_default() += 1;
        }
        stats.mean_reward /= n;
        stats.mean_penalty /= n;
        stats.zero_penalty_fraction /= n;
        stats
    }
}

/// `log p(T|S) - lambda * log p(T)`.
pub fn mmi_anti_score(
    forward: &Model,
    response_lm: &Model,
    history: &History,
    response: &Utterance,
    lambda: f64,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("mmi lambda must be non-negative, got {lambda}")));
    }
    let conditional = forward.response_log_prob(history, response)?;
    if lambda == 0.0 {
        return Ok(conditional);
    }
    Ok(conditional - lambda * response_lm.response_log_prob(history, response)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reranked {
    pub hypothesis: Hypothesis,
    pub combined: f64,
}

/// Rescores each hypothesis as `score + lambda * extra` and sorts by the
/// combined score, descending; equal scores keep their input order.
pub fn rerank_with_scores(n_best: &[Hypothesis], extra: &[f64], lambda: f64) -> Vec<Reranked> {
    let mut out: Vec<Reranked> = n_best
        .iter()
        .zip(extra)
        .map(|(h, e)| Reranked {
            hypothesis: h.clone(),
            combined: if lambda == 0.0 { h.score } else { h.score + lambda * e },
        })
        .collect();
    out.sort_by(|a, b| b.combined.partial_cmp(&a.combined).unwrap_or(std::cmp::Ordering::Equal));
    out
}

/// Re-ranks an N-best list by `log p(T|S) + lambda * log p(S|T)`, with the
/// backward model reading `T` and scoring the flattened history.
pub fn mmi_bidi_rerank(
    backward: &Model,
    history: &History,
    n_best: &[Hypothesis],
    lambda: f64,
) -> Result<Vec<Reranked>> {
    if n_best.is_empty() {
        return Err(Error::Precondition("n-best list is empty".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("mmi lambda must be non-negative, got {lambda}")));
    }
    let extra = if lambda == 0.0 {
        vec![0.0; n_best.len()]
    } else {
        n_best
            .iter()
            .map(|h| backward.response_log_prob(history, &h.response()))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(rerank_with_scores(n_best, &extra, lambda))
}
