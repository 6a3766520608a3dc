//! Perplexity, perturbation sensitivity, diversity and overlap metrics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, History, TokenId, Utterance, Vocabulary};
use crate::error::{Error, Result};
use crate::objectives::{mmi_anti_score, mmi_bidi_rerank};
use crate::perturb::{PerturbationKind, Perturber};
use crate::seqmodel::{Hypothesis, Model};
use crate::{derive_seed, rng_from};

/// Perturbs each history once, with a generator seeded from `seed` and the
/// example index, before scoring.
#[derive(Debug, Clone, Copy)]
pub struct HistoryTransform<'a> {
    pub kind: PerturbationKind,
    pub seed: u64,
    pub perturber: &'a Perturber<'a>,
}

pub(crate) fn example_rng(seed: u64, index: usize) -> rand_chacha::ChaCha8Rng {
    rng_from(derive_seed(seed, &[index as u64]))
}

/// Total NLL of the gold responses and the number of scored tokens.
pub fn total_nll(model: &Model, examples: &[Example], transform: Option<HistoryTransform<'_>>) -> Result<(f64, usize)> {
    let parts = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let history = match transform {
                Some(t) => t
                    .perturber
                    .perturb_history(&ex.history, t.kind, &mut example_rng(t.seed, i))?,
                None => ex.history.clone(),
            };
            model.sequence_log_probs(&history, &ex.response)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = parts.iter().map(Vec::len).sum();
    Ok((-compensated_sum(parts.iter().flatten().copied()), n))
}

/// Neumaier summation, in iteration order.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Corpus-level perplexity: `exp(total NLL / total scored tokens)`, EOS
/// included.
pub fn perplexity(model: &Model, examples: &[Example], transform: Option<HistoryTransform<'_>>) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Precondition("perplexity needs at least one example".into()));
    }
    let (nll, n) = total_nll(model, examples, transform)?;
    Ok((nll / n as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub perplexity_orig: f64,
    /// Mean over seeds of `ppl(perturbed) - ppl(original)`.
    pub delta_by_kind: BTreeMap<PerturbationKind, f64>,
    /// Population standard deviation of the delta over seeds.
    pub delta_std_by_kind: BTreeMap<PerturbationKind, f64>,
    /// Mean of the per-kind deltas, Identity excluded.
    pub macro_delta: f64,
}

pub fn perturbation_sensitivity(
    model: &Model,
    examples: &[Example],
    kinds: &[PerturbationKind],
    seeds: &[u64],
    perturber: &Perturber<'_>,
) -> Result<Sensitivity> {
    if kinds.is_empty() || seeds.is_empty() {
        return Err(Error::Precondition("sensitivity needs at least one kind and one seed".into()));
    }
    let base = perplexity(model, examples, None)?;
    let mut delta_by_kind = BTreeMap::new();
    let mut delta_std_by_kind = BTreeMap::new();
    for &kind in kinds {
        let deltas = seeds
            .iter()
            .map(|&seed| {
                let t = HistoryTransform { kind, seed, perturber };
                Ok(perplexity(model, examples, Some(t))? - base)
            })
            .collect::<Result<Vec<f64>>>()?;
        let (mean, std) = mean_std(&deltas);
        delta_by_kind.insert(kind, mean);
        delta_std_by_kind.insert(kind, std);
    }
    let counted: Vec<f64> = delta_by_kind
        .iter()
        .filter(|(k, _)| **k != PerturbationKind::Identity)
        .map(|(_, &d)| d)
        .collect();
    let macro_delta = if counted.is_empty() {
        0.0
    } else {
        counted.iter().sum::<f64>() / counted.len() as f64
    };
    Ok(Sensitivity {
        perplexity_orig: base,
        delta_by_kind,
        delta_std_by_kind,
        macro_delta,
    })
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Unique n-grams across all responses divided by the total token count.
pub fn distinct_n(responses: &[Utterance], n: usize) -> Result<f64> {
    if responses.is_empty() {
        return Err(Error::Precondition("distinct-n needs at least one response".into()));
    }
    if n == 0 {
        return Err(Error::Precondition("n must be at least 1".into()));
    }
    let total: usize = responses.iter().map(Vec::len).sum();
    let unique: HashSet<&[TokenId]> = responses.iter().flat_map(|r| r.windows(n)).collect();
    if unique.is_empty() {
        return Ok(0.0);
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Mean percentage of response tokens that occur in the last history
/// utterance. Empty responses count as 0.
pub fn overlap(responses: &[Utterance], histories: &[History]) -> Result<f64> {
    if responses.len() != histories.len() {
        return Err(Error::Precondition(format!(
            "{} responses but {} histories",
            responses.len(),
            histories.len()
        )));
    }
    if responses.is_empty() {
        return Err(Error::Precondition("overlap needs at least one response".into()));
    }
    let sum: f64 = responses
        .iter()
        .zip(histories)
        .map(|(r, h)| {
            let last: HashSet<TokenId> = h.last().map(|u| u.iter().copied().collect()).unwrap_or_default();
            if r.is_empty() {
                0.0
            } else {
                r.iter().filter(|t| last.contains(t)).count() as f64 / r.len() as f64
            }
        })
        .sum();
    Ok(100.0 * sum / responses.len() as f64)
}

/// Stop words plus punctuation, compared by surface form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopwordList {
    words: HashSet<String>,
}

const BUNDLED_STOPWORDS: &str = include_str!("../data/stopwords.txt");

impl StopwordList {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_STOPWORDS).expect("bundled stop-word list is valid")
    }

    pub fn from_words<I: IntoIterator<Item = S>, S: Into<String>>(words: I) -> Result<Self> {
        let words: HashSet<String> = words.into_iter().map(Into::into).map(|w| w.to_lowercase()).collect();
        if words.is_empty() {
            return Err(Error::Config("stop-word list is empty".into()));
        }
        Ok(Self { words })
    }

    /// One surface per line.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_words(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn contains(&self, surface: &str) -> bool {
        self.words.contains(surface)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Percentage of response tokens whose surface is a stop word.
pub fn stopword_rate(responses: &[Utterance], stopwords: &StopwordList, vocab: &Vocabulary) -> f64 {
    let total: usize = responses.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let hits = responses
        .iter()
        .flatten()
        .filter(|&&id| vocab.surface(id).map(|s| stopwords.contains(s)).unwrap_or(false))
        .count();
    100.0 * hits as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    Greedy,
    Beam,
    MmiAnti,
    MmiBidi,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Beam => "beam",
            DecodeMode::MmiAnti => "mmi-anti",
            DecodeMode::MmiBidi => "mmi-bidi",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "beam" => Ok(DecodeMode::Beam),
            "mmi-anti" => Ok(DecodeMode::MmiAnti),
            "mmi-bidi" => Ok(DecodeMode::MmiBidi),
            _ => Err(Error::Config(format!(
                "unknown decode mode {s:?}; expected greedy, beam, mmi-anti or mmi-bidi"
            ))),
        }
    }
}

/// Models the MMI decoders need besides the forward model.
#[derive(Debug, Clone, Copy, Default)]
pub struct AuxModels<'a> {
    pub response_lm: Option<&'a Model>,
    pub backward: Option<&'a Model>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub beam_width: usize,
    pub n_best: usize,
    pub mmi_lambda: f64,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam_width: 10,
            n_best: 10,
            mmi_lambda: 0.5,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// One response per history under the chosen decoding rule.
pub fn decode_responses(
    model: &Model,
    histories: &[History],
    mode: DecodeMode,
    aux: AuxModels<'_>,
    config: &EvalConfig,
) -> Result<Vec<Hypothesis>> {
    let lm = match mode {
        DecodeMode::MmiAnti => Some(
            aux.response_lm
                .ok_or_else(|| Error::Config("mmi-anti decoding needs a response language model".into()))?,
        ),
        _ => None,
    };
    let bwd = match mode {
        DecodeMode::MmiBidi => Some(
            aux.backward
                .ok_or_else(|| Error::Config("mmi-bidi decoding needs a backward model".into()))?,
        ),
        _ => None,
    };
    histories
        .par_iter()
        .map(|h| match mode {
            DecodeMode::Greedy => model.greedy_decode(h),
            DecodeMode::Beam => Ok(model.beam_search(h, config.beam_width, 1)?.remove(0)),
            DecodeMode::MmiAnti => {
                let lm = lm.expect("checked above");
                let n_best = model.beam_search(h, config.beam_width, config.n_best)?;
                let mut best: Option<(f64, Hypothesis)> = None;
                for hyp in n_best {
                    let s = mmi_anti_score(model, lm, h, &hyp.response(), config.mmi_lambda)?;
                    if best.as_ref().is_none_or(|(b, _)| s > *b) {
                        best = Some((s, hyp));
                    }
                }
                Ok(best.expect("beam search returns at least one hypothesis").1)
            }
            DecodeMode::MmiBidi => {
                let n_best = model.beam_search(h, config.beam_width, config.n_best)?;
                let ranked = mmi_bidi_rerank(bwd.expect("checked above"), h, &n_best, config.mmi_lambda)?;
                Ok(ranked.into_iter().next().expect("non-empty").hypothesis)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub perplexity_orig: f64,
    pub ppl_delta_by_kind: BTreeMap<PerturbationKind, f64>,
    pub ppl_delta_std_by_kind: BTreeMap<PerturbationKind, f64>,
    pub ppl_delta_macro: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub distinct_3: f64,
    pub overlap_pct: f64,
    pub stopword_pct: f64,
    pub num_examples: usize,
    pub seeds_used: Vec<u64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn csv_header(&self) -> String {
        let mut cols: Vec<String> = [
            "perplexity_orig",
            "ppl_delta_macro",
            "distinct_1",
            "distinct_2",
            "distinct_3",
            "overlap_pct",
            "stopword_pct",
            "num_examples",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        cols.extend(self.ppl_delta_by_kind.keys().map(|k| format!("delta_{k}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.perplexity_orig.to_string(),
            self.ppl_delta_macro.to_string(),
            self.distinct_1.to_string(),
            self.distinct_2.to_string(),
            self.distinct_3.to_string(),
            self.overlap_pct.to_string(),
            self.stopword_pct.to_string(),
            self.num_examples.to_string(),
        ];
        cols.extend(self.ppl_delta_by_kind.values().map(f64::to_string));
        cols.join(",")
    }

    /// Header line plus one data row.
    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", self.csv_header(), self.csv_row())
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "examples {}  ppl {:.4}  ppl-delta(macro) {:.4}\n\
             dist-1 {:.4}  dist-2 {:.4}  dist-3 {:.4}  overlap {:.2}%  stop-words {:.2}%\n",
            self.num_examples,
            self.perplexity_orig,
            self.ppl_delta_macro,
            self.distinct_1,
            self.distinct_2,
            self.distinct_3,
            self.overlap_pct,
            self.stopword_pct,
        );
        for (k, d) in &self.ppl_delta_by_kind {
            let std = self.ppl_delta_std_by_kind.get(k).copied().unwrap_or(0.0);
            s.push_str(&format!("  {k:<13} {d:+.4} (std {std:.4})\n"));
        }
        s
    }
}

/// Everything needed to produce a [`MetricsReport`] besides the models.
pub struct ReportContext<'a> {
    pub perturber: &'a Perturber<'a>,
    pub vocab: &'a Vocabulary,
    pub stopwords: &'a StopwordList,
}

/// Decodes one response per example and computes every metric; perturbation
/// sensitivity covers all eleven kinds over `config.seeds`.
pub fn full_report(
    model: &Model,
    examples: &[Example],
    mode: DecodeMode,
    aux: AuxModels<'_>,
    config: &EvalConfig,
    ctx: &ReportContext<'_>,
) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::Precondition("evaluation needs at least one example".into()));
    }
    let histories: Vec<History> = examples.iter().map(|e| e.history.clone()).collect();
    let hyps = decode_responses(model, &histories, mode, aux, config)?;
    let responses: Vec<Utterance> = hyps.iter().map(Hypothesis::response).collect();
    let sens = perturbation_sensitivity(model, examples, &PerturbationKind::ALL, &config.seeds, ctx.perturber)?;
    Ok(MetricsReport {
        perplexity_orig: sens.perplexity_orig,
        ppl_delta_by_kind: sens.delta_by_kind,
        ppl_delta_std_by_kind: sens.delta_std_by_kind,
        ppl_delta_macro: sens.macro_delta,
        distinct_1: distinct_n(&responses, 1)?,
        distinct_2: distinct_n(&responses, 2)?,
        distinct_3: distinct_n(&responses, 3)?,
        overlap_pct: overlap(&responses, &histories)?,
        stopword_pct: stopword_rate(&responses, ctx.stopwords, ctx.vocab),
        num_examples: examples.len(),
        seeds_used: config.seeds.clone(),
    })
}
