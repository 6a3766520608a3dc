//! Adam, MLE pretraining with validation early stopping, IAT fine-tuning and
//! auxiliary-model training.
//!
//! Per-example work inside a batch runs on the rayon pool in fixed-size
//! groups whose gradients are summed in group order, so results do not depend
//! on the number of threads. Every random draw comes from a generator seeded
//! by [`derive_seed`] over `(seed, epoch, iteration, example)`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, History, PosLexicon, Utterance};
use crate::error::{Error, Result};
use crate::eval::perplexity;
use crate::objectives::{reward_with, weighted_iat_gradient, IatBatchStats, RewardRecord, RewardSettings};
use crate::perturb::{sample_kind, PerturbationKind, Perturber};
use crate::seqmodel::{Gradients, Model, ModelConfig, ModelRole, Parameters};
use crate::{derive_seed, rng_from};

/// Examples per parallel work unit. Fixed so that the floating-point
/// summation order never depends on the thread count.
const GROUP_SIZE: usize = 4;

// Stream tags for derive_seed.
const STREAM_SHUFFLE: u64 = 1;
const STREAM_IAT: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSchedule {
    SupervisedOnly,
    SelfSupervisedOnly,
    Alternate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IatMode {
    /// `Y` is the gold response.
    Supervised,
    /// `Y` is sampled from the model.
    SelfSupervised,
}

impl ModeSchedule {
    /// Mode of the 1-based `iteration`. `Alternate` starts supervised.
    pub fn mode_for(self, iteration: u64) -> IatMode {
        match self {
            ModeSchedule::SupervisedOnly => IatMode::Supervised,
            ModeSchedule::SelfSupervisedOnly => IatMode::SelfSupervised,
            ModeSchedule::Alternate if iteration % 2 == 1 => IatMode::Supervised,
            ModeSchedule::Alternate => IatMode::SelfSupervised,
        }
    }
}

impl fmt::Display for ModeSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModeSchedule::SupervisedOnly => "supervised_only",
            ModeSchedule::SelfSupervisedOnly => "self_supervised_only",
            ModeSchedule::Alternate => "alternate",
        })
    }
}

impl FromStr for ModeSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised_only" => Ok(ModeSchedule::SupervisedOnly),
            "self_supervised_only" => Ok(ModeSchedule::SelfSupervisedOnly),
            "alternate" => Ok(ModeSchedule::Alternate),
            _ => Err(Error::Config(format!(
                "unknown mode schedule {s:?}; expected supervised_only, self_supervised_only or alternate"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    /// Validation checks without improvement before stopping.
    pub patience: usize,
    pub iat_margin: f64,
    pub enabled_perturbations: Vec<PerturbationKind>,
    pub sample_temperature: f64,
    pub mode_schedule: ModeSchedule,
    pub grad_clip: f64,
    pub seed: u64,
    /// Divide both NLLs by the response length before taking the reward.
    pub length_normalized_reward: bool,
    /// Standardize rewards to zero mean and unit variance within a batch.
    pub standardize_rewards: bool,
    /// Cap on mini-batches per epoch; `None` uses the whole training split.
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 10,
            patience: 3,
            iat_margin: 1.0,
            enabled_perturbations: PerturbationKind::ALL.to_vec(),
            sample_temperature: 1.0,
            mode_schedule: ModeSchedule::Alternate,
            grad_clip: 5.0,
            seed: 0,
            length_normalized_reward: false,
            standardize_rewards: false,
            max_batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if !(self.iat_margin >= 0.0) || !self.iat_margin.is_finite() {
            return fail(format!("iat_margin must be finite and non-negative, got {}", self.iat_margin));
        }
        if self.enabled_perturbations.is_empty() {
            return fail("enabled_perturbations is empty".into());
        }
        if !(self.sample_temperature > 0.0) {
            return fail(format!("sample_temperature must be positive, got {}", self.sample_temperature));
        }
        if !(self.grad_clip > 0.0) {
            return fail(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if self.max_batches_per_epoch == Some(0) {
            return fail("max_batches_per_epoch must be at least 1".into());
        }
        Ok(())
    }

    /// Parses a JSON object; missing keys take their defaults, unknown keys
    /// are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    fn reward_settings(&self) -> RewardSettings {
        RewardSettings {
            margin: self.iat_margin,
            length_normalized: self.length_normalized_reward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Move against the gradient (minimize).
    Descend,
    /// Move along the gradient (maximize).
    Ascend,
}

/// Adam moments co-shaped with the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Parameters,
    pub v: Parameters,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            m: Parameters::zeros(config),
            v: Parameters::zeros(config),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update after clipping the gradient's global L2
/// norm to `config.grad_clip`.
pub fn adam_step(
    params: &mut Parameters,
    grads: &Gradients,
    state: &mut OptimizerState,
    config: &TrainConfig,
    direction: Direction,
) -> Result<()> {
    grads.check_finite()?;
    let norm = grads.l2_norm();
    let clip = if norm > config.grad_clip { config.grad_clip / norm } else { 1.0 };
    let sign = match direction {
        Direction::Descend => clip,
        Direction::Ascend => -clip,
    };
    state.step += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - b2.powi(state.step.min(i32::MAX as u64) as i32);
    let lr = config.learning_rate;
    let eps = config.adam_eps;
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().into_iter().zip(state.v.tensors_mut()));
    for (((_, p), (_, g)), ((_, m), (_, v))) in tensors {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let g = sign * g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            // lr = 0 must leave the parameters bitwise unchanged
            if update != 0.0 {
                p[i] -= update;
            }
        }
    }
    params.check_finite()
}

/// Patience-based early stopping on a quantity to minimize.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    bad_checks: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            bad_checks: 0,
        }
    }

    /// Records a check; returns whether it improved on the best so far.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value < self.best {
            self.best = value;
            self.best_epoch = Some(epoch);
            self.bad_checks = 0;
            true
        } else {
            self.bad_checks += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_checks >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ppl: f64,
    pub mean_reward: f64,
    pub mean_penalty: f64,
    pub seconds: f64,
}

/// Per-epoch history of one training run. `best_epoch` is the 1-based epoch
/// whose parameters were returned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_valid_ppl: f64,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn best_valid_ppl(&self) -> f64 {
        self.records[self.best_epoch - 1].valid_ppl
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,valid_ppl,mean_reward,mean_penalty,seconds\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{:.3}\n",
                r.epoch, r.train_loss, r.valid_ppl, r.mean_reward, r.mean_penalty, r.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Equality ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        let key = |l: &TrainLog| -> Vec<[u64; 5]> {
            l.records
                .iter()
                .map(|r| {
                    [
                        r.epoch as u64,
                        r.train_loss.to_bits(),
                        r.valid_ppl.to_bits(),
                        r.mean_reward.to_bits(),
                        r.mean_penalty.to_bits(),
                    ]
                })
                .collect()
        };
        self.initial_valid_ppl.to_bits() == other.initial_valid_ppl.to_bits()
            && self.best_epoch == other.best_epoch
            && key(self) == key(other)
    }
}

/// Sums `f` over `items` in fixed groups, in order.
fn grouped_sum<T: Sync, A: Send>(
    config: &ModelConfig,
    items: &[T],
    f: impl Fn(&T, &mut Gradients) -> Result<A> + Sync,
) -> Result<(Gradients, Vec<A>)> {
    let parts = items
        .par_chunks(GROUP_SIZE)
        .map(|chunk| {
            let mut g = Parameters::zeros(config);
            let out = chunk.iter().map(|it| f(it, &mut g)).collect::<Result<Vec<A>>>()?;
            Ok((g, out))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = Parameters::zeros(config);
    let mut outs = Vec::with_capacity(items.len());
    for (g, out) in parts {
        total.add_scaled(&g, 1.0);
        outs.extend(out);
    }
    Ok((total, outs))
}

fn check_splits(train: &[Example], valid: &[Example]) -> Result<()> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Precondition("training and validation splits must be non-empty".into()));
    }
    Ok(())
}

fn epoch_batches(n: usize, config: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(derive_seed(config.seed, &[STREAM_SHUFFLE, epoch as u64])));
    let mut batches: Vec<Vec<usize>> = order.chunks(config.batch_size).map(<[usize]>::to_vec).collect();
    if let Some(cap) = config.max_batches_per_epoch {
        batches.truncate(cap);
    }
    batches
}

/// Mean per-token NLL gradient of one batch (as an ascent direction on the
/// log-likelihood) and the batch's mean per-token NLL.
pub fn mle_batch_gradient(model: &Model, batch: &[&Example]) -> Result<(Gradients, f64)> {
    let tokens: usize = batch.iter().map(|e| e.response.len() + 1).sum();
    let w = 1.0 / tokens as f64;
    let (grads, lps) = grouped_sum(model.config(), batch, |ex, g| {
        let (source, target) = model.scoring_pair(&ex.history, &ex.response)?;
        let lp = model.accumulate_gradient(&source, &target, &vec![w; target.len()], g)?;
        Ok(lp.iter().sum::<f64>())
    })?;
    grads.check_finite()?;
    Ok((grads, -lps.iter().sum::<f64>() / tokens as f64))
}

/// MLE training with validation-perplexity early stopping. Returns the
/// parameters of the best completed epoch.
pub fn pretrain_mle(model: &Model, train: &[Example], valid: &[Example], config: &TrainConfig) -> Result<(Parameters, TrainLog)> {
    config.validate()?;
    check_splits(train, valid)?;
    run_epochs(model, valid, config, |work, opt, epoch, _| {
        let mut loss = 0.0;
        let batches = epoch_batches(train.len(), config, epoch);
        for idx in &batches {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            let (grads, l) = mle_batch_gradient(work, &batch)?;
            adam_step(work.params_mut(), &grads, opt, config, Direction::Ascend)?;
            loss += l;
        }
        Ok(EpochStats {
            train_loss: loss / batches.len() as f64,
            mean_reward: 0.0,
            mean_penalty: 0.0,
        })
    })
}

/// MLE training of a backward or response-LM model. The model's role decides
/// what is scored: the flattened history given the response, or the response
/// alone.
pub fn train_auxiliary(model: &Model, train: &[Example], valid: &[Example], config: &TrainConfig) -> Result<(Parameters, TrainLog)> {
    if model.role() == ModelRole::Forward {
        return Err(Error::Precondition(
            "auxiliary training needs a backward or response_lm model, got forward".into(),
        ));
    }
    pretrain_mle(model, train, valid, config)
}

struct EpochStats {
    train_loss: f64,
    mean_reward: f64,
    mean_penalty: f64,
}

fn run_epochs(
    model: &Model,
    valid: &[Example],
    config: &TrainConfig,
    mut epoch_fn: impl FnMut(&mut Model, &mut OptimizerState, usize, &mut u64) -> Result<EpochStats>,
) -> Result<(Parameters, TrainLog)> {
    let mut work = model.clone();
    let mut opt = OptimizerState::new(model.config());
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best: Option<Parameters> = None;
    let mut iteration = 0u64;
    let mut log = TrainLog {
        initial_valid_ppl: perplexity(model, valid, None)?,
        records: Vec::new(),
        best_epoch: 0,
    };
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let stats = epoch_fn(&mut work, &mut opt, epoch, &mut iteration)?;
        let valid_ppl = perplexity(&work, valid, None)?;
        log.records.push(EpochRecord {
            epoch,
            train_loss: stats.train_loss,
            valid_ppl,
            mean_reward: stats.mean_reward,
            mean_penalty: stats.mean_penalty,
            seconds: start.elapsed().as_secs_f64(),
        });
        if stopper.observe(epoch, valid_ppl) {
            best = Some(work.params().clone());
        }
        if stopper.should_stop() {
            break;
        }
    }
    match (best, stopper.best_epoch()) {
        (Some(params), Some(epoch)) => {
            log.best_epoch = epoch;
            Ok((params, log))
        }
        _ => Err(Error::Config("max_epochs must be at least 1".into())),
    }
}

/// One prepared IAT example: original and perturbed histories and the
/// response the reward is computed on.
#[derive(Debug, Clone, PartialEq)]
pub struct IatSample {
    pub history: History,
    pub perturbed: History,
    pub response: Utterance,
    pub kind: PerturbationKind,
}

/// Draws the perturbation kind, builds `X'` and picks `Y` for each example.
/// Self-supervised examples whose sample is empty are resampled once and
/// then skipped.
pub fn prepare_iat_samples(
    model: &Model,
    batch: &[&Example],
    mode: IatMode,
    perturber: &Perturber<'_>,
    config: &TrainConfig,
    stream: &[u64],
) -> Result<Vec<IatSample>> {
    let prepared = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut parts = stream.to_vec();
            parts.push(i as u64);
            let mut rng = rng_from(derive_seed(config.seed, &parts));
            let kind = sample_kind(&config.enabled_perturbations, &mut rng)?;
            let perturbed = perturber.perturb_history(&ex.history, kind, &mut rng)?;
            let response = match mode {
                IatMode::Supervised => ex.response.clone(),
                IatMode::SelfSupervised => {
                    let mut y = model.sample_decode(&ex.history, config.sample_temperature, &mut rng)?.response();
                    if y.is_empty() {
                        y = model.sample_decode(&ex.history, config.sample_temperature, &mut rng)?.response();
                    }
                    if y.is_empty() {
                        return Ok(None);
                    }
                    y
                }
            };
            Ok(Some(IatSample {
                history: ex.history.clone(),
                perturbed,
                response,
                kind,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(prepared.into_iter().flatten().collect())
}

/// Batch-mean IAT ascent direction, the per-example reward records and the
/// mean per-token NLL of `Y` under the original history.
pub fn iat_batch_gradient(
    model: &Model,
    samples: &[IatSample],
    config: &TrainConfig,
) -> Result<(Gradients, Vec<RewardRecord>, f64)> {
    if samples.is_empty() {
        return Err(Error::Precondition("every example in the IAT batch was skipped".into()));
    }
    let settings = config.reward_settings();
    let records = samples
        .par_iter()
        .map(|s| reward_with(model, &s.history, &s.perturbed, &s.response, settings))
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = if config.standardize_rewards {
        let rewards: Vec<f64> = records.iter().map(|r| r.reward).collect();
        let (mean, std) = crate::eval::mean_std(&rewards);
        rewards.iter().map(|r| if std > 0.0 { (r - mean) / std } else { 0.0 }).collect()
    } else {
        records.iter().map(|r| r.reward).collect()
    };
    let items: Vec<(&IatSample, f64, f64)> = samples
        .iter()
        .zip(&weights)
        .zip(&records)
        .map(|((s, &w), r)| (s, w, r.penalty))
        .collect();
    let (mut grads, _) = grouped_sum(model.config(), &items, |(s, w, p), g| {
        let one = weighted_iat_gradient(model, &s.history, &s.perturbed, &s.response, *w, *p)?;
        g.add_scaled(&one, 1.0);
        Ok(())
    })?;
    grads.scale(1.0 / samples.len() as f64);
    let tokens: usize = samples.iter().map(|s| s.response.len() + 1).sum();
    let nll_orig: f64 = records
        .iter()
        .zip(samples)
        .map(|(r, s)| if config.length_normalized_reward { r.nll_orig * (s.response.len() + 1) as f64 } else { r.nll_orig })
        .sum();
    Ok((grads, records, nll_orig / tokens as f64))
}

/// IAT fine-tuning. Each iteration perturbs every history once, takes `Y`
/// from the gold data or from the model according to the schedule, and takes
/// one Adam ascent step on the batch-mean IAT gradient. Early stopping uses
/// gold-response perplexity under the original histories; the logged train
/// loss is the mean per-token NLL of `Y` given `X`.
pub fn train_iat(
    model: &Model,
    train: &[Example],
    valid: &[Example],
    pool: &[Utterance],
    lexicon: &PosLexicon,
    config: &TrainConfig,
) -> Result<(Parameters, TrainLog)> {
    config.validate()?;
    check_splits(train, valid)?;
    let perturber = Perturber::new(pool, lexicon, model.config().vocab_size)?;
    run_epochs(model, valid, config, |work, opt, epoch, iteration| {
        let batches = epoch_batches(train.len(), config, epoch);
        let mut loss = 0.0;
        let mut all: Vec<(PerturbationKind, RewardRecord)> = Vec::new();
        for idx in &batches {
            *iteration += 1;
            let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            let mode = config.mode_schedule.mode_for(*iteration);
            let samples = prepare_iat_samples(work, &batch, mode, &perturber, config, &[STREAM_IAT, *iteration])?;
            let (grads, records, nll) = iat_batch_gradient(work, &samples, config)?;
            adam_step(work.params_mut(), &grads, opt, config, Direction::Ascend)?;
            loss += nll;
            all.extend(samples.iter().map(|s| s.kind).zip(records));
        }
        let stats = IatBatchStats::from_records(&all);
        Ok(EpochStats {
            train_loss: loss / batches.len() as f64,
            mean_reward: stats.mean_reward,
            mean_penalty: stats.mean_penalty,
        })
    })
}
