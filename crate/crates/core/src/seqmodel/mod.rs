//! GRU encoder-decoder without attention.
//!
//! The encoder reads the flattened history (`u1 SEP u2 SEP ... un`) from a
//! zero state; its final hidden state initializes the decoder, which is fed
//! `BOS` followed by the previous gold (or generated) token. A single
//! projection maps decoder states to vocabulary logits. All arithmetic is
//! `f64` and every pass is a pure function of parameters and inputs.

mod checkpoint;
mod decode;
mod gru;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{sample_from_logits, Hypothesis};
pub use params::{GruWeights, Gradients, ModelConfig, ModelRole, Parameters, Tensor, TENSOR_NAMES};

use rand::Rng;

use crate::corpus::{History, TokenId, Utterance, BOS, EOS, SEP};
use crate::error::{Error, Result};
use gru::{axpy, dot, StepCache};

/// `u1 SEP u2 SEP ... un`.
pub fn flatten_history(history: &History) -> Result<Vec<TokenId>> {
    if history.is_empty() {
        return Err(Error::Precondition("history must not be empty".into()));
    }
    let mut out = Vec::with_capacity(history.iter().map(|u| u.len() + 1).sum());
    for (i, u) in history.iter().enumerate() {
        if i > 0 {
            out.push(SEP);
        }
        out.extend_from_slice(u);
    }
    Ok(out)
}

/// Final encoder hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState(pub Vec<f64>);

/// A response with one loss weight per scored token (response tokens then EOS).
#[derive(Debug, Clone, Copy)]
pub struct WeightedExample<'a> {
    pub history: &'a History,
    pub response: &'a Utterance,
    pub weights: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Parameters,
}

impl Model {
    pub fn new(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    /// Small random weights drawn from a seeded generator.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Parameters::random(&config, &mut crate::rng_from(seed));
        Ok(Self { config, params })
    }

    /// All-zero weights: every output distribution is uniform.
    pub fn uniform(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Parameters::zeros(&config);
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn role(&self) -> ModelRole {
        self.config.role
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Parameters) -> Result<()> {
        params.check_shapes(&self.config)?;
        self.params = params;
        Ok(())
    }

    pub fn into_parts(self) -> (ModelConfig, Parameters) {
        (self.config, self.params)
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        let size = self.config.vocab_size;
        match ids.iter().find(|&&id| id >= size) {
            Some(&id) => Err(Error::TokenOutOfRange { id, size }),
            None => Ok(()),
        }
    }

    fn embedding_row(&self, id: TokenId) -> &[f64] {
        let d = self.config.embed_dim;
        &self.params.embedding.data()[id * d..(id + 1) * d]
    }

    fn run_encoder(&self, source: &[TokenId]) -> (Vec<f64>, Vec<StepCache>) {
        let mut h = vec![0.0; self.config.hidden_dim];
        let mut caches = Vec::with_capacity(source.len());
        for &t in source {
            let (next, cache) = gru::step(&self.params.encoder, self.embedding_row(t), &h);
            caches.push(cache);
            h = next;
        }
        (h, caches)
    }

    /// Recurrent pass over `source` from a zero state. A response LM has no
    /// encoder and always returns the zero state.
    pub fn encode(&self, source: &[TokenId]) -> Result<EncoderState> {
        if source.is_empty() {
            return Err(Error::Precondition("cannot encode an empty sequence".into()));
        }
        self.check_ids(source)?;
        if self.config.role == ModelRole::ResponseLm {
            return Ok(EncoderState(vec![0.0; self.config.hidden_dim]));
        }
        Ok(EncoderState(self.run_encoder(source).0))
    }

    fn uses_encoder(&self, source: &[TokenId]) -> bool {
        self.config.role != ModelRole::ResponseLm && !source.is_empty()
    }

    /// Decoder start state for a conditioning sequence; zero when the model
    /// has no encoder or the sequence is empty.
    pub fn initial_state(&self, source: &[TokenId]) -> Result<Vec<f64>> {
        self.check_ids(source)?;
        if self.uses_encoder(source) {
            Ok(self.run_encoder(source).0)
        } else {
            Ok(vec![0.0; self.config.hidden_dim])
        }
    }

    /// Conditioning and target sequences for a (history, response) pair
    /// according to the model's role. The target ends with EOS.
    pub fn scoring_pair(&self, history: &History, response: &Utterance) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
        if response.is_empty() {
            return Err(Error::Precondition("response must not be empty".into()));
        }
        self.pair_allowing_empty(history, response)
    }

    fn pair_allowing_empty(&self, history: &History, response: &Utterance) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
        let flat = flatten_history(history)?;
        let (source, mut target) = match self.config.role {
            ModelRole::Forward => (flat, response.clone()),
            ModelRole::Backward => (response.clone(), flat),
            ModelRole::ResponseLm => (Vec::new(), response.clone()),
        };
        target.push(EOS);
        Ok((source, target))
    }

    /// Conditioning sequence used when decoding from a history.
    pub fn decode_source(&self, history: &History) -> Result<Vec<TokenId>> {
        match self.config.role {
            ModelRole::Forward => flatten_history(history),
            ModelRole::ResponseLm => Ok(Vec::new()),
            ModelRole::Backward => Err(Error::Precondition(
                "a backward model decodes from responses, not histories".into(),
            )),
        }
    }

    /// Teacher-forced `log P(y_i | y_<i, X)` for every response token and
    /// the closing EOS.
    pub fn sequence_log_probs(&self, history: &History, response: &Utterance) -> Result<Vec<f64>> {
        let (source, target) = self.scoring_pair(history, response)?;
        self.score_tokens(&source, &target)
    }

    /// Total log-probability of `response` followed by EOS. Unlike
    /// [`Model::sequence_log_probs`] an empty response is allowed (a
    /// backward model then starts from the zero state).
    pub fn response_log_prob(&self, history: &History, response: &Utterance) -> Result<f64> {
        let (source, target) = self.pair_allowing_empty(history, response)?;
        Ok(self.score_tokens(&source, &target)?.iter().sum())
    }

    /// Teacher-forced log-probabilities of `target` exactly as given.
    pub fn score_tokens(&self, source: &[TokenId], target: &[TokenId]) -> Result<Vec<f64>> {
        self.forward_backward(source, target, None)
    }

    /// Adds the gradient of `sum_i weights[i] * log P(target_i | ...)` to
    /// `grads`, returning the per-token log-probabilities.
    pub fn accumulate_gradient(
        &self,
        source: &[TokenId],
        target: &[TokenId],
        weights: &[f64],
        grads: &mut Gradients,
    ) -> Result<Vec<f64>> {
        if weights.len() != target.len() {
            return Err(Error::Precondition(format!(
                "{} weights for {} target tokens",
                weights.len(),
                target.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
            return Err(Error::Precondition(format!("non-finite loss weight {w}")));
        }
        self.forward_backward(source, target, Some((weights, grads)))
    }

    /// Exact gradient of `sum_examples sum_i w_i log P(y_i | y_<i, X)`.
    pub fn backward(&self, batch: &[WeightedExample<'_>]) -> Result<Gradients> {
        let mut grads = Parameters::zeros(&self.config);
        for ex in batch {
            let (source, target) = self.scoring_pair(ex.history, ex.response)?;
            self.accumulate_gradient(&source, &target, ex.weights, &mut grads)?;
        }
        grads.check_finite()?;
        Ok(grads)
    }

    /// Gradient of `weight * log P(response | history)`.
    pub fn example_gradient(&self, history: &History, response: &Utterance, weight: f64) -> Result<Gradients> {
        let weights = vec![weight; response.len() + 1];
        self.backward(&[WeightedExample {
            history,
            response,
            weights: &weights,
        }])
    }

    /// One decoder step: next hidden state and log-softmax over the vocabulary.
    pub(crate) fn decoder_step(&self, h: &[f64], prev: TokenId) -> (Vec<f64>, Vec<f64>) {
        let (h_new, _) = gru::step(&self.params.decoder, self.embedding_row(prev), h);
        let logits = self.logits(&h_new);
        (h_new, log_softmax(&logits))
    }

    pub(crate) fn logits(&self, h: &[f64]) -> Vec<f64> {
        let v = self.config.vocab_size;
        let w = self.params.out_weight.data();
        let mut logits = self.params.out_bias.data().to_vec();
        for (k, &hk) in h.iter().enumerate() {
            axpy(hk, &w[k * v..(k + 1) * v], &mut logits);
        }
        logits
    }

    /// Next-token distribution after decoding `prefix` from `history`.
    pub fn next_token_probs(&self, history: &History, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let source = self.decode_source(history)?;
        self.check_ids(prefix)?;
        let mut h = self.initial_state(&source)?;
        let mut prev = BOS;
        for &t in prefix {
            h = self.decoder_step(&h, prev).0;
            prev = t;
        }
        let (_, logp) = self.decoder_step(&h, prev);
        Ok(logp.into_iter().map(f64::exp).collect())
    }

    fn forward_backward(
        &self,
        source: &[TokenId],
        target: &[TokenId],
        grad: Option<(&[f64], &mut Gradients)>,
    ) -> Result<Vec<f64>> {
        self.check_ids(source)?;
        self.check_ids(target)?;
        let v = self.config.vocab_size;
        let d = self.config.embed_dim;
        let hd = self.config.hidden_dim;
        let want_grad = grad.is_some();

        let uses_encoder = self.uses_encoder(source);
        let (h0, enc_caches) = if uses_encoder {
            self.run_encoder(source)
        } else {
            (vec![0.0; hd], Vec::new())
        };

        let mut h = h0;
        let mut prev = BOS;
        let mut log_probs = Vec::with_capacity(target.len());
        let mut dec_inputs = Vec::with_capacity(target.len());
        let mut dec_caches = Vec::with_capacity(target.len());
        let mut hiddens = Vec::with_capacity(target.len());
        let mut probs = Vec::with_capacity(target.len());
        for &y in target {
            let (h_new, cache) = gru::step(&self.params.decoder, self.embedding_row(prev), &h);
            let logits = self.logits(&h_new);
            let lsm = log_softmax(&logits);
            log_probs.push(lsm[y]);
            if want_grad {
                dec_inputs.push(prev);
                dec_caches.push(cache);
                hiddens.push(h_new.clone());
                probs.push(lsm.iter().map(|x| x.exp()).collect::<Vec<_>>());
            }
            h = h_new;
            prev = y;
        }
        if let Some(bad) = log_probs.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                tensor: format!("decoder log-probabilities ({bad})"),
            });
        }

        let Some((weights, grads)) = grad else {
            return Ok(log_probs);
        };

        let w_out = self.params.out_weight.data();
        let mut dh_next = vec![0.0; hd];
        let mut dlogit = vec![0.0; v];
        for i in (0..target.len()).rev() {
            let w = weights[i];
            for (dl, p) in dlogit.iter_mut().zip(&probs[i]) {
                *dl = -w * p;
            }
            dlogit[target[i]] += w;

            for (gb, dl) in grads.out_bias.data_mut().iter_mut().zip(&dlogit) {
                *gb += dl;
            }
            let gw = grads.out_weight.data_mut();
            let mut dh = dh_next;
            for k in 0..hd {
                axpy(hiddens[i][k], &dlogit, &mut gw[k * v..(k + 1) * v]);
                dh[k] += dot(&w_out[k * v..(k + 1) * v], &dlogit);
            }
            let mut dx = vec![0.0; d];
            dh_next = gru::step_backward(
                &self.params.decoder,
                &mut grads.decoder,
                self.embedding_row(dec_inputs[i]),
                &dec_caches[i],
                &dh,
                &mut dx,
            );
            let row = dec_inputs[i];
            axpy(1.0, &dx, &mut grads.embedding.data_mut()[row * d..(row + 1) * d]);
        }

        if uses_encoder {
            let mut ds = dh_next;
            for j in (0..source.len()).rev() {
                let mut dx = vec![0.0; d];
                ds = gru::step_backward(
                    &self.params.encoder,
                    &mut grads.encoder,
                    self.embedding_row(source[j]),
                    &enc_caches[j],
                    &ds,
                    &mut dx,
                );
                let row = source[j];
                axpy(1.0, &dx, &mut grads.embedding.data_mut()[row * d..(row + 1) * d]);
            }
        }
        Ok(log_probs)
    }
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in values.iter().enumerate().skip(1) {
        if x > values[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Ancestral sample at `temperature`; see [`Hypothesis`].
    pub fn sample_decode<R: Rng + ?Sized>(&self, history: &History, temperature: f64, rng: &mut R) -> Result<Hypothesis> {
        let source = self.decode_source(history)?;
        self.sample_from_source(&source, temperature, rng)
    }
}
