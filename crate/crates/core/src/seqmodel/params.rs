use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which conditional distribution a model represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    /// p(response | history)
    Forward,
    /// p(flattened history | response)
    Backward,
    /// p(response), decoder started from a zero state
    ResponseLm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_decode_len: usize,
    pub role: ModelRole,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, embed_dim: usize, hidden_dim: usize) -> Self {
        Self {
            vocab_size,
            embed_dim,
            hidden_dim,
            max_decode_len: 20,
            role: ModelRole::Forward,
        }
    }

    pub fn with_role(mut self, role: ModelRole) -> Self {
        self.role = role;
        self
    }

    pub fn with_max_decode_len(mut self, len: usize) -> Self {
        self.max_decode_len = len;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("model dimensions must be at least 1".into()));
        }
        if self.max_decode_len < 2 {
            return Err(Error::Config("max_decode_len must be at least 2".into()));
        }
        Ok(())
    }
}

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Precondition(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    fn uniform<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for x in &mut t.data {
            *x = rng.random_range(-scale..scale);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Input, recurrent and bias weights of a GRU cell, gates stacked as
/// `[update; reset; candidate]` along the first axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    /// `[3H x D]`
    pub w_input: Tensor,
    /// `[3H x H]`
    pub w_hidden: Tensor,
    /// `[3H]`
    pub bias: Tensor,
}

impl GruWeights {
    fn zeros(embed: usize, hidden: usize) -> Self {
        Self {
            w_input: Tensor::zeros(&[3 * hidden, embed]),
            w_hidden: Tensor::zeros(&[3 * hidden, hidden]),
            bias: Tensor::zeros(&[3 * hidden]),
        }
    }
}

/// Every weight tensor of the encoder-decoder. Gradients share this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    /// `[V x D]`, shared by encoder and decoder inputs.
    pub embedding: Tensor,
    pub encoder: GruWeights,
    pub decoder: GruWeights,
    /// `[H x V]`
    pub out_weight: Tensor,
    /// `[V]`
    pub out_bias: Tensor,
}

/// Same named-tensor layout as [`Parameters`].
pub type Gradients = Parameters;

pub const TENSOR_NAMES: [&str; 9] = [
    "embedding",
    "encoder.w_input",
    "encoder.w_hidden",
    "encoder.bias",
    "decoder.w_input",
    "decoder.w_hidden",
    "decoder.bias",
    "output.weight",
    "output.bias",
];

impl Parameters {
    /// All-zero tensors; as a model this gives a uniform output distribution.
    pub fn zeros(config: &ModelConfig) -> Self {
        let (v, d, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        Self {
            embedding: Tensor::zeros(&[v, d]),
            encoder: GruWeights::zeros(d, h),
            decoder: GruWeights::zeros(d, h),
            out_weight: Tensor::zeros(&[h, v]),
            out_bias: Tensor::zeros(&[v]),
        }
    }

    pub fn random<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let (v, d, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        let cell = |rng: &mut R| GruWeights {
            w_input: Tensor::uniform(&[3 * h, d], 1.0 / (d as f64).sqrt(), rng),
            w_hidden: Tensor::uniform(&[3 * h, h], 1.0 / (h as f64).sqrt(), rng),
            bias: Tensor::zeros(&[3 * h]),
        };
        Self {
            embedding: Tensor::uniform(&[v, d], 0.5, rng),
            encoder: cell(rng),
            decoder: cell(rng),
            out_weight: Tensor::uniform(&[h, v], 1.0 / (h as f64).sqrt(), rng),
            out_bias: Tensor::zeros(&[v]),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 9] {
        [
            (TENSOR_NAMES[0], &self.embedding),
            (TENSOR_NAMES[1], &self.encoder.w_input),
            (TENSOR_NAMES[2], &self.encoder.w_hidden),
            (TENSOR_NAMES[3], &self.encoder.bias),
            (TENSOR_NAMES[4], &self.decoder.w_input),
            (TENSOR_NAMES[5], &self.decoder.w_hidden),
            (TENSOR_NAMES[6], &self.decoder.bias),
            (TENSOR_NAMES[7], &self.out_weight),
            (TENSOR_NAMES[8], &self.out_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 9] {
        [
            (TENSOR_NAMES[0], &mut self.embedding),
            (TENSOR_NAMES[1], &mut self.encoder.w_input),
            (TENSOR_NAMES[2], &mut self.encoder.w_hidden),
            (TENSOR_NAMES[3], &mut self.encoder.bias),
            (TENSOR_NAMES[4], &mut self.decoder.w_input),
            (TENSOR_NAMES[5], &mut self.decoder.w_hidden),
            (TENSOR_NAMES[6], &mut self.decoder.bias),
            (TENSOR_NAMES[7], &mut self.out_weight),
            (TENSOR_NAMES[8], &mut self.out_bias),
        ]
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Parameters, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.tensors() {
            if t.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    tensor: name.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Errors unless every tensor has the shape `config` implies.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Parameters::zeros(config);
        for ((name, t), (_, e)) in self.tensors().into_iter().zip(expected.tensors()) {
            if t.shape() != e.shape() {
                return Err(Error::ShapeMismatch {
                    tensor: name.to_string(),
                    expected: e.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_follow_config() {
        let cfg = ModelConfig::new(7, 3, 4);
        let p = Parameters::zeros(&cfg);
        assert_eq!(p.embedding.shape(), &[7, 3]);
        assert_eq!(p.encoder.w_input.shape(), &[12, 3]);
        assert_eq!(p.decoder.w_hidden.shape(), &[12, 4]);
        assert_eq!(p.out_weight.shape(), &[4, 7]);
        assert_eq!(p.out_bias.shape(), &[7]);
        assert!(p.check_shapes(&cfg).is_ok());
        assert!(matches!(
            p.check_shapes(&ModelConfig::new(8, 3, 4)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn arithmetic_helpers() {
        let cfg = ModelConfig::new(6, 2, 2);
        let mut a = Parameters::random(&cfg, &mut crate::rng_from(0));
        let b = a.clone();
        a.add_scaled(&b, -1.0);
        assert_eq!(a.l2_norm(), 0.0);
        let mut c = b.clone();
        c.scale(2.0);
        assert!((c.l2_norm() - 2.0 * b.l2_norm()).abs() < 1e-12);
        c.out_bias.data_mut()[0] = f64::NAN;
        assert!(matches!(c.check_finite(), Err(Error::NonFinite { tensor }) if tensor == "output.bias"));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(0, 1, 1).validate().is_err());
        assert!(ModelConfig::new(6, 1, 1).with_max_decode_len(1).validate().is_err());
        assert!(ModelConfig::new(6, 1, 1).validate().is_ok());
    }
}
