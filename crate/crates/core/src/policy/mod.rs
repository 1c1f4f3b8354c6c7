//! The trainable translation model `p(y | x, w)`.
//!
//! A small pre-norm transformer encoder-decoder with sinusoidal positions.
//! All weights live in one flat `f64` vector whose layout is a pure function
//! of the [`Hyperparams`]; the network itself can run in `f64` or `f32`.

mod decode;
pub(crate) mod layout;
pub(crate) mod net;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use decode::{DecodeConfig, DecodeMethod, Generation};

use crate::corpus::{CorpusError, Vocabulary, BOS, EOS, RESERVED};
use crate::scalar::Scalar;
use layout::Layout;
use net::Net;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("sequence of length {len} exceeds the model maximum of {max}")]
    Length { len: usize, max: usize },
    #[error("source sequence is empty")]
    EmptySource,
    #[error("target sequence must be non-empty and end with EOS")]
    MissingEos,
    #[error("token {token} is outside a vocabulary of {size}")]
    TokenRange { token: u32, size: usize },
    #[error("invalid hyperparameters: {0}")]
    Config(String),
    #[error("expected {expected} parameters, got {actual}")]
    ParameterCount { expected: usize, actual: usize },
    #[error("parameter {index} is not finite")]
    NonFinite { index: usize },
    #[error(transparent)]
    Codec(#[from] CorpusError),
}

/// Architecture sizes that do not depend on the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Longest source (including EOS) or decoder input the model accepts.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 2,
            d_ff: 128,
            max_len: 24,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Hyperparams {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl Hyperparams {
    pub fn new(config: ModelConfig, src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            layers: config.layers,
            d_model: config.d_model,
            heads: config.heads,
            d_ff: config.d_ff,
            max_len: config.max_len,
            src_vocab,
            tgt_vocab,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::Config(m.into()));
        if self.d_model == 0 || self.heads == 0 || self.d_ff == 0 || self.max_len < 2 {
            return bad("d_model, heads and d_ff must be positive and max_len >= 2");
        }
        if self.d_model % self.heads != 0 {
            return bad("d_model must be divisible by heads");
        }
        if self.src_vocab < RESERVED.len() || self.tgt_vocab < RESERVED.len() {
            return bad("vocabularies must contain the reserved tokens");
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

/// Next-token probabilities over the target vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution(pub Vec<f64>);

impl TokenDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    /// Highest-probability token; ties go to the lowest index.
    pub fn argmax(&self) -> u32 {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate() {
        if p > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Numerically stable `log softmax` of one row.
pub(crate) fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let z = logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln() + max;
    logits.iter().map(|&l| l - z).collect()
}

#[derive(Debug, Clone)]
pub struct Policy {
    hp: Hyperparams,
    layout: Layout,
    params: Vec<f64>,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
}

impl PartialEq for Policy {
    fn eq(&self, other: &Self) -> bool {
        self.hp == other.hp
            && self.src_vocab == other.src_vocab
            && self.tgt_vocab == other.tgt_vocab
            && self
                .params
                .iter()
                .map(|p| p.to_bits())
                .eq(other.params.iter().map(|p| p.to_bits()))
    }
}

impl Policy {
    /// Randomly initialized policy. Matrices are uniform with variance
    /// `1 / fan_in`, embeddings uniform with unit variance, norm gains one
    /// and all biases zero.
    pub fn init(
        config: ModelConfig,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
        seed: u64,
    ) -> Result<Self, PolicyError> {
        let hp = Hyperparams::new(config, src_vocab.len(), tgt_vocab.len());
        hp.validate()?;
        let layout = Layout::new(&hp);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total];
        let emb_bound = num_traits::Float::sqrt(3.0f64);
        let emb_len = (hp.src_vocab + hp.tgt_vocab) * hp.d_model;
        for p in &mut params[layout.src_embed..layout.src_embed + emb_len] {
            *p = rng.gen_range(-emb_bound..emb_bound);
        }
        for &(at, len, fan_in) in &layout.matrices {
            let bound = num_traits::Float::sqrt(3.0 / fan_in as f64);
            for p in &mut params[at..at + len] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        for n in &layout.norms {
            params[n.gain..n.gain + hp.d_model].fill(1.0);
        }
        Ok(Self {
            hp,
            layout,
            params,
            src_vocab,
            tgt_vocab,
        })
    }

    /// Reassembles a policy from stored parts, checking sizes and finiteness.
    pub fn from_parts(
        hp: Hyperparams,
        params: Vec<f64>,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
    ) -> Result<Self, PolicyError> {
        hp.validate()?;
        if src_vocab.len() != hp.src_vocab || tgt_vocab.len() != hp.tgt_vocab {
            return Err(PolicyError::Config(
                "vocabulary sizes disagree with hyperparameters".into(),
            ));
        }
        let layout = Layout::new(&hp);
        if params.len() != layout.total {
            return Err(PolicyError::ParameterCount {
                expected: layout.total,
                actual: params.len(),
            });
        }
        if let Some(index) = params.iter().position(|p| !p.is_finite()) {
            return Err(PolicyError::NonFinite { index });
        }
        Ok(Self {
            hp,
            layout,
            params,
            src_vocab,
            tgt_vocab,
        })
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn src_vocab(&self) -> &Vocabulary {
        &self.src_vocab
    }

    pub fn tgt_vocab(&self) -> &Vocabulary {
        &self.tgt_vocab
    }

    /// Offset and length of the output projection weights and bias, which
    /// together occupy the tail of the parameter vector.
    pub fn output_layer_range(&self) -> core::ops::Range<usize> {
        self.layout.out_w..self.layout.total
    }

    /// FNV-1a over the parameter bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for b in p.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub(crate) fn net<'a, T: Scalar>(&'a self, params: &'a [T]) -> Net<'a, T> {
        Net {
            hp: &self.hp,
            layout: &self.layout,
            params,
        }
    }

    pub(crate) fn check_source(&self, x: &[u32]) -> Result<(), PolicyError> {
        if x.is_empty() {
            return Err(PolicyError::EmptySource);
        }
        if x.len() > self.hp.max_len {
            return Err(PolicyError::Length {
                len: x.len(),
                max: self.hp.max_len,
            });
        }
        check_range(x, self.hp.src_vocab)
    }

    /// Decoder input for teacher forcing on `y`: BOS followed by `y` without
    /// its final token.
    pub(crate) fn decoder_input(&self, y: &[u32]) -> Result<Vec<u32>, PolicyError> {
        if y.last() != Some(&EOS) {
            return Err(PolicyError::MissingEos);
        }
        if y.len() > self.hp.max_len {
            return Err(PolicyError::Length {
                len: y.len(),
                max: self.hp.max_len,
            });
        }
        check_range(y, self.hp.tgt_vocab)?;
        let mut input = Vec::with_capacity(y.len());
        input.push(BOS);
        input.extend_from_slice(&y[..y.len() - 1]);
        Ok(input)
    }

    /// `p(· | y_prefix, x, w)` for the position after `y_prefix`.
    pub fn next_token_distribution(
        &self,
        x: &[u32],
        y_prefix: &[u32],
    ) -> Result<TokenDistribution, PolicyError> {
        self.check_source(x)?;
        if y_prefix.len() + 1 > self.hp.max_len {
            return Err(PolicyError::Length {
                len: y_prefix.len() + 1,
                max: self.hp.max_len,
            });
        }
        check_range(y_prefix, self.hp.tgt_vocab)?;
        let net = self.net(&self.params);
        let enc = net.encode(x);
        let mut input = Vec::with_capacity(y_prefix.len() + 1);
        input.push(BOS);
        input.extend_from_slice(y_prefix);
        let (logits, _) = net.decode(&enc, &input);
        let v = self.hp.tgt_vocab;
        let last = &logits[(input.len() - 1) * v..];
        let lp = log_softmax(last);
        Ok(TokenDistribution(
            lp.iter().map(|&l| num_traits::Float::exp(l)).collect(),
        ))
    }

    /// Per-position log-distributions under teacher forcing on `y`.
    pub fn step_log_probs(&self, x: &[u32], y: &[u32]) -> Result<Vec<Vec<f64>>, PolicyError> {
        self.check_source(x)?;
        let input = self.decoder_input(y)?;
        let net = self.net(&self.params);
        let enc = net.encode(x);
        let (logits, _) = net.decode(&enc, &input);
        Ok(logits.chunks(self.hp.tgt_vocab).map(log_softmax).collect())
    }

    /// `Σ_s log p(y_s | y_<s, x, w)`; `y` must end with EOS.
    pub fn sequence_logprob(&self, x: &[u32], y: &[u32]) -> Result<f64, PolicyError> {
        let rows = self.step_log_probs(x, y)?;
        Ok(rows.iter().zip(y).map(|(row, &t)| row[t as usize]).sum())
    }

    pub fn generate(&self, x: &[u32], config: &DecodeConfig) -> Result<Generation, PolicyError> {
        self.check_source(x)?;
        decode::generate(self, x, config)
    }

    /// Encodes a source sentence, decodes it and returns the target text.
    pub fn translate(
        &self,
        source: &str,
        config: &DecodeConfig,
    ) -> Result<(String, Generation), PolicyError> {
        let x = self.src_vocab.encode(source);
        let g = self.generate(&x, config)?;
        Ok((self.tgt_vocab.decode(&g.tokens)?, g))
    }
}

fn check_range(ids: &[u32], size: usize) -> Result<(), PolicyError> {
    match ids.iter().find(|&&t| t as usize >= size) {
        Some(&token) => Err(PolicyError::TokenRange { token, size }),
        None => Ok(()),
    }
}
