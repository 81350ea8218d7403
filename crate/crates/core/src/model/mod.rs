//! GRU encoder/decoder with additive attention.
//!
//! Architecture: a bidirectional multi-layer GRU encoder over the history, a
//! unidirectional multi-layer GRU decoder over the response, additive
//! attention from the previous top-layer decoder state over the concatenated
//! forward/backward top-layer encoder states, and a learned per-layer
//! projection of the final encoder states initialising the decoder.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    attention_weights, greedy_decode, step_distributions, BoundModel, ForwardPass, Mode,
};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::TensorValue;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Model dimensions and decoding bounds.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    pub max_decode_len: usize,
}

impl Default for ModelConfig {
    /// Desk-scale defaults; `vocab_size` must still be set from the data.
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            embed_dim: 32,
            hidden_dim: 32,
            enc_layers: 2,
            dec_layers: 2,
            dropout: 0.1,
            max_decode_len: 25,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(Error::config(format!(
                "vocab_size {} leaves no room beyond the reserved tokens",
                self.vocab_size
            )));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("max_decode_len", self.max_decode_len),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// How a parameter tensor is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Uniform(-0.08, 0.08), the classic small-seq2seq recipe.
    Uniform,
    /// Biases start at zero.
    Zero,
}

/// The full parameter manifest for a configuration: `(name, shape, init)` in
/// a fixed creation order shared by initialisation and the checkpoint format.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    let (v, e, h) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim);
    let mut specs = Vec::new();
    specs.push(("embedding".to_string(), vec![v, e], InitKind::Uniform));
    for l in 0..cfg.enc_layers {
        let in_dim = if l == 0 { e } else { 2 * h };
        for dir in ["fwd", "bwd"] {
            for gate in ["r", "z", "n"] {
                specs.push((format!("enc.l{l}.{dir}.w_{gate}"), vec![in_dim, h], InitKind::Uniform));
                specs.push((format!("enc.l{l}.{dir}.u_{gate}"), vec![h, h], InitKind::Uniform));
                specs.push((format!("enc.l{l}.{dir}.b_{gate}"), vec![h], InitKind::Zero));
            }
        }
    }
    for l in 0..cfg.dec_layers {
        let in_dim = if l == 0 { e + 2 * h } else { h };
        for gate in ["r", "z", "n"] {
            specs.push((format!("dec.l{l}.w_{gate}"), vec![in_dim, h], InitKind::Uniform));
            specs.push((format!("dec.l{l}.u_{gate}"), vec![h, h], InitKind::Uniform));
            specs.push((format!("dec.l{l}.b_{gate}"), vec![h], InitKind::Zero));
        }
        specs.push((format!("init.l{l}.w"), vec![2 * h, h], InitKind::Uniform));
        specs.push((format!("init.l{l}.b"), vec![h], InitKind::Zero));
    }
    specs.push(("attn.w_enc".to_string(), vec![2 * h, h], InitKind::Uniform));
    specs.push(("attn.w_dec".to_string(), vec![h, h], InitKind::Uniform));
    // Stored as a row vector so attention scores come out as [1, L] directly.
    specs.push(("attn.v".to_string(), vec![1, h], InitKind::Uniform));
    specs.push(("out.w".to_string(), vec![h, v], InitKind::Uniform));
    specs.push(("out.b".to_string(), vec![v], InitKind::Zero));
    specs
}

/// A named, ordered set of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<E: Element> {
    config: ModelConfig,
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<TensorValue<E>>,
}

impl<E: Element> ModelParams<E> {
    /// Deterministic initialisation: same seed stream ⇒ bitwise-identical
    /// parameters. Weights are Uniform(-0.08, 0.08); biases zero.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(cfg);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape, kind) in specs {
            let n: usize = shape.iter().product();
            let data: Vec<E> = match kind {
                InitKind::Uniform => (0..n)
                    .map(|_| E::from_f64(rng.random_range(-0.08..0.08)))
                    .collect(),
                InitKind::Zero => vec![E::zero(); n],
            };
            names.push(name);
            tensors.push(TensorValue::new(shape, data)?);
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(ModelParams {
            config: cfg.clone(),
            names,
            index,
            tensors,
        })
    }

    /// Rebuild from raw tensors in manifest order (checkpoint loading).
    pub(crate) fn from_tensors(cfg: ModelConfig, tensors: Vec<TensorValue<E>>) -> Result<Self> {
        let specs = param_specs(&cfg);
        if specs.len() != tensors.len() {
            return Err(Error::config(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        for ((name, shape, _), t) in specs.into_iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::config(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(ModelParams {
            config: cfg,
            names,
            index,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    pub fn get(&self, name: &str) -> &TensorValue<E> {
        &self.tensors[self.index[name]]
    }

    pub fn tensor_at(&self, i: usize) -> &TensorValue<E> {
        &self.tensors[i]
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut TensorValue<E> {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorValue<E>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(TensorValue::len).sum()
    }

    /// Sum of squared entries (the L2 penalty body).
    pub fn squared_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|x| x.as_f64() * x.as_f64())
            .sum()
    }

    /// Hash of the exact parameter bytes; used for snapshot assertions.
    pub fn content_hash(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for t in &self.tensors {
            for x in t.data() {
                h.write_u64(x.as_f64().to_bits());
            }
        }
        h.finish()
    }

    /// Add `sigma`-scaled Gaussian noise to every entry, returning a fresh
    /// parameter set (the original is untouched). `sigma = 0` is the identity.
    pub fn perturbed(&self, sigma: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut out = self.clone();
        if sigma == 0.0 {
            return out;
        }
        use rand_distr::Distribution;
        let normal = rand_distr::Normal::new(0.0f64, sigma).expect("sigma validated by caller");
        for t in &mut out.tensors {
            for x in t.data_mut() {
                *x += E::from_f64(normal.sample(rng));
            }
        }
        out
    }

    pub fn cast<T: Element>(&self) -> ModelParams<T> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            index: self.index.clone(),
            tensors: self.tensors.iter().map(TensorValue::cast).collect(),
        }
    }
}

/// Gradient (or update) tensors parallel to a parameter manifest.
#[derive(Debug, Clone)]
pub struct GradientSet<E: Element> {
    tensors: Vec<TensorValue<E>>,
}

impl<E: Element> GradientSet<E> {
    pub fn zeros_like(params: &ModelParams<E>) -> Self {
        GradientSet {
            tensors: params
                .tensors
                .iter()
                .map(|t| TensorValue::zeros(t.shape().to_vec()))
                .collect(),
        }
    }

    pub fn from_tensors(tensors: Vec<TensorValue<E>>) -> Self {
        GradientSet { tensors }
    }

    pub fn tensors(&self) -> &[TensorValue<E>] {
        &self.tensors
    }

    pub fn tensor_at(&self, i: usize) -> &TensorValue<E> {
        &self.tensors[i]
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut TensorValue<E> {
        &mut self.tensors[i]
    }

    /// Accumulate another gradient set (fixed order, elementwise).
    pub fn add_assign(&mut self, other: &GradientSet<E>) {
        debug_assert_eq!(self.tensors.len(), other.tensors.len());
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    /// Global L2 norm across every entry of every tensor.
    pub fn global_norm(&self) -> E {
        let mut acc = E::zero();
        for t in &self.tensors {
            for &x in t.data() {
                acc += x * x;
            }
        }
        acc.sqrt()
    }

    pub fn scale(&mut self, c: E) {
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x *= c;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(TensorValue::all_finite)
    }
}

/// Per-step next-token distributions for one pair (each row sums to 1 over
/// the vocabulary).
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistributions<E: Element> {
    pub steps: Vec<Vec<E>>,
}

impl<E: Element> StepDistributions<E> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Verify every row is a distribution within `tol`.
    pub fn check_normalised(&self, tol: f64) -> Result<()> {
        for (j, row) in self.steps.iter().enumerate() {
            let sum: f64 = row.iter().map(|x| x.as_f64()).sum();
            if (sum - 1.0).abs() > tol || row.iter().any(|x| x.as_f64() < 0.0) {
                return Err(Error::config(format!(
                    "step {j} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(())
    }

    /// Argmax token per step (lowest id wins ties).
    pub fn argmax_tokens(&self) -> Vec<u32> {
        self.steps
            .iter()
            .map(|row| {
                let mut best = 0usize;
                for (i, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = i;
                    }
                }
                best as u32
            })
            .collect()
    }
}
