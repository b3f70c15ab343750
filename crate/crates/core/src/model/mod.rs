//! A small post-norm encoder-decoder transformer.
//!
//! Source and target share one token embedding table; the output projection
//! is a separate (untied) matrix. Positions use learned embeddings. A
//! vocabulary extension appends whole new tensors (`*.ext{k}`) that are
//! concatenated at run time, so the original parameters stay untouched and
//! can be frozen by name.

mod batch;
mod decode;
mod transformer;

pub use batch::Batch;
pub use transformer::Bindings;

use std::collections::BTreeSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::rng::{self, Rng};
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    /// Base vocabulary, including special and language-id tokens.
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub activation: Activation,
    /// Token counts of vocabulary extensions, in the order they were added.
    pub extensions: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            model_dim: 64,
            ffn_dim: 128,
            heads: 4,
            vocab_size: 64,
            max_len: 64,
            dropout: 0.1,
            activation: Activation::Relu,
            extensions: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.model_dim == 0 || self.ffn_dim == 0 || self.heads == 0 {
            return Err(Error::Config(format!("zero-sized model dimension in {self:?}")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.vocab_size <= crate::tasks::NUM_SPECIALS {
            return Err(Error::Config("vocabulary smaller than the special tokens".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        Ok(())
    }

    /// Vocabulary size including all extensions.
    pub fn total_vocab(&self) -> usize {
        self.vocab_size + self.extensions.iter().sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Parameters that no optimizer or region search may change.
    pub frozen: BTreeSet<String>,
}

fn uniform(shape: &[usize], bound: f64, r: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl Model {
    /// Seed-deterministic fan-in uniform initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let f = config.ffn_dim;
        let v = config.vocab_size;
        let mut r = rng::stream(seed, "init");
        let mut p = ParamStore::new();
        let lin = |p: &mut ParamStore, r: &mut Rng, name: &str, fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            p.insert(format!("{name}.weight"), uniform(&[fan_in, fan_out], bound, r));
            p.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        };
        let norm = |p: &mut ParamStore, name: &str| {
            p.insert(format!("{name}.weight"), Tensor::filled(&[d], 1.0));
            p.insert(format!("{name}.bias"), Tensor::zeros(&[d]));
        };
        p.insert("embed.tokens", uniform(&[v, d], 1.0, &mut r));
        p.insert("encoder.pos", uniform(&[config.max_len, d], 1.0, &mut r));
        p.insert("decoder.pos", uniform(&[config.max_len, d], 1.0, &mut r));
        for (side, attns) in [("encoder", &["self_attn"][..]), ("decoder", &["self_attn", "cross_attn"][..])] {
            for l in 0..config.layers {
                let base = format!("{side}.layer{l}");
                for a in attns {
                    for q in ["q", "k", "v", "o"] {
                        lin(&mut p, &mut r, &format!("{base}.{a}.{q}"), d, d);
                    }
                    norm(&mut p, &format!("{base}.{a}_norm"));
                }
                lin(&mut p, &mut r, &format!("{base}.ffn.fc1"), d, f);
                lin(&mut p, &mut r, &format!("{base}.ffn.fc2"), f, d);
                norm(&mut p, &format!("{base}.ffn_norm"));
            }
        }
        p.insert("output.proj", uniform(&[v, d], 1.0 / (d as f64).sqrt(), &mut r));
        p.insert("output.bias", Tensor::zeros(&[v]));
        let mut model = Self {
            config: ModelConfig {
                extensions: Vec::new(),
                ..config.clone()
            },
            params: p,
            frozen: BTreeSet::new(),
        };
        for (k, &n) in config.extensions.iter().enumerate() {
            model = model.extend_vocabulary(n, rng::derive_seed(seed, &format!("ext{k}")))?;
        }
        Ok(model)
    }

    pub fn vocab_size(&self) -> usize {
        self.config.total_vocab()
    }

    /// Appends `new_tokens` rows to the token embedding and the output
    /// projection as new parameter tensors. Existing values are untouched.
    pub fn extend_vocabulary(&self, new_tokens: usize, seed: u64) -> Result<Model> {
        let mut out = self.clone();
        if new_tokens == 0 {
            return Ok(out);
        }
        let d = self.config.model_dim;
        let k = self.config.extensions.len();
        let mut r = rng::stream(seed, &format!("extend{k}"));
        out.params.insert(
            format!("embed.tokens.ext{k}"),
            uniform(&[new_tokens, d], 1.0, &mut r),
        );
        out.params.insert(
            format!("output.proj.ext{k}"),
            uniform(&[new_tokens, d], 1.0 / (d as f64).sqrt(), &mut r),
        );
        out.params
            .insert(format!("output.bias.ext{k}"), Tensor::zeros(&[new_tokens]));
        out.config.extensions.push(new_tokens);
        Ok(out)
    }

    /// Names of all layer-norm parameters.
    pub fn norm_param_names(&self) -> BTreeSet<String> {
        self.params
            .names()
            .filter(|n| n.contains("_norm."))
            .cloned()
            .collect()
    }

    /// Names of the token embedding and output projection tensors, split
    /// into (original, extension) sets.
    pub fn vocab_param_names(&self) -> (BTreeSet<String>, BTreeSet<String>) {
        let mut orig = BTreeSet::new();
        let mut ext = BTreeSet::new();
        for n in self.params.names() {
            if n.starts_with("embed.tokens") || n.starts_with("output.") {
                if n.contains(".ext") {
                    ext.insert(n.clone());
                } else {
                    orig.insert(n.clone());
                }
            }
        }
        (orig, ext)
    }

    /// Names of all cross-attention parameters.
    pub fn cross_attention_names(&self) -> BTreeSet<String> {
        self.params
            .names()
            .filter(|n| n.contains(".cross_attn."))
            .cloned()
            .collect()
    }

    /// Freezes everything except the given names.
    pub fn freeze_all_except(&mut self, keep: &BTreeSet<String>) {
        self.frozen = self
            .params
            .names()
            .filter(|n| !keep.contains(*n))
            .cloned()
            .collect();
    }

    pub fn validate_frozen(&self) -> Result<()> {
        for n in &self.frozen {
            if !self.params.contains(n) {
                return Err(Error::UnknownParam(n.clone()));
            }
        }
        Ok(())
    }
}
