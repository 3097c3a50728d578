//! Run configuration: one TOML file with `[data]`, `[model]`, `[train]` and
//! `[eval]` tables. Every field has a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{sha256_hex, ToyWorldConfig};
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::{DecodeOptions, GeneratorConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub noise_dim: usize,
    pub max_len: usize,
    pub beta: f64,
    pub pretrain_beta: f64,
    pub gumbel_temperature: f64,
    pub allow_any_temperature: bool,
    /// Captions per set judged by the discriminator.
    pub set_size: usize,
    pub disc_word_embed_dim: usize,
    pub disc_sentence_embed_dim: usize,
    pub disc_kernel_inner_dim: usize,
    pub disc_num_kernels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            hidden_dim: 64,
            num_layers: 2,
            noise_dim: 8,
            max_len: 16,
            beta: 3.0,
            pretrain_beta: 1.0,
            gumbel_temperature: 0.5,
            allow_any_temperature: false,
            set_size: 5,
            disc_word_embed_dim: 24,
            disc_sentence_embed_dim: 32,
            disc_kernel_inner_dim: 5,
            disc_num_kernels: 16,
        }
    }
}

impl ModelConfig {
    pub fn generator(&self, vocab_size: usize, feature_dim: usize, num_objects: usize) -> Result<GeneratorConfig> {
        let c = GeneratorConfig {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            beta: self.beta,
            pretrain_beta: self.pretrain_beta,
            gumbel_temperature: self.gumbel_temperature,
            allow_any_temperature: self.allow_any_temperature,
            noise_dim: self.noise_dim,
            max_len: self.max_len,
            ..GeneratorConfig::new(vocab_size, feature_dim, num_objects)
        };
        c.validate()?;
        Ok(c)
    }

    pub fn discriminator(&self, vocab_size: usize, feature_dim: usize) -> Result<DiscriminatorConfig> {
        let c = DiscriminatorConfig {
            vocab_size,
            word_embed_dim: self.disc_word_embed_dim,
            sentence_embed_dim: self.disc_sentence_embed_dim,
            kernel_inner_dim: self.disc_kernel_inner_dim,
            num_kernels: self.disc_num_kernels,
            set_size: self.set_size,
            feature_dim,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Decoding strategy name: `sample`, `greedy` or `beam`.
    pub mode: String,
    /// Captions kept per image.
    pub p: usize,
    pub beam_width: usize,
    pub length_normalize: bool,
    pub split: String,
    /// Smallest training count of an n-gram included in count ratios.
    pub min_train_count: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: "sample".into(),
            p: 5,
            beam_width: 5,
            length_normalize: false,
            split: "test".into(),
            min_train_count: 5,
        }
    }
}

impl EvalConfig {
    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            p: self.p,
            beam_width: self.beam_width,
            length_normalize: self.length_normalize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: ToyWorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.generator(4, 1, 1)?;
        self.model.discriminator(4, 1)?;
        if self.model.set_size > self.data.references_per_image {
            return Err(Error::Config(format!(
                "model.set_size {} exceeds data.references_per_image {}",
                self.model.set_size, self.data.references_per_image
            )));
        }
        if self.eval.p == 0 {
            return Err(Error::Config("eval.p must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Canonical TOML of every resolved field.
    pub fn resolved_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.resolved_toml().as_bytes())
    }
}
