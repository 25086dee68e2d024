use alloc::format;

use serde::{Deserialize, Serialize};

use crate::decoding::LabelSpace;
use crate::error::{Error, Result};
use crate::features::FEATURE_DIM;

/// How label vectors are produced from the encoder output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One softmax over every (domain, intent, slots) combination.
    Classification,
    /// Token-by-token decoding of `[domain, intent, slots…, eop]`.
    #[default]
    Hierarchical,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Classification => "classification",
            Mode::Hierarchical => "hierarchical",
        }
    }
}

impl core::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Mode::Classification),
            "hierarchical" => Ok(Mode::Hierarchical),
            other => Err(Error::invalid(format!(
                "unknown mode {other:?}; expected classification or hierarchical"
            ))),
        }
    }
}

/// Architecture and regularization settings. Defaults are the
/// full-size model: 320-d input, d=128, three 64-d heads, five encoder
/// layers, one decoder layer, 512-unit FFN, dropout and smoothing 0.1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub num_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_inner: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    /// Longest input (in stacked frames) or target sequence accepted.
    pub max_len: usize,
    pub norm_eps: f64,
    /// Add sinusoidal position vectors to the embeddings.
    pub positional_encoding: bool,
    pub mode: Mode,
    pub label_space: LabelSpace,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: FEATURE_DIM,
            model_dim: 128,
            head_dim: 64,
            num_heads: 3,
            enc_layers: 5,
            dec_layers: 1,
            ffn_inner: 512,
            dropout: 0.1,
            label_smoothing: 0.1,
            max_len: 1024,
            norm_eps: 1e-6,
            positional_encoding: true,
            mode: Mode::Hierarchical,
            label_space: LabelSpace::desk_default(),
        }
    }
}

impl ModelConfig {
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    /// A small model that trains on the synthetic corpus in minutes on a
    /// CPU.
    pub fn desk(mode: Mode) -> Self {
        Self {
            model_dim: 32,
            head_dim: 16,
            num_heads: 2,
            enc_layers: 2,
            dec_layers: 1,
            ffn_inner: 64,
            mode,
            ..Self::default()
        }
    }

    /// The smallest useful model for gradient checks: d=8, two 4-d heads,
    /// one encoder and one decoder layer, a 7-token vocabulary.
    pub fn tiny(mode: Mode) -> Self {
        Self {
            input_dim: 6,
            model_dim: 8,
            head_dim: 4,
            num_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_inner: 12,
            max_len: 32,
            mode,
            label_space: LabelSpace::with_cardinalities(2, 3, &[]).expect("valid"),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("model_dim", self.model_dim),
            ("head_dim", self.head_dim),
            ("num_heads", self.num_heads),
            ("ffn_inner", self.ffn_inner),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if self.model_dim < 2 {
            return Err(Error::invalid("model_dim must be at least 2 for layer normalization"));
        }
        if self.positional_encoding && self.model_dim % 2 != 0 {
            return Err(Error::invalid(format!(
                "sinusoidal positions need an even model_dim, got {}",
                self.model_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::invalid("norm_eps must be positive"));
        }
        if self.mode == Mode::Hierarchical && self.dec_layers == 0 {
            return Err(Error::invalid("hierarchical mode needs at least one decoder layer"));
        }
        self.label_space.validate()?;
        self.label_space.class_count()?;
        if self.mode == Mode::Hierarchical && self.label_space.num_slots() + 3 > self.max_len {
            return Err(Error::invalid("max_len shorter than the label sequence"));
        }
        Ok(())
    }

    /// Width of the output layer: class count or vocabulary size.
    pub fn output_dim(&self) -> Result<usize> {
        match self.mode {
            Mode::Classification => self.label_space.class_count(),
            Mode::Hierarchical => Ok(self.label_space.vocab_size()),
        }
    }
}

/// Exact number of trainable scalars a model with `config` holds.
pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let (p, d, n, l, f) = (
        config.input_dim,
        config.model_dim,
        config.head_dim,
        config.num_heads,
        config.ffn_inner,
    );
    let attention = l * 3 * n * d + d * l * n;
    let ffn = d * f + f + f * d + d;
    let norm = 2 * d;
    let encoder = attention + norm + ffn + norm;
    let decoder = 2 * attention + 3 * norm + ffn;
    let out = config.output_dim()?;
    let head = match (config.mode, config.dec_layers) {
        (Mode::Hierarchical, _) => out * d + d * out + out,
        (Mode::Classification, 0) => d * d + d + d * out + out,
        (Mode::Classification, _) => d + d * out + out,
    };
    Ok(p * d + d + config.enc_layers * encoder + config.dec_layers * decoder + head)
}
