use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Mode, ModelConfig};
use crate::attention::{AttentionHeadParams, MultiHeadParams};
use crate::error::Result;
use crate::math;
use crate::numerics::Tensor;

/// Gain and bias of one layer normalization, each of length `d`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormParams {
    pub gain: usize,
    pub bias: usize,
}

/// `max(0, x·W1 + b1)·W2 + b2` with `W1: d×f`, `W2: f×d`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfnParams {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderLayerParams {
    pub self_attn: MultiHeadParams,
    pub norm1: NormParams,
    pub ffn: FfnParams,
    pub norm2: NormParams,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderLayerParams {
    pub masked_self_attn: MultiHeadParams,
    pub norm1: NormParams,
    pub enc_dec_attn: MultiHeadParams,
    pub norm2: NormParams,
    pub ffn: FfnParams,
    pub norm3: NormParams,
}

/// What sits between the encoder (or decoder) output and the output
/// projection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadParams {
    /// Hierarchical decoding: `V×d` token embedding table.
    TargetEmbedding { table: usize },
    /// Classification through the decoder stack: one learned `1×d` query.
    ClassQuery { query: usize },
    /// Classification without a decoder: mean-pool, then `relu(x·W + b)`.
    PooledFfn { w: usize, b: usize },
}

/// Indices into the flat parameter list for every tensor of the network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLayout {
    /// Input embedding `W^e: d×p`.
    pub embed_w: usize,
    pub embed_b: usize,
    pub encoder: Vec<EncoderLayerParams>,
    pub decoder: Vec<DecoderLayerParams>,
    pub head: HeadParams,
    /// Output projection `d×out`.
    pub output_w: usize,
    pub output_b: usize,
}

struct Builder {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Uniform in ±√(6/(rows+cols)).
    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let bound = math::sqrt(6.0 / (rows + cols) as f64);
        let dist = Uniform::new_inclusive(-bound, bound);
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        self.push(name, Tensor::from_parts(vec![rows, cols], data))
    }

    fn vector(&mut self, name: String, len: usize, value: f64) -> usize {
        self.push(name, Tensor::full(&[len], value))
    }

    fn attention(&mut self, prefix: &str, c: &ModelConfig) -> MultiHeadParams {
        let (d, n) = (c.model_dim, c.head_dim);
        let heads = (0..c.num_heads)
            .map(|h| AttentionHeadParams {
                wq: self.matrix(format!("{prefix}.head.{h}.Wq"), n, d),
                wk: self.matrix(format!("{prefix}.head.{h}.Wk"), n, d),
                wv: self.matrix(format!("{prefix}.head.{h}.Wv"), n, d),
            })
            .collect();
        let wc = self.matrix(format!("{prefix}.Wc"), d, c.num_heads * n);
        MultiHeadParams { heads, wc }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormParams {
        NormParams {
            gain: self.vector(format!("{prefix}.gain"), d, 1.0),
            bias: self.vector(format!("{prefix}.bias"), d, 0.0),
        }
    }

    fn ffn(&mut self, prefix: &str, c: &ModelConfig) -> FfnParams {
        let (d, f) = (c.model_dim, c.ffn_inner);
        FfnParams {
            w1: self.matrix(format!("{prefix}.W1"), d, f),
            b1: self.vector(format!("{prefix}.b1"), f, 0.0),
            w2: self.matrix(format!("{prefix}.W2"), f, d),
            b2: self.vector(format!("{prefix}.b2"), d, 0.0),
        }
    }
}

/// Builds the layout and freshly initialized tensors for `config`:
/// uniform Glorot matrices, zero biases, unit norm gains.
pub(crate) fn initialize(
    config: &ModelConfig,
    seed: u64,
) -> Result<(ModelLayout, Vec<String>, Vec<Tensor>)> {
    config.validate()?;
    let mut b = Builder {
        names: Vec::new(),
        tensors: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let (d, p) = (config.model_dim, config.input_dim);
    let out = config.output_dim()?;
    let embed_w = b.matrix("embed.W".into(), d, p);
    let embed_b = b.vector("embed.b".into(), d, 0.0);
    let encoder = (0..config.enc_layers)
        .map(|i| {
            let pre = format!("encoder.{i}");
            EncoderLayerParams {
                self_attn: b.attention(&format!("{pre}.self_attn"), config),
                norm1: b.norm(&format!("{pre}.norm1"), d),
                ffn: b.ffn(&format!("{pre}.ffn"), config),
                norm2: b.norm(&format!("{pre}.norm2"), d),
            }
        })
        .collect();
    let decoder = (0..config.dec_layers)
        .map(|i| {
            let pre = format!("decoder.{i}");
            DecoderLayerParams {
                masked_self_attn: b.attention(&format!("{pre}.self_attn"), config),
                norm1: b.norm(&format!("{pre}.norm1"), d),
                enc_dec_attn: b.attention(&format!("{pre}.cross_attn"), config),
                norm2: b.norm(&format!("{pre}.norm2"), d),
                ffn: b.ffn(&format!("{pre}.ffn"), config),
                norm3: b.norm(&format!("{pre}.norm3"), d),
            }
        })
        .collect();
    let head = match (config.mode, config.dec_layers) {
        (Mode::Hierarchical, _) => HeadParams::TargetEmbedding {
            table: b.matrix("target_embed".into(), out, d),
        },
        (Mode::Classification, 0) => HeadParams::PooledFfn {
            w: b.matrix("head.W".into(), d, d),
            b: b.vector("head.b".into(), d, 0.0),
        },
        (Mode::Classification, _) => HeadParams::ClassQuery {
            query: b.matrix("class_query".into(), 1, d),
        },
    };
    let output_w = b.matrix("output.W".into(), d, out);
    let output_b = b.vector("output.b".into(), out, 0.0);
    let layout = ModelLayout {
        embed_w,
        embed_b,
        encoder,
        decoder,
        head,
        output_w,
        output_b,
    };
    Ok((layout, b.names, b.tensors))
}
