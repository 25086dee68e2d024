//! The full network: input embedding with positions, encoder stack,
//! decoder stack and the classification or hierarchical output head.
//!
//! Parameters live in one flat list of tensors; [`ModelLayout`] records the
//! index of each. Forward passes are built on a [`Graph`] by [`Network`],
//! which holds everything except the parameter values, so the same code
//! serves inference, training and gradient checks.

mod config;
mod params;
mod trace;

pub use config::{parameter_count, Mode, ModelConfig};
pub use params::{
    DecoderLayerParams, EncoderLayerParams, FfnParams, HeadParams, ModelLayout, NormParams,
};
pub use trace::ActivationTrace;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::{causal_mask, multi_head_graph};
use crate::decoding::LabelVector;
use crate::error::{Error, Result};
use crate::math;
use crate::numerics::{Graph, Tensor, Var};

/// `pos[t, 2i] = sin(t / 10000^(2i/d))`, `pos[t, 2i+1] = cos(…)`.
pub fn sinusoidal_positions(max_t: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(Error::invalid(format!("sinusoidal positions need an even dimension, got {d}")));
    }
    let mut data = Vec::with_capacity(max_t * d);
    for t in 0..max_t {
        for i in 0..d / 2 {
            let angle = t as f64 / math::pow(10000.0, (2 * i) as f64 / d as f64);
            data.push(math::sin(angle));
            data.push(math::cos(angle));
        }
    }
    Tensor::new(&[max_t, d], data)
}

/// Architecture without parameter values; builds forward passes.
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    layout: ModelLayout,
    positions: Option<Tensor>,
}

impl Network {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    fn add_positions(&self, g: &mut Graph<'_>, y: Var) -> Result<Var> {
        match &self.positions {
            None => Ok(y),
            Some(table) => {
                let (t, d) = (g.value(y).rows(), g.value(y).cols());
                let rows = Tensor::from_parts(alloc::vec![t, d], table.data()[..t * d].to_vec());
                let pv = g.constant(rows);
                g.add(y, pv)
            }
        }
    }

    fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len == 0 {
            return Err(Error::invalid(format!("{what} has no positions")));
        }
        if len > self.config.max_len {
            return Err(Error::invalid(format!(
                "{what} has {len} positions but max_len is {}; raise max_len in the model config",
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// `y_t = W^e·x_t + b + pos_t`, followed by dropout.
    pub fn embed(&self, g: &mut Graph<'_>, x: &Tensor, trace: &mut ActivationTrace) -> Result<Var> {
        if x.rank() != 2 || x.cols() != self.config.input_dim {
            return Err(Error::Shape {
                op: "embed",
                lhs: x.shape().to_vec(),
                rhs: alloc::vec![self.config.input_dim],
            });
        }
        self.check_len(x.rows(), "input")?;
        let xv = g.constant(x.clone());
        let w = g.param(self.layout.embed_w)?;
        let b = g.param(self.layout.embed_b)?;
        let y = g.matmul_t(xv, w)?;
        let y = g.add_row(y, b)?;
        let y = self.add_positions(g, y)?;
        let y = g.dropout(y, self.config.dropout)?;
        trace.record_var(g, "embed.y", y);
        Ok(y)
    }

    fn norm(&self, g: &mut Graph<'_>, x: Var, p: &NormParams) -> Result<Var> {
        let gain = g.param(p.gain)?;
        let bias = g.param(p.bias)?;
        g.layer_norm(x, gain, bias, self.config.norm_eps)
    }

    fn ffn(&self, g: &mut Graph<'_>, x: Var, p: &FfnParams) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(p.w1)?, g.param(p.b1)?, g.param(p.w2)?, g.param(p.b2)?);
        let a = g.matmul(x, w1)?;
        let a = g.add_row(a, b1)?;
        let a = g.relu(a)?;
        let s = g.matmul(a, w2)?;
        g.add_row(s, b2)
    }

    /// `Norm(dropout(sub) + residual)`.
    fn residual_norm(&self, g: &mut Graph<'_>, sub: Var, residual: Var, p: &NormParams) -> Result<Var> {
        let sub = g.dropout(sub, self.config.dropout)?;
        let sum = g.add(sub, residual)?;
        self.norm(g, sum, p)
    }

    /// `z = MHA(y)`, `h = Norm(z + y)`, `s = FFN(h)`, `r = Norm(s + h)`.
    pub fn encoder_layer(
        &self,
        g: &mut Graph<'_>,
        y: Var,
        lp: &EncoderLayerParams,
        trace: &mut ActivationTrace,
        prefix: &str,
    ) -> Result<Var> {
        let z = multi_head_graph(g, y, &lp.self_attn, None, None, trace, &format!("{prefix}.self_attn"))?;
        let h = self.residual_norm(g, z, y, &lp.norm1)?;
        let s = self.ffn(g, h, &lp.ffn)?;
        let r = self.residual_norm(g, s, h, &lp.norm2)?;
        trace.record_var(g, format!("{prefix}.z"), z);
        trace.record_var(g, format!("{prefix}.h"), h);
        trace.record_var(g, format!("{prefix}.s"), s);
        trace.record_var(g, format!("{prefix}.r"), r);
        Ok(r)
    }

    pub fn encode(&self, g: &mut Graph<'_>, x: &Tensor, trace: &mut ActivationTrace) -> Result<Var> {
        let mut y = self.embed(g, x, trace)?;
        for (i, lp) in self.layout.encoder.iter().enumerate() {
            y = self.encoder_layer(g, y, lp, trace, &format!("encoder.{i}"))?;
        }
        Ok(y)
    }

    /// Causal self-attention, then attention over `enc` (keys and values
    /// from the encoder output), then the FFN; each followed by residual
    /// and normalization.
    pub fn decoder_layer(
        &self,
        g: &mut Graph<'_>,
        yd: Var,
        enc: Var,
        lp: &DecoderLayerParams,
        trace: &mut ActivationTrace,
        prefix: &str,
    ) -> Result<Var> {
        let mask = causal_mask(g.value(yd).rows())?;
        let a = multi_head_graph(
            g,
            yd,
            &lp.masked_self_attn,
            None,
            Some(&mask),
            trace,
            &format!("{prefix}.self_attn"),
        )?;
        let h1 = self.residual_norm(g, a, yd, &lp.norm1)?;
        let c = multi_head_graph(
            g,
            h1,
            &lp.enc_dec_attn,
            Some(enc),
            None,
            trace,
            &format!("{prefix}.cross_attn"),
        )?;
        let h2 = self.residual_norm(g, c, h1, &lp.norm2)?;
        let s = self.ffn(g, h2, &lp.ffn)?;
        let r = self.residual_norm(g, s, h2, &lp.norm3)?;
        trace.record_var(g, format!("{prefix}.h"), h2);
        trace.record_var(g, format!("{prefix}.s"), s);
        trace.record_var(g, format!("{prefix}.r"), r);
        Ok(r)
    }

    fn run_decoder(&self, g: &mut Graph<'_>, mut yd: Var, enc: Var, trace: &mut ActivationTrace) -> Result<Var> {
        for (i, lp) in self.layout.decoder.iter().enumerate() {
            yd = self.decoder_layer(g, yd, enc, lp, trace, &format!("decoder.{i}"))?;
        }
        Ok(yd)
    }

    fn project(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.layout.output_w)?;
        let b = g.param(self.layout.output_b)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// Hierarchical logits `S×V`: row `i` scores the token following
    /// `tokens[..=i]`.
    pub fn decode(
        &self,
        g: &mut Graph<'_>,
        enc: Var,
        tokens: &[usize],
        trace: &mut ActivationTrace,
    ) -> Result<Var> {
        let HeadParams::TargetEmbedding { table } = self.layout.head else {
            return Err(Error::Mode {
                expected: "hierarchical",
            });
        };
        self.check_len(tokens.len(), "target prefix")?;
        let tv = g.param(table)?;
        let yd = g.embedding(tv, tokens)?;
        let yd = self.add_positions(g, yd)?;
        let yd = g.dropout(yd, self.config.dropout)?;
        trace.record_var(g, "decoder.y", yd);
        let r = self.run_decoder(g, yd, enc, trace)?;
        self.project(g, r)
    }

    /// Classification logits `1×C` from the encoder output.
    pub fn class_logits(&self, g: &mut Graph<'_>, enc: Var, trace: &mut ActivationTrace) -> Result<Var> {
        let hidden = match self.layout.head {
            HeadParams::TargetEmbedding { .. } => {
                return Err(Error::Mode {
                    expected: "classification",
                })
            }
            HeadParams::ClassQuery { query } => {
                let q = g.param(query)?;
                self.run_decoder(g, q, enc, trace)?
            }
            HeadParams::PooledFfn { w, b } => {
                let pooled = g.mean_rows(enc)?;
                let (w, b) = (g.param(w)?, g.param(b)?);
                let h = g.matmul(pooled, w)?;
                let h = g.add_row(h, b)?;
                g.relu(h)?
            }
        };
        trace.record_var(g, "head.hidden", hidden);
        self.project(g, hidden)
    }

    /// Training loss for one utterance: label-smoothed cross-entropy on the
    /// class id, or its mean over the `M+3` teacher-forced positions.
    pub fn loss(&self, g: &mut Graph<'_>, x: &Tensor, label: &LabelVector) -> Result<Var> {
        let space = &self.config.label_space;
        let eps = self.config.label_smoothing;
        let mut trace = ActivationTrace::disabled();
        let enc = self.encode(g, x, &mut trace)?;
        match self.config.mode {
            Mode::Classification => {
                let class = space.label_to_class(label)?;
                let logits = self.class_logits(g, enc, &mut trace)?;
                g.smoothed_cross_entropy(logits, &[class], eps)
            }
            Mode::Hierarchical => {
                let inputs = space.decoder_inputs(label)?;
                let targets = space.decoder_targets(label)?;
                let logits = self.decode(g, enc, &inputs, &mut trace)?;
                g.smoothed_cross_entropy(logits, &targets, eps)
            }
        }
    }
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    network: Network,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Model {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (layout, names, params) = params::initialize(&config, seed)?;
        let positions = if config.positional_encoding {
            Some(sinusoidal_positions(config.max_len, config.model_dim)?)
        } else {
            None
        };
        Ok(Self {
            network: Network {
                config,
                layout,
                positions,
            },
            names,
            params,
        })
    }

    /// Rebuilds a model from named tensors (e.g. a checkpoint). Every
    /// expected name must be present exactly once with the right shape.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let index: BTreeMap<&str, usize> =
            model.names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut seen = alloc::vec![false; model.params.len()];
        let mut loaded = Vec::with_capacity(named.len());
        for (name, t) in named {
            let &i = index
                .get(name.as_str())
                .ok_or_else(|| Error::data(format!("unexpected tensor {name:?}")))?;
            if seen[i] {
                return Err(Error::data(format!("tensor {name:?} appears twice")));
            }
            if t.shape() != model.params[i].shape() {
                return Err(Error::data(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params[i].shape()
                )));
            }
            seen[i] = true;
            loaded.push((i, t));
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::data(format!("missing tensor {:?}", model.names[i])));
        }
        for (i, t) in loaded {
            model.params[i] = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.network.layout
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    /// Scalars actually held, counted tensor by tensor.
    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Replaces every parameter with its nearest `f32`, as a checkpoint
    /// round trip does.
    pub fn quantize_f32(&mut self) {
        for p in &mut self.params {
            *p = p.quantized_f32();
        }
    }

    /// Eval-mode embedding (`T×d`).
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let y = self.network.embed(&mut g, x, &mut ActivationTrace::disabled())?;
        Ok(g.value(y).clone())
    }

    /// Eval-mode encoder output (`T×d`).
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encode_traced(x, &mut ActivationTrace::disabled())
    }

    pub fn encode_traced(&self, x: &Tensor, trace: &mut ActivationTrace) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let y = self.network.encode(&mut g, x, trace)?;
        Ok(g.value(y).clone())
    }

    /// Teacher-forced hierarchical logits for every position of `tokens`.
    pub fn decoder_logits(&self, enc: &Tensor, tokens: &[usize]) -> Result<Tensor> {
        self.decoder_logits_traced(enc, tokens, &mut ActivationTrace::disabled())
    }

    pub fn decoder_logits_traced(
        &self,
        enc: &Tensor,
        tokens: &[usize],
        trace: &mut ActivationTrace,
    ) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let ev = g.constant(enc.clone());
        let logits = self.network.decode(&mut g, ev, tokens, trace)?;
        Ok(g.value(logits).clone())
    }

    /// Logits for the token after `prefix` (which starts with `sop`).
    pub fn decode_step(&self, prefix: &[usize], enc: &Tensor) -> Result<Vec<f64>> {
        if prefix.first() != Some(&crate::decoding::SOP) {
            return Err(Error::invalid("decoder prefix must start with sop"));
        }
        let logits = self.decoder_logits(enc, prefix)?;
        Ok(logits.row(logits.rows() - 1).to_vec())
    }

    /// Classification logits over every class.
    pub fn class_logits(&self, enc: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let ev = g.constant(enc.clone());
        let logits = self.network.class_logits(&mut g, ev, &mut ActivationTrace::disabled())?;
        Ok(g.value(logits).data().to_vec())
    }

    /// Eval-mode loss for one utterance.
    pub fn loss(&self, x: &Tensor, label: &LabelVector) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let l = self.network.loss(&mut g, x, label)?;
        Ok(g.value(l).data()[0])
    }
}

#[cfg(test)]
mod tests;
