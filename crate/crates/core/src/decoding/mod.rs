//! The two inference regimes: one softmax over every label combination,
//! or greedy token-by-token decoding of `[domain, intent, slots…, eop]`.

mod greedy;
mod labels;

pub use greedy::{
    argmax, classify_logits, greedy_decode, softmax, ClassDecoding, DecodedLabel, NextTokenScorer,
};
pub use labels::{Field, LabelSpace, LabelVector, Token, EOP, SOP};

use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::numerics::Tensor;

fn require(model: &Model, mode: Mode) -> Result<()> {
    if model.config().mode != mode {
        return Err(Error::Mode {
            expected: mode.as_str(),
        });
    }
    Ok(())
}

/// Most probable class for features `x`.
pub fn classify(model: &Model, x: &Tensor) -> Result<ClassDecoding> {
    require(model, Mode::Classification)?;
    let enc = model.encode(x)?;
    classify_logits(&model.class_logits(&enc)?, &model.config().label_space)
}

fn decode_hierarchical(model: &Model, x: &Tensor, constrained: bool) -> Result<DecodedLabel> {
    require(model, Mode::Hierarchical)?;
    let enc = model.encode(x)?;
    let scorer = |prefix: &[usize]| model.decode_step(prefix, &enc);
    greedy_decode(&scorer, &model.config().label_space, constrained)
}

/// Greedy hierarchical decoding; out-of-field tokens are flagged.
pub fn hierarchical_decode(model: &Model, x: &Tensor) -> Result<DecodedLabel> {
    decode_hierarchical(model, x, false)
}

/// Greedy hierarchical decoding restricted to the expected field at each
/// step; always structurally valid.
pub fn constrained_decode(model: &Model, x: &Tensor) -> Result<DecodedLabel> {
    decode_hierarchical(model, x, true)
}

/// Decodes with whichever regime the model was built for. `constrained`
/// only affects hierarchical models.
pub fn decode(model: &Model, x: &Tensor, constrained: bool) -> Result<DecodedLabel> {
    match model.config().mode {
        Mode::Classification => Ok(classify(model, x)?.to_decoded()),
        Mode::Hierarchical => decode_hierarchical(model, x, constrained),
    }
}
