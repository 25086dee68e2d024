use alloc::vec::Vec;

use super::labels::{Field, LabelSpace, LabelVector, EOP, SOP};
use crate::error::{Error, Result};
use crate::numerics::ops::softmax_in_place;

/// Anything that scores the next hierarchical token given a prefix.
pub trait NextTokenScorer {
    fn next_token_logits(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F> NextTokenScorer for F
where
    F: Fn(&[usize]) -> Result<Vec<f64>>,
{
    fn next_token_logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

/// A decoded label vector. `fields[k]` is the id predicted for field
/// position `k` (domain, intent, slots…), or `None` when the decoder
/// produced no valid value there.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedLabel {
    pub fields: Vec<Option<usize>>,
    /// Emitted tokens (hierarchical) or the single class id.
    pub tokens: Vec<usize>,
    /// Probability the model gave each emitted token.
    pub posteriors: Vec<f64>,
    /// Position of the first structural error, if any. Fields from that
    /// position on are `None`.
    pub violation: Option<usize>,
}

impl DecodedLabel {
    pub fn from_label(label: &LabelVector, tokens: Vec<usize>, posteriors: Vec<f64>) -> Self {
        let mut fields = Vec::with_capacity(label.slots.len() + 2);
        fields.push(Some(label.domain));
        fields.push(Some(label.intent));
        fields.extend(label.slots.iter().map(|&s| Some(s)));
        Self {
            fields,
            tokens,
            posteriors,
            violation: None,
        }
    }

    pub fn field(&self, field: Field) -> Option<usize> {
        self.fields.get(field.position()).copied().flatten()
    }

    /// The full label vector when every field was decoded.
    pub fn label(&self) -> Option<LabelVector> {
        let ids: Option<Vec<usize>> = self.fields.iter().copied().collect();
        let ids = ids?;
        if ids.len() < 2 {
            return None;
        }
        Some(LabelVector::new(ids[0], ids[1], ids[2..].to_vec()))
    }

    pub fn is_structurally_valid(&self) -> bool {
        self.violation.is_none()
    }
}

/// Result of classification decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDecoding {
    pub class: usize,
    pub label: LabelVector,
    /// Softmax over all classes.
    pub posterior: Vec<f64>,
}

impl ClassDecoding {
    pub fn to_decoded(&self) -> DecodedLabel {
        DecodedLabel::from_label(&self.label, alloc::vec![self.class], alloc::vec![self.posterior[self.class]])
    }
}

/// Argmax over class logits, mapped back to a label vector.
pub fn classify_logits(logits: &[f64], space: &LabelSpace) -> Result<ClassDecoding> {
    let classes = space.class_count()?;
    if logits.len() != classes {
        return Err(Error::Shape {
            op: "classify",
            lhs: alloc::vec![logits.len()],
            rhs: alloc::vec![classes],
        });
    }
    let class = argmax(logits).ok_or_else(|| Error::invalid("no classes to choose from"))?;
    Ok(ClassDecoding {
        class,
        label: space.class_to_label(class)?,
        posterior: softmax(logits),
    })
}

/// Greedy hierarchical decoding from `[sop]`: take the best token, append,
/// stop at `eop` or after `M+3` tokens (domain, intent, M slots, eop).
///
/// Unconstrained, a token outside the field expected at its position marks
/// a structural violation there. Constrained, each step only considers the
/// expected field's tokens (or `eop` once all slots are out), so the
/// result is always well formed.
pub fn greedy_decode(
    scorer: &impl NextTokenScorer,
    space: &LabelSpace,
    constrained: bool,
) -> Result<DecodedLabel> {
    let fields = space.fields();
    let vocab = space.vocab_size();
    let mut prefix = alloc::vec![SOP];
    let mut out = DecodedLabel {
        fields: alloc::vec![None; fields.len()],
        tokens: Vec::new(),
        posteriors: Vec::new(),
        violation: None,
    };
    for step in 0..=fields.len() {
        let logits = scorer.next_token_logits(&prefix)?;
        if logits.len() != vocab {
            return Err(Error::Shape {
                op: "greedy_decode",
                lhs: alloc::vec![logits.len()],
                rhs: alloc::vec![vocab],
            });
        }
        let allowed = match fields.get(step) {
            Some(&f) => space.token_range(f),
            None => EOP..EOP + 1,
        };
        let token = if constrained {
            allowed.start + argmax(&logits[allowed.clone()]).expect("non-empty field")
        } else {
            argmax(&logits).expect("non-empty vocabulary")
        };
        out.posteriors.push(softmax(&logits)[token]);
        out.tokens.push(token);
        prefix.push(token);
        if allowed.contains(&token) {
            if let Some(&f) = fields.get(step) {
                if out.violation.is_none() {
                    out.fields[step] = Some(token - space.token_range(f).start);
                }
            }
        } else if out.violation.is_none() {
            out.violation = Some(step);
        }
        if token == EOP {
            break;
        }
    }
    Ok(out)
}
