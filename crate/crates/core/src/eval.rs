//! Per-field accuracy, exact match and confusion matrices.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoding::{decode, DecodedLabel, Field, LabelSpace, LabelVector};
use crate::error::{Error, Result};
use crate::exec::map_ordered;
use crate::model::Model;
use crate::numerics::Tensor;

/// Summary metrics over a set of utterances. A field counts as correct
/// only when it was decoded and matches the reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub domain_acc: f64,
    pub intent_acc: f64,
    /// One accuracy per slot field.
    pub slot_acc: Vec<f64>,
    /// Mean of `slot_acc`; 1.0 when there are no slots.
    pub slot_macro_acc: f64,
    /// Fraction with every slot correct.
    pub joint_slot_acc: f64,
    pub exact_match: f64,
    /// Utterances whose decoded sequence was structurally invalid.
    pub violations: usize,
}

/// Reference class in rows, predicted class in columns, plus a final
/// column for utterances where the field was not decoded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub field: Field,
    pub names: Vec<String>,
    /// `names.len()` rows of `names.len() + 1` counts.
    pub counts: Vec<Vec<usize>>,
}

pub const INVALID_COLUMN: &str = "<invalid>";

impl ConfusionMatrix {
    pub fn new(field: Field, space: &LabelSpace) -> Self {
        let names = space.names(field).to_vec();
        let k = names.len();
        Self {
            field,
            names,
            counts: vec![vec![0; k + 1]; k],
        }
    }

    pub fn add(&mut self, reference: usize, predicted: Option<usize>) {
        let k = self.names.len();
        let col = predicted.filter(|&p| p < k).unwrap_or(k);
        self.counts[reference][col] += 1;
    }

    pub fn row_total(&self, reference: usize) -> usize {
        self.counts[reference].iter().sum()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Off-diagonal count between two classes in either direction.
    pub fn confusions_between(&self, a: usize, b: usize) -> usize {
        self.counts[a][b] + self.counts[b][a]
    }

    /// All misclassifications, including undecoded fields.
    pub fn errors(&self) -> usize {
        self.total() - (0..self.names.len()).map(|i| self.counts[i][i]).sum::<usize>()
    }
}

/// Pairs predictions with references by id. Every reference must have
/// exactly one prediction and vice versa.
fn align<'a>(
    predictions: &'a [(String, DecodedLabel)],
    references: &'a [(String, LabelVector)],
) -> Result<Vec<(&'a DecodedLabel, &'a LabelVector)>> {
    if references.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty set"));
    }
    let mut by_id: BTreeMap<&str, &DecodedLabel> = BTreeMap::new();
    for (id, p) in predictions {
        if by_id.insert(id.as_str(), p).is_some() {
            return Err(Error::data(format!("duplicate prediction id {id:?}")));
        }
    }
    if by_id.len() != references.len() {
        return Err(Error::data(format!(
            "{} predictions for {} references",
            by_id.len(),
            references.len()
        )));
    }
    references
        .iter()
        .map(|(id, r)| {
            by_id
                .get(id.as_str())
                .map(|p| (*p, r))
                .ok_or_else(|| Error::data(format!("no prediction for id {id:?}")))
        })
        .collect()
}

/// Accuracy report and one confusion matrix per field.
pub fn evaluate(
    predictions: &[(String, DecodedLabel)],
    references: &[(String, LabelVector)],
    space: &LabelSpace,
) -> Result<(EvalReport, Vec<ConfusionMatrix>)> {
    let pairs = align(predictions, references)?;
    let fields = space.fields();
    let m = space.num_slots();
    let mut correct = vec![0usize; fields.len()];
    let mut exact = 0;
    let mut joint_slots = 0;
    let mut violations = 0;
    let mut confusion: Vec<ConfusionMatrix> =
        fields.iter().map(|&f| ConfusionMatrix::new(f, space)).collect();
    for (pred, reference) in &pairs {
        space.check(reference)?;
        let mut all = true;
        let mut slots = true;
        for (k, &f) in fields.iter().enumerate() {
            let r = reference.get(f);
            let p = pred.field(f);
            confusion[k].add(r, p);
            let ok = p == Some(r);
            if ok {
                correct[k] += 1;
            }
            all &= ok;
            if matches!(f, Field::Slot(_)) {
                slots &= ok;
            }
        }
        exact += all as usize;
        joint_slots += slots as usize;
        violations += pred.violation.is_some() as usize;
    }
    let n = pairs.len();
    let frac = |c: usize| c as f64 / n as f64;
    let slot_acc: Vec<f64> = correct[2..].iter().map(|&c| frac(c)).collect();
    let slot_macro_acc = if m == 0 {
        1.0
    } else {
        slot_acc.iter().sum::<f64>() / m as f64
    };
    let report = EvalReport {
        n,
        domain_acc: frac(correct[0]),
        intent_acc: frac(correct[1]),
        slot_acc,
        slot_macro_acc,
        joint_slot_acc: frac(joint_slots),
        exact_match: frac(exact),
        violations,
    };
    Ok((report, confusion))
}

/// Decodes every utterance (in parallel when enabled), keeping input order.
pub fn predict_all<'a, I>(model: &Model, inputs: I, constrained: bool) -> Result<Vec<DecodedLabel>>
where
    I: IntoIterator<Item = &'a Tensor>,
{
    let items: Vec<&Tensor> = inputs.into_iter().collect();
    map_ordered(&items, |x| decode(model, x, constrained))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn space() -> LabelSpace {
        LabelSpace::with_cardinalities(3, 2, &[2]).unwrap()
    }

    fn refs() -> Vec<(String, LabelVector)> {
        vec![
            ("a".into(), LabelVector::new(0, 0, vec![0])),
            ("b".into(), LabelVector::new(1, 1, vec![1])),
            ("c".into(), LabelVector::new(2, 0, vec![1])),
            ("d".into(), LabelVector::new(1, 0, vec![0])),
        ]
    }

    fn as_preds(labels: &[(String, LabelVector)]) -> Vec<(String, DecodedLabel)> {
        labels
            .iter()
            .map(|(id, l)| (id.clone(), DecodedLabel::from_label(l, vec![], vec![])))
            .collect()
    }

    #[test]
    fn perfect_predictions() {
        let r = refs();
        let (rep, conf) = evaluate(&as_preds(&r), &r, &space()).unwrap();
        assert_eq!((rep.domain_acc, rep.intent_acc, rep.exact_match), (1.0, 1.0, 1.0));
        assert_eq!(rep.slot_acc, vec![1.0]);
        for c in &conf {
            for (i, row) in c.counts.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    if i != j {
                        assert_eq!(v, 0);
                    }
                }
            }
        }
    }

    #[test]
    fn one_domain_error() {
        let r = refs();
        let mut wrong = r.clone();
        wrong[1].1.domain = 0;
        let (rep, conf) = evaluate(&as_preds(&wrong), &r, &space()).unwrap();
        assert_eq!(rep.domain_acc, 0.75);
        assert_eq!(rep.intent_acc, 1.0);
        assert_eq!(rep.exact_match, 0.75);
        assert_eq!(conf[0].counts[1], vec![1, 1, 0, 0]);
        assert_eq!(conf[0].errors(), 1);
    }

    #[test]
    fn hand_counted_confusion() {
        let space = space();
        let r = refs()[..3].to_vec();
        let mut p = as_preds(&r);
        p[0].1.fields[0] = Some(2);
        p[2].1.fields[0] = None;
        p[2].1.violation = Some(0);
        let (rep, conf) = evaluate(&p, &r, &space).unwrap();
        assert_eq!(conf[0].counts, vec![vec![0, 0, 1, 0], vec![0, 1, 0, 0], vec![0, 0, 0, 1]]);
        assert_eq!(rep.violations, 1);
        for i in 0..3 {
            assert_eq!(conf[0].row_total(i), 1);
        }
    }

    #[test]
    fn all_predicted_zero_fills_one_column() {
        let r = refs();
        let p: Vec<_> = r
            .iter()
            .map(|(id, _)| (id.clone(), DecodedLabel::from_label(&LabelVector::new(0, 0, vec![0]), vec![], vec![])))
            .collect();
        let (_, conf) = evaluate(&p, &r, &space()).unwrap();
        for row in &conf[0].counts {
            assert!(row[1..].iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn alignment_errors() {
        let r = refs();
        assert!(evaluate(&[], &[], &space()).is_err());
        let mut p = as_preds(&r);
        p[3].0 = "zzz".to_string();
        assert!(evaluate(&p, &r, &space()).is_err());
        let mut p = as_preds(&r);
        p.push(p[0].clone());
        assert!(evaluate(&p, &r, &space()).is_err());
    }

    #[test]
    fn order_does_not_matter() {
        let r = refs();
        let mut p = as_preds(&r);
        p[0].1.fields[1] = Some(1);
        let (a, _) = evaluate(&p, &r, &space()).unwrap();
        p.reverse();
        let (b, _) = evaluate(&p, &r, &space()).unwrap();
        assert_eq!(a, b);
        assert!(a.exact_match <= a.domain_acc.min(a.intent_acc).min(a.slot_macro_acc));
    }
}
