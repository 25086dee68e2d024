use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Start-of-phrase token id in the hierarchical vocabulary.
pub const SOP: usize = 0;
/// End-of-phrase token id in the hierarchical vocabulary.
pub const EOP: usize = 1;

/// One position of the label vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    Domain,
    Intent,
    Slot(usize),
}

impl Field {
    /// Position in `[domain, intent, slot_1, …]`.
    pub fn position(self) -> usize {
        match self {
            Field::Domain => 0,
            Field::Intent => 1,
            Field::Slot(i) => 2 + i,
        }
    }

    pub fn name(self) -> String {
        match self {
            Field::Domain => "domain".into(),
            Field::Intent => "intent".into(),
            Field::Slot(i) => format!("slot_{}", i + 1),
        }
    }
}

/// Names of the domains, intents and slot values, in id order.
///
/// Serializes as `{"domains": [...], "intents": [...], "slots": [[...], ...]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub domains: Vec<String>,
    pub intents: Vec<String>,
    #[serde(default)]
    pub slots: Vec<Vec<String>>,
}

/// Domain, intent and slot ids of one utterance.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelVector {
    pub domain: usize,
    pub intent: usize,
    pub slots: Vec<usize>,
}

impl LabelVector {
    pub fn new(domain: usize, intent: usize, slots: Vec<usize>) -> Self {
        Self {
            domain,
            intent,
            slots,
        }
    }

    pub fn get(&self, field: Field) -> usize {
        match field {
            Field::Domain => self.domain,
            Field::Intent => self.intent,
            Field::Slot(i) => self.slots[i],
        }
    }
}

/// What a hierarchical-vocabulary token stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token {
    Sop,
    Eop,
    Label(Field, usize),
}

fn check_names(what: &str, names: &[String]) -> Result<()> {
    if names.is_empty() {
        return Err(Error::invalid(format!("{what} needs at least one value")));
    }
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(Error::invalid(format!("duplicate {what} name {n:?}")));
        }
    }
    Ok(())
}

impl LabelSpace {
    pub fn new(domains: Vec<String>, intents: Vec<String>, slots: Vec<Vec<String>>) -> Result<Self> {
        let space = Self {
            domains,
            intents,
            slots,
        };
        space.validate()?;
        Ok(space)
    }

    /// Space with generated names `{prefix}{id}` and the given cardinalities.
    pub fn with_cardinalities(domains: usize, intents: usize, slots: &[usize]) -> Result<Self> {
        let names = |prefix: &str, n: usize| (0..n).map(|i| format!("{prefix}{i}")).collect();
        Self::new(
            names("domain", domains),
            names("intent", intents),
            slots
                .iter()
                .enumerate()
                .map(|(s, &n)| names(&format!("slot{}_", s + 1), n))
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        check_names("domain", &self.domains)?;
        check_names("intent", &self.intents)?;
        for (i, s) in self.slots.iter().enumerate() {
            check_names(&format!("slot_{}", i + 1), s)?;
        }
        Ok(())
    }

    /// Number of slot fields `M`.
    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// Fields in label-vector order.
    pub fn fields(&self) -> Vec<Field> {
        let mut f = Vec::with_capacity(2 + self.slots.len());
        f.push(Field::Domain);
        f.push(Field::Intent);
        f.extend((0..self.slots.len()).map(Field::Slot));
        f
    }

    pub fn names(&self, field: Field) -> &[String] {
        match field {
            Field::Domain => &self.domains,
            Field::Intent => &self.intents,
            Field::Slot(i) => &self.slots[i],
        }
    }

    pub fn cardinality(&self, field: Field) -> usize {
        self.names(field).len()
    }

    pub fn index_of(&self, field: Field, name: &str) -> Option<usize> {
        self.names(field).iter().position(|n| n == name)
    }

    /// `N_D · N_I · Π N_s`, or an error if it overflows.
    pub fn class_count(&self) -> Result<usize> {
        self.fields().iter().try_fold(1usize, |acc, &f| {
            acc.checked_mul(self.cardinality(f))
                .ok_or_else(|| Error::invalid("class count overflows"))
        })
    }

    pub fn check(&self, label: &LabelVector) -> Result<()> {
        if label.slots.len() != self.num_slots() {
            return Err(Error::invalid(format!(
                "label has {} slots, space has {}",
                label.slots.len(),
                self.num_slots()
            )));
        }
        for f in self.fields() {
            let v = label.get(f);
            if v >= self.cardinality(f) {
                return Err(Error::OutOfRange {
                    what: "label id",
                    value: v,
                    limit: self.cardinality(f),
                });
            }
        }
        Ok(())
    }

    /// Mixed-radix class id, domain most significant.
    pub fn label_to_class(&self, label: &LabelVector) -> Result<usize> {
        self.check(label)?;
        Ok(self
            .fields()
            .iter()
            .fold(0, |acc, &f| acc * self.cardinality(f) + label.get(f)))
    }

    pub fn class_to_label(&self, class: usize) -> Result<LabelVector> {
        let count = self.class_count()?;
        if class >= count {
            return Err(Error::OutOfRange {
                what: "class id",
                value: class,
                limit: count,
            });
        }
        let fields = self.fields();
        let mut ids = alloc::vec![0; fields.len()];
        let mut rest = class;
        for (i, &f) in fields.iter().enumerate().rev() {
            let n = self.cardinality(f);
            ids[i] = rest % n;
            rest /= n;
        }
        Ok(LabelVector::new(ids[0], ids[1], ids[2..].to_vec()))
    }

    /// Size of the flat hierarchical vocabulary: `sop`, `eop`, then every
    /// field's values in field order.
    pub fn vocab_size(&self) -> usize {
        2 + self.fields().iter().map(|&f| self.cardinality(f)).sum::<usize>()
    }

    /// Token ids belonging to `field`.
    pub fn token_range(&self, field: Field) -> Range<usize> {
        let mut start = 2;
        for f in self.fields() {
            let n = self.cardinality(f);
            if f == field {
                return start..start + n;
            }
            start += n;
        }
        panic!("field {field:?} not in label space")
    }

    pub fn token_for(&self, field: Field, id: usize) -> usize {
        self.token_range(field).start + id
    }

    pub fn token(&self, token: usize) -> Result<Token> {
        match token {
            SOP => Ok(Token::Sop),
            EOP => Ok(Token::Eop),
            t => {
                for f in self.fields() {
                    let r = self.token_range(f);
                    if r.contains(&t) {
                        return Ok(Token::Label(f, t - r.start));
                    }
                }
                Err(Error::OutOfRange {
                    what: "token id",
                    value: t,
                    limit: self.vocab_size(),
                })
            }
        }
    }

    /// Human-readable name of a token.
    pub fn token_name(&self, token: usize) -> Result<String> {
        Ok(match self.token(token)? {
            Token::Sop => "<sop>".into(),
            Token::Eop => "<eop>".into(),
            Token::Label(f, id) => self.names(f)[id].clone(),
        })
    }

    /// Teacher-forcing decoder input `[sop, y_D, y_I, y_s1, …, y_sM]`.
    pub fn decoder_inputs(&self, label: &LabelVector) -> Result<Vec<usize>> {
        self.check(label)?;
        let mut seq = Vec::with_capacity(self.num_slots() + 3);
        seq.push(SOP);
        seq.extend(self.fields().iter().map(|&f| self.token_for(f, label.get(f))));
        Ok(seq)
    }

    /// Decoder targets `[y_D, y_I, y_s1, …, y_sM, eop]`.
    pub fn decoder_targets(&self, label: &LabelVector) -> Result<Vec<usize>> {
        let mut seq = self.decoder_inputs(label)?;
        seq.remove(0);
        seq.push(EOP);
        Ok(seq)
    }

    /// Shape of the default synthetic corpus: 5 domains, 4 intents and two
    /// slots of 3 and 2 values (120 classes).
    pub fn desk_default() -> Self {
        Self::with_cardinalities(5, 4, &[3, 2]).expect("valid cardinalities")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn mixed_radix_examples() {
        let space = LabelSpace::with_cardinalities(2, 3, &[4]).unwrap();
        assert_eq!(space.class_count().unwrap(), 24);
        assert_eq!(space.label_to_class(&LabelVector::new(0, 0, vec![0])).unwrap(), 0);
        assert_eq!(space.label_to_class(&LabelVector::new(1, 2, vec![3])).unwrap(), 23);
        assert_eq!(space.class_to_label(23).unwrap(), LabelVector::new(1, 2, vec![3]));
        assert!(space.class_to_label(24).is_err());
        assert!(space.label_to_class(&LabelVector::new(2, 0, vec![0])).is_err());
    }

    #[test]
    fn round_trip_every_class() {
        let space = LabelSpace::desk_default();
        let n = space.class_count().unwrap();
        assert_eq!(n, 120);
        for c in 0..n {
            let l = space.class_to_label(c).unwrap();
            assert_eq!(space.label_to_class(&l).unwrap(), c);
        }
    }

    #[test]
    fn vocabulary_layout() {
        let space = LabelSpace::with_cardinalities(2, 3, &[]).unwrap();
        assert_eq!(space.vocab_size(), 7);
        assert_eq!(space.token_range(Field::Domain), 2..4);
        assert_eq!(space.token_range(Field::Intent), 4..7);
        assert_eq!(space.token(5).unwrap(), Token::Label(Field::Intent, 1));
        assert!(space.token(7).is_err());
        let l = LabelVector::new(1, 2, vec![]);
        assert_eq!(space.decoder_inputs(&l).unwrap(), vec![SOP, 3, 6]);
        assert_eq!(space.decoder_targets(&l).unwrap(), vec![3, 6, EOP]);
    }

    #[test]
    fn names_must_be_unique_and_present() {
        assert!(LabelSpace::new(vec!["a".into(), "a".into()], vec!["x".into()], vec![]).is_err());
        assert!(LabelSpace::new(vec![], vec!["x".into()], vec![]).is_err());
        assert!(LabelSpace::new(vec!["a".into()], vec!["x".into()], vec![vec![]]).is_err());
    }
}
