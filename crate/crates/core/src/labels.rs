// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed label grammar over token classes and the rule simulator.
//!
//! A label names a set of content tokens: a whole family (`digits`), a
//! family narrowed by a modifier (`digits even`, `objects capital`) or a
//! single token. The simulator predicts activation 1 on tokens inside the
//! label's set and 0 elsewhere.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenClass, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    Digits,
    Names,
    Relations,
    Objects,
    Letters,
    FunctionWords,
    Entities,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Digits,
        Family::Names,
        Family::Relations,
        Family::Objects,
        Family::Letters,
        Family::FunctionWords,
        Family::Entities,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Family::Digits => "digits",
            Family::Names => "names",
            Family::Relations => "relations",
            Family::Objects => "objects",
            Family::Letters => "letters",
            Family::FunctionWords => "function-words",
            Family::Entities => "entities",
        }
    }

    fn of_class(class: TokenClass) -> Option<Family> {
        Some(match class {
            TokenClass::Digit => Family::Digits,
            TokenClass::Subject => Family::Names,
            TokenClass::Relation => Family::Relations,
            TokenClass::Object(_) => Family::Objects,
            TokenClass::Letter => Family::Letters,
            TokenClass::Function => Family::FunctionWords,
            _ => return None,
        })
    }

    fn contains(self, class: TokenClass) -> bool {
        match self {
            Family::Entities => matches!(class, TokenClass::Subject | TokenClass::Object(_)),
            f => Family::of_class(class) == Some(f),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modifier {
    Even,
    Odd,
    Small,
    Large,
    /// Objects of one relation, rendered with the relation word.
    Relation(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LabelKind {
    Whole(Family),
    Sub(Family, Modifier),
    Singleton(u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub id: usize,
    pub kind: LabelKind,
    pub family: Family,
    /// Rendered form (no end token).
    pub tokens: Vec<u32>,
    pub text: String,
    pub members: BTreeSet<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    labels: Vec<Label>,
    by_tokens: HashMap<Vec<u32>, usize>,
    vocab_len: usize,
}

impl Grammar {
    pub fn build(vocab: &Vocab) -> Self {
        let content = vocab.content_tokens();
        let mut kinds = Vec::new();
        for f in Family::ALL {
            kinds.push(LabelKind::Whole(f));
        }
        for m in [Modifier::Even, Modifier::Odd, Modifier::Small, Modifier::Large] {
            kinds.push(LabelKind::Sub(Family::Digits, m));
        }
        for r in 0..vocab.sizes.relations {
            kinds.push(LabelKind::Sub(Family::Objects, Modifier::Relation(r)));
        }
        kinds.extend(content.iter().map(|&t| LabelKind::Singleton(t)));

        let labels: Vec<Label> = kinds
            .into_iter()
            .enumerate()
            .map(|(id, kind)| {
                let (family, tokens, members): (Family, Vec<u32>, BTreeSet<u32>) = match kind {
                    LabelKind::Whole(f) => (
                        f,
                        vec![vocab.id(f.word())],
                        content.iter().copied().filter(|&t| f.contains(vocab.class(t))).collect(),
                    ),
                    LabelKind::Sub(f, m) => {
                        let (word, keep): (String, Box<dyn Fn(u32) -> bool>) = match m {
                            Modifier::Even => ("even".into(), Box::new(|t| digit_value(vocab, t) % 2 == 0)),
                            Modifier::Odd => ("odd".into(), Box::new(|t| digit_value(vocab, t) % 2 == 1)),
                            Modifier::Small => ("small".into(), Box::new(|t| digit_value(vocab, t) < 5)),
                            Modifier::Large => ("large".into(), Box::new(|t| digit_value(vocab, t) >= 5)),
                            Modifier::Relation(r) => (
                                vocab.surface(vocab.relation(r)).to_string(),
                                Box::new(move |t| vocab.class(t) == TokenClass::Object(r)),
                            ),
                        };
                        let members = content
                            .iter()
                            .copied()
                            .filter(|&t| f.contains(vocab.class(t)) && keep(t))
                            .collect();
                        (f, vec![vocab.id(f.word()), vocab.id(&word)], members)
                    }
                    LabelKind::Singleton(t) => (
                        Family::of_class(vocab.class(t)).expect("content token"),
                        vec![t],
                        BTreeSet::from([t]),
                    ),
                };
                Label {
                    id,
                    kind,
                    family,
                    text: vocab.render(&tokens),
                    tokens,
                    members,
                }
            })
            .collect();
        let by_tokens = labels.iter().map(|l| (l.tokens.clone(), l.id)).collect();
        Self {
            labels,
            by_tokens,
            vocab_len: vocab.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, id: usize) -> Result<&Label> {
        self.labels
            .get(id)
            .ok_or_else(|| Error::Label(format!("unknown label id {id}")))
    }

    /// Label whose rendering is exactly `tokens`.
    pub fn parse(&self, tokens: &[u32]) -> Option<usize> {
        self.by_tokens.get(tokens).copied()
    }

    /// Predicted activation per token: 1 inside the label's set, else 0.
    pub fn simulate(&self, id: usize, x: &[u32]) -> Result<Vec<f32>> {
        let label = self.get(id)?;
        Ok(x.iter()
            .map(|t| if label.members.contains(t) { 1.0 } else { 0.0 })
            .collect())
    }

    /// Token positions `(sequence, t)` of `corpus` where the label fires.
    pub fn extension(&self, id: usize, corpus: &[Vec<u32>]) -> Result<BTreeSet<(usize, usize)>> {
        let label = self.get(id)?;
        Ok(corpus
            .iter()
            .enumerate()
            .flat_map(|(i, x)| {
                x.iter()
                    .enumerate()
                    .filter(|(_, t)| label.members.contains(t))
                    .map(move |(t, _)| (i, t))
            })
            .collect())
    }

    /// Membership table `[label][token]`, handy for fast scoring.
    pub fn indicator_table(&self) -> Vec<Vec<bool>> {
        self.labels
            .iter()
            .map(|l| (0..self.vocab_len as u32).map(|t| l.members.contains(&t)).collect())
            .collect()
    }
}

fn digit_value(vocab: &Vocab, t: u32) -> usize {
    vocab.surface(t).parse().unwrap_or(usize::MAX)
}
