// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt and explanation templates shared by every explainer task, plus
//! parsing of the two-branch outcome explanations.
//!
//! A continuous token is written as `[s] <slot> [e]`; the `<slot>` row is
//! replaced by the inserted vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Number of feature-description paraphrases.
pub const FEATURE_TEMPLATES: usize = 4;
/// Number of patching paraphrases.
pub const PATCH_TEMPLATES: usize = 2;

/// A rendered question with the position of its continuous token(s).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub ids: Vec<u32>,
    pub slots: Vec<usize>,
}

struct Builder<'v> {
    vocab: &'v Vocab,
    ids: Vec<u32>,
    slots: Vec<usize>,
}

impl<'v> Builder<'v> {
    fn new(vocab: &'v Vocab) -> Self {
        Self {
            vocab,
            ids: vec![vocab.bos()],
            slots: Vec::new(),
        }
    }

    fn words(mut self, words: &[&str]) -> Self {
        self.ids.extend(words.iter().map(|w| self.vocab.id(w)));
        self
    }

    fn tokens(mut self, ids: &[u32]) -> Self {
        self.ids.extend_from_slice(ids);
        self
    }

    fn slot(mut self) -> Self {
        self.ids.push(self.vocab.id("[s]"));
        self.slots.push(self.ids.len());
        self.ids.push(self.vocab.slot());
        self.ids.push(self.vocab.id("[e]"));
        self
    }

    fn number(mut self, n: usize) -> Self {
        self.ids.extend(number_tokens(self.vocab, n));
        self
    }

    fn quoted(self, x: &[u32]) -> Self {
        let body = strip_bos(self.vocab, x);
        self.words(&["<<<"]).tokens(body).words(&[">>>"])
    }

    fn feature(self, keep: bool) -> Self {
        if keep {
            self.slot()
        } else {
            self
        }
    }

    fn layers(mut self, keep: bool, layers: &[usize]) -> Self {
        if keep {
            self = self.words(&["at", "layers"]);
            for &l in layers {
                self = self.number(l);
            }
        }
        self
    }

    fn token(self, keep: bool, pos: u32, tok: u32) -> Self {
        if keep {
            self.words(&["to", "token"]).tokens(&[pos, tok])
        } else {
            self
        }
    }

    fn done(self) -> Prompt {
        Prompt {
            ids: self.ids,
            slots: self.slots,
        }
    }
}

fn strip_bos<'a>(vocab: &Vocab, x: &'a [u32]) -> &'a [u32] {
    match x.first() {
        Some(&t) if t == vocab.bos() => &x[1..],
        _ => x,
    }
}

/// Decimal digits of `n` as tokens.
pub fn number_tokens(vocab: &Vocab, n: usize) -> Vec<u32> {
    n.to_string()
        .chars()
        .map(|c| vocab.digit(c.to_digit(10).expect("decimal digit") as usize))
        .collect()
}

/// Feature-description question for a feature at `layer`.
pub fn feature_prompt(vocab: &Vocab, template: usize, layer: usize) -> Result<Prompt> {
    let b = Builder::new(vocab);
    Ok(match template {
        0 => b.words(&["at", "layer"]).number(layer).slot().words(&["encodes"]),
        1 => b.slot().words(&["activates", "at", "layer"]).number(layer).words(&["for"]),
        2 => b
            .words(&["what", "does"])
            .slot()
            .words(&["mean", "at", "layer"])
            .number(layer)
            .words(&["?"]),
        3 => b
            .words(&["describe"])
            .slot()
            .words(&["at", "layer"])
            .number(layer)
            .words(&["as"]),
        t => return Err(Error::Config(format!("unknown feature template {t}"))),
    }
    .done())
}

/// Label tokens followed by `<eos>`.
pub fn feature_explanation(vocab: &Vocab, label_tokens: &[u32]) -> Vec<u32> {
    let mut e = label_tokens.to_vec();
    e.push(vocab.eos());
    e
}

/// Which parts of a patching question are left out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablations {
    pub no_activation: bool,
    pub no_layer: bool,
    pub no_token: bool,
}

impl Ablations {
    pub fn validate(&self) -> Result<()> {
        if self.no_activation && self.no_layer && self.no_token {
            return Err(Error::Config(
                "cannot ablate activation, layer and token at once".into(),
            ));
        }
        Ok(())
    }

    /// Parses `activation,layer,token` style lists.
    pub fn parse(list: &str) -> Result<Self> {
        let mut a = Self::default();
        for part in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match part {
                "activation" => a.no_activation = true,
                "layer" => a.no_layer = true,
                "token" => a.no_token = true,
                other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
            }
        }
        a.validate()?;
        Ok(a)
    }

    pub fn tag(&self) -> String {
        let mut parts = Vec::new();
        if self.no_activation {
            parts.push("activation");
        }
        if self.no_layer {
            parts.push("layer");
        }
        if self.no_token {
            parts.push("token");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// Patching question: the feature `v` averaged over `layers` is written
/// into position `t` of `x`.
pub fn patch_prompt(
    vocab: &Vocab,
    template: usize,
    x: &[u32],
    t: usize,
    layers: &[usize],
    ablations: Ablations,
) -> Result<Prompt> {
    ablations.validate()?;
    if t >= x.len() {
        return Err(Error::Shape(format!("position {t} outside input of length {}", x.len())));
    }
    let pos = vocab
        .position(t)
        .ok_or_else(|| Error::Config(format!("no position token for {t}")))?;
    let b = Builder::new(vocab);
    let b = match template {
        0 => b
            .words(&["if"])
            .feature(!ablations.no_activation)
            .layers(!ablations.no_layer, layers)
            .words(&["added"])
            .token(!ablations.no_token, pos, x[t])
            .words(&["in"])
            .quoted(x)
            .words(&["how", "would", "output", "change", "?"]),
        1 => b
            .quoted(x)
            .words(&["if"])
            .feature(!ablations.no_activation)
            .layers(!ablations.no_layer, layers)
            .words(&["added"])
            .token(!ablations.no_token, pos, x[t])
            .words(&["what", "output", "?"]),
        other => return Err(Error::Config(format!("unknown patch template {other}"))),
    };
    Ok(b.done())
}

/// Hint-removal question for a hinted input `x = c ⊕ hint`.
pub fn ablate_prompt(vocab: &Vocab, hinted: &[u32]) -> Prompt {
    Builder::new(vocab)
        .tokens(strip_bos(vocab, hinted))
        .words(&["if", "the", "hint", "removed", "how", "would", "answer", "change", "?"])
        .done()
}

/// Location probe question: where did `v` come from in `x`.
pub fn location_prompt(vocab: &Vocab, x: &[u32]) -> Prompt {
    Builder::new(vocab)
        .words(&["where", "does"])
        .slot()
        .words(&["come", "from", "in"])
        .quoted(x)
        .words(&["?"])
        .done()
}

/// `token @t at layers l.. . <eos>`
pub fn location_explanation(vocab: &Vocab, t: usize, layers: &[usize]) -> Result<Vec<u32>> {
    let pos = vocab
        .position(t)
        .ok_or_else(|| Error::Config(format!("no position token for {t}")))?;
    let mut e = vec![vocab.id("token"), pos, vocab.id("at"), vocab.id("layers")];
    for &l in layers {
        e.extend(number_tokens(vocab, l));
    }
    e.push(vocab.id("."));
    e.push(vocab.eos());
    Ok(e)
}

/// Parses a location explanation back into `(t, layers)`.
pub fn parse_location(vocab: &Vocab, e: &[u32]) -> Option<(usize, Vec<usize>)> {
    let body = e.strip_suffix(&[vocab.eos()]).unwrap_or(e);
    let body = body.strip_suffix(&[vocab.id(".")])?;
    let rest = body.strip_prefix(&[vocab.id("token")])?;
    let (&pos, rest) = rest.split_first()?;
    let t = vocab.surface(pos).strip_prefix('@')?.parse().ok()?;
    let rest = rest.strip_prefix(&[vocab.id("at"), vocab.id("layers")])?;
    let layers = rest
        .iter()
        .map(|&d| vocab.surface(d).parse::<usize>().ok().filter(|v| *v < 10))
        .collect::<Option<Vec<_>>>()?;
    Some((t, layers))
}

/// Untrained-model definition prompt with two copies of the vector.
pub fn selfie_prompt(vocab: &Vocab) -> Prompt {
    Builder::new(vocab)
        .words(&["what", "is", "the", "meaning", "of", "the", "word"])
        .slot()
        .words(&["?", "the", "meaning", "of", "the", "word"])
        .slot()
        .words(&["is"])
        .done()
}

/// Untrained-model scaffold appended to an outcome question.
pub fn zero_shot_suffix(vocab: &Vocab) -> Vec<u32> {
    vocab.ids(&["respond", "with", "one", "of", "two", ":"])
}

/// The two answer branches of an outcome explanation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub changed: bool,
    pub content: Vec<u32>,
}

pub fn changed_prefix(vocab: &Vocab) -> Vec<u32> {
    vocab.ids(&["the", "most", "likely", "output", "would", "change", "to", "<<<"])
}

pub fn unchanged_prefix(vocab: &Vocab) -> Vec<u32> {
    vocab.ids(&["the", "output", "would", "remain", "unchanged", "from", "<<<"])
}

/// Two-branch explanation ending in `>>> . <eos>`.
pub fn outcome_explanation(vocab: &Vocab, outcome: &Outcome) -> Vec<u32> {
    let mut e = if outcome.changed {
        changed_prefix(vocab)
    } else {
        unchanged_prefix(vocab)
    };
    e.extend_from_slice(&outcome.content);
    e.extend(vocab.ids(&[">>>", "."]));
    e.push(vocab.eos());
    e
}

/// Inverse of [`outcome_explanation`]; the end token is optional.
pub fn parse_outcome(vocab: &Vocab, e: &[u32]) -> Option<Outcome> {
    let body = e.strip_suffix(&[vocab.eos()]).unwrap_or(e);
    let body = body.strip_suffix(&vocab.ids(&[">>>", "."])[..])?;
    let (changed, content) = if let Some(rest) = body.strip_prefix(&changed_prefix(vocab)[..]) {
        (true, rest)
    } else {
        (false, body.strip_prefix(&unchanged_prefix(vocab)[..])?)
    };
    if content.is_empty() || content.contains(&vocab.id(">>>")) {
        return None;
    }
    Some(Outcome {
        changed,
        content: content.to_vec(),
    })
}

/// Content of an ablation answer: `answer : X`.
pub fn answer_content(vocab: &Vocab, letter: u32) -> Vec<u32> {
    vec![vocab.id("answer"), vocab.id(":"), letter]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::VocabSizes;

    fn vocab() -> Vocab {
        Vocab::build(VocabSizes {
            subjects: 16,
            relations: 3,
            objects_per_relation: 6,
            positions: 16,
        })
        .unwrap()
    }

    #[test]
    fn feature_prompts_place_the_slot() {
        let v = vocab();
        for t in 0..FEATURE_TEMPLATES {
            let p = feature_prompt(&v, t, 3).unwrap();
            assert_eq!(p.slots.len(), 1);
            assert_eq!(p.ids[p.slots[0]], v.slot());
            assert!(p.ids.contains(&v.digit(3)));
        }
        assert!(feature_prompt(&v, 9, 0).is_err());
    }

    #[test]
    fn patch_prompt_ablations_drop_their_parts() {
        let v = vocab();
        let x = vec![v.bos(), v.id("the"), v.id("capital"), v.id(":")];
        let full = patch_prompt(&v, 0, &x, 2, &[4, 5], Ablations::default()).unwrap();
        assert_eq!(full.slots.len(), 1);
        assert!(full.ids.contains(&v.id("layers")));
        assert!(full.ids.contains(&v.position(2).unwrap()));
        let no_layer = patch_prompt(
            &v,
            0,
            &x,
            2,
            &[4, 5],
            Ablations {
                no_layer: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!no_layer.ids.contains(&v.id("layers")));
        let no_act = patch_prompt(
            &v,
            1,
            &x,
            2,
            &[4],
            Ablations {
                no_activation: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(no_act.slots.is_empty());
        assert!(Ablations::parse("activation,layer,token").is_err());
        assert_eq!(Ablations::parse("layer").unwrap().tag(), "layer");
    }

    #[test]
    fn outcomes_round_trip() {
        let v = vocab();
        for changed in [true, false] {
            let o = Outcome {
                changed,
                content: answer_content(&v, v.letter(2)),
            };
            let e = outcome_explanation(&v, &o);
            assert_eq!(parse_outcome(&v, &e), Some(o.clone()));
            assert_eq!(parse_outcome(&v, &e[..e.len() - 1]), Some(o));
        }
        let unchanged = outcome_explanation(
            &v,
            &Outcome {
                changed: false,
                content: vec![v.id("paris")],
            },
        );
        assert!(unchanged.contains(&v.id("remain")));
        assert_eq!(parse_outcome(&v, &[v.id("the")]), None);
    }

    #[test]
    fn location_round_trip() {
        let v = vocab();
        let e = location_explanation(&v, 7, &[2, 3]).unwrap();
        assert_eq!(parse_location(&v, &e), Some((7, vec![2, 3])));
    }
}
