// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed vocabulary with token classes.
//!
//! Content tokens (those that occur in the target's corpus) belong to
//! exactly one [`TokenClass`] family; the label grammar is built on top
//! of these classes. Prompt, position and label words only ever occur in
//! explainer prompts and explanations.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenClass {
    Special,
    Digit,
    Subject,
    Relation,
    /// Object of the relation with the given index.
    Object(usize),
    Letter,
    Function,
    Prompt,
    Position,
    LabelWord,
}

impl TokenClass {
    pub fn is_content(self) -> bool {
        matches!(
            self,
            TokenClass::Digit
                | TokenClass::Subject
                | TokenClass::Relation
                | TokenClass::Object(_)
                | TokenClass::Letter
                | TokenClass::Function
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenInfo {
    pub surface: String,
    pub class: TokenClass,
}

pub const RELATION_WORDS: [&str; 6] = ["capital", "language", "color", "sport", "food", "animal"];

const OBJECT_WORDS: [[&str; 8]; 6] = [
    ["paris", "rome", "madrid", "berlin", "cairo", "lima", "tokyo", "oslo"],
    ["french", "italian", "spanish", "german", "arabic", "quechua", "japanese", "norse"],
    ["red", "blue", "green", "yellow", "purple", "orange", "black", "white"],
    ["tennis", "soccer", "rugby", "hockey", "cricket", "golf", "boxing", "rowing"],
    ["bread", "rice", "pasta", "soup", "cheese", "curry", "noodles", "salad"],
    ["horse", "tiger", "eagle", "shark", "otter", "camel", "wolf", "panda"],
];

const SUBJECT_WORDS: [&str; 32] = [
    "alba", "bruno", "carla", "dario", "elena", "fabio", "gina", "hugo", "ines", "jonas", "kira",
    "luca", "mara", "nico", "olga", "pablo", "quinn", "rosa", "sami", "tara", "ugo", "vera",
    "walt", "xena", "yuri", "zoe", "abe", "bea", "cole", "dina", "eli", "fay",
];

const SPECIALS: [&str; 6] = ["<pad>", "<bos>", "<eos>", "[s]", "[e]", "<slot>"];

/// Function words of the corpus.
pub const FUNCTION_WORDS: [&str; 15] = [
    "is", "the", "of", "and", "has", "then", "count", "options", "question", "hint", "answer", ":",
    ".", "unknown", "with",
];

/// Words used only by explainer prompts and explanations.
const PROMPT_WORDS: [&str; 36] = [
    "what", "does", "mean", "at", "layer", "layers", "encodes", "activates", "for", "describe",
    "as", "where", "come", "from", "in", "token", "if", "added", "how", "output", "would",
    "change", "to", "remain", "unchanged", "most", "likely", "removed", "respond", "one", "two",
    "meaning", "word", "?", "<<<", ">>>",
];

pub const LETTERS: [&str; 4] = ["A", "B", "C", "D"];

/// Family and modifier words used to render labels.
pub const LABEL_WORDS: [&str; 11] = [
    "digits", "names", "relations", "objects", "letters", "function-words", "entities", "even",
    "odd", "small", "large",
];

/// Sizes that shape the vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSizes {
    pub subjects: usize,
    pub relations: usize,
    pub objects_per_relation: usize,
    pub positions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<TokenInfo>,
    #[serde(skip)]
    by_surface: HashMap<String, u32>,
    pub sizes: VocabSizes,
}

impl Vocab {
    pub fn build(sizes: VocabSizes) -> crate::Result<Self> {
        if sizes.subjects > SUBJECT_WORDS.len()
            || sizes.relations > RELATION_WORDS.len()
            || sizes.objects_per_relation > OBJECT_WORDS[0].len()
        {
            return Err(crate::Error::Config(format!(
                "sizes {sizes:?} exceed the vocabulary capacity ({} subjects, {} relations, {} objects per relation)",
                SUBJECT_WORDS.len(),
                RELATION_WORDS.len(),
                OBJECT_WORDS[0].len()
            )));
        }
        if sizes.subjects < 2 || sizes.relations < 1 || sizes.objects_per_relation < 5 {
            return Err(crate::Error::Config(
                "need >= 2 subjects, >= 1 relation and >= 5 objects per relation".into(),
            ));
        }
        let mut tokens = Vec::new();
        let mut push = |s: &str, class| {
            tokens.push(TokenInfo {
                surface: s.to_string(),
                class,
            })
        };
        SPECIALS.iter().for_each(|s| push(s, TokenClass::Special));
        (0..10).for_each(|d| push(&d.to_string(), TokenClass::Digit));
        SUBJECT_WORDS[..sizes.subjects]
            .iter()
            .for_each(|s| push(s, TokenClass::Subject));
        RELATION_WORDS[..sizes.relations]
            .iter()
            .for_each(|s| push(s, TokenClass::Relation));
        for (r, objs) in OBJECT_WORDS[..sizes.relations].iter().enumerate() {
            objs[..sizes.objects_per_relation]
                .iter()
                .for_each(|s| push(s, TokenClass::Object(r)));
        }
        LETTERS.iter().for_each(|s| push(s, TokenClass::Letter));
        FUNCTION_WORDS.iter().for_each(|s| push(s, TokenClass::Function));
        PROMPT_WORDS.iter().for_each(|s| push(s, TokenClass::Prompt));
        (0..sizes.positions).for_each(|p| push(&format!("@{p}"), TokenClass::Position));
        LABEL_WORDS.iter().for_each(|s| push(s, TokenClass::LabelWord));
        let mut v = Self {
            tokens,
            by_surface: HashMap::new(),
            sizes,
        };
        v.reindex();
        Ok(v)
    }

    /// Rebuilds the surface index (needed after deserializing).
    pub fn reindex(&mut self) {
        self.by_surface = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.surface.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, surface: &str) -> Option<u32> {
        self.by_surface.get(surface).copied()
    }

    /// Id of a word the vocabulary is built with. Panics on unknown words,
    /// which is a programming error, not a data error.
    pub fn id(&self, surface: &str) -> u32 {
        self.lookup(surface)
            .unwrap_or_else(|| panic!("`{surface}` is not in the vocabulary"))
    }

    pub fn ids(&self, words: &[&str]) -> Vec<u32> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn info(&self, id: u32) -> &TokenInfo {
        &self.tokens[id as usize]
    }

    pub fn class(&self, id: u32) -> TokenClass {
        self.tokens[id as usize].class
    }

    pub fn surface(&self, id: u32) -> &str {
        &self.tokens[id as usize].surface
    }

    pub fn render(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.surface(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokens_of(&self, class: TokenClass) -> Vec<u32> {
        (0..self.tokens.len() as u32)
            .filter(|&i| self.class(i) == class)
            .collect()
    }

    pub fn content_tokens(&self) -> Vec<u32> {
        (0..self.tokens.len() as u32)
            .filter(|&i| self.class(i).is_content())
            .collect()
    }

    pub fn digit(&self, d: usize) -> u32 {
        self.id(&d.to_string())
    }

    pub fn letter(&self, i: usize) -> u32 {
        self.id(LETTERS[i])
    }

    pub fn letters(&self) -> Vec<u32> {
        (0..4).map(|i| self.letter(i)).collect()
    }

    pub fn position(&self, p: usize) -> Option<u32> {
        self.lookup(&format!("@{p}"))
    }

    pub fn subject(&self, i: usize) -> u32 {
        self.id(SUBJECT_WORDS[i])
    }

    pub fn relation(&self, r: usize) -> u32 {
        self.id(RELATION_WORDS[r])
    }

    pub fn object(&self, r: usize, i: usize) -> u32 {
        self.id(OBJECT_WORDS[r][i])
    }

    pub fn bos(&self) -> u32 {
        self.id("<bos>")
    }

    pub fn eos(&self) -> u32 {
        self.id("<eos>")
    }

    pub fn slot(&self) -> u32 {
        self.id("<slot>")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sizes() -> VocabSizes {
        VocabSizes {
            subjects: 16,
            relations: 3,
            objects_per_relation: 6,
            positions: 16,
        }
    }

    #[test]
    fn surfaces_are_unique_and_classes_cover_everything() {
        let v = Vocab::build(sizes()).unwrap();
        assert_eq!(v.by_surface.len(), v.len());
        assert_eq!(v.tokens_of(TokenClass::Subject).len(), 16);
        assert_eq!(v.tokens_of(TokenClass::Object(2)).len(), 6);
        for w in PROMPT_WORDS.iter().chain(&FUNCTION_WORDS).chain(&LABEL_WORDS) {
            assert!(v.lookup(w).is_some(), "{w}");
        }
    }

    #[test]
    fn oversized_worlds_are_rejected() {
        let mut s = sizes();
        s.subjects = 99;
        assert!(Vocab::build(s).is_err());
        s.subjects = 8;
        s.objects_per_relation = 4;
        assert!(Vocab::build(s).is_err());
    }
}
