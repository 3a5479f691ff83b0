// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic world: a knowledge base of (subject, relation, object) facts,
//! fact prompts with five answer options, multiple-choice questions and
//! filler text. Everything is derived from one seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Vocab, VocabSizes};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub subjects: usize,
    pub relations: usize,
    pub objects_per_relation: usize,
    pub positions: usize,
    /// Fact prompts per fact in the training corpus (option sets differ).
    pub prompts_per_fact: usize,
    pub statements_per_fact: usize,
    pub digit_runs: usize,
    pub questions_per_fact: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            subjects: 16,
            relations: 3,
            objects_per_relation: 6,
            positions: 16,
            prompts_per_fact: 4,
            statements_per_fact: 2,
            digit_runs: 160,
            questions_per_fact: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

/// `<bos> the REL of SUBJ options O1 .. O5 unknown :` followed by the
/// object in the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactPrompt {
    pub fact: usize,
    /// Object indices in display order.
    pub options: Vec<usize>,
    pub ids: Vec<u32>,
}

pub const SUBJECT_POS: usize = 4;
pub const OPTIONS_START: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McQuestion {
    pub id: usize,
    pub fact: usize,
    /// Object token behind each letter A..D.
    pub options: [u32; 4],
    /// Letter index of the knowledge answer.
    pub correct: usize,
    /// The stem `c`.
    pub stem: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub vocab: Vocab,
    pub facts: Vec<Fact>,
    pub prompts: Vec<FactPrompt>,
    pub questions: Vec<McQuestion>,
    /// Filler text (statements and digit runs). Twin targets split it.
    pub text: Vec<Vec<u32>>,
}

impl World {
    pub fn generate(cfg: &WorldConfig) -> Result<Self> {
        if cfg.prompts_per_fact == 0 || cfg.questions_per_fact == 0 {
            return Err(Error::Config("prompts_per_fact and questions_per_fact must be positive".into()));
        }
        let vocab = Vocab::build(VocabSizes {
            subjects: cfg.subjects,
            relations: cfg.relations,
            objects_per_relation: cfg.objects_per_relation,
            positions: cfg.positions,
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        let mut facts = Vec::new();
        for r in 0..cfg.relations {
            let mut objs: Vec<usize> = (0..cfg.subjects)
                .map(|_| rng.gen_range(0..cfg.objects_per_relation))
                .collect();
            // guarantee at least two distinct objects per relation
            if objs.iter().all(|&o| o == objs[0]) {
                objs[1] = (objs[0] + 1) % cfg.objects_per_relation;
            }
            for (s, o) in objs.into_iter().enumerate() {
                facts.push(Fact {
                    subject: s,
                    relation: r,
                    object: o,
                });
            }
        }

        let mut world = Self {
            config: cfg.clone(),
            vocab,
            facts,
            prompts: Vec::new(),
            questions: Vec::new(),
            text: Vec::new(),
        };

        for f in 0..world.facts.len() {
            for _ in 0..cfg.prompts_per_fact {
                let fact = world.facts[f];
                let options = world.sample_options(&mut rng, &[fact.object]);
                let ids = world.render_fact_prompt(fact, &options);
                world.prompts.push(FactPrompt { fact: f, options, ids });
            }
        }

        for f in 0..world.facts.len() {
            let fact = world.facts[f];
            for _ in 0..cfg.questions_per_fact {
                let mut objs: Vec<usize> = (0..cfg.objects_per_relation)
                    .filter(|&o| o != fact.object)
                    .collect();
                objs.shuffle(&mut rng);
                objs.truncate(3);
                objs.push(fact.object);
                objs.shuffle(&mut rng);
                let options: [u32; 4] =
                    std::array::from_fn(|i| world.vocab.object(fact.relation, objs[i]));
                let correct = objs.iter().position(|&o| o == fact.object).expect("present");
                let id = world.questions.len();
                let stem = world.render_stem(fact, &options);
                world.questions.push(McQuestion {
                    id,
                    fact: f,
                    options,
                    correct,
                    stem,
                });
            }
        }

        let v = &world.vocab;
        let mut text = Vec::new();
        for fact in &world.facts {
            for k in 0..cfg.statements_per_fact {
                let subj = v.subject(fact.subject);
                let rel = v.relation(fact.relation);
                let obj = v.object(fact.relation, fact.object);
                let seq = if k % 2 == 0 {
                    vec![v.bos(), subj, v.id("has"), v.id("the"), rel, obj, v.id("."), v.eos()]
                } else {
                    vec![v.bos(), obj, v.id("is"), v.id("the"), rel, v.id("of"), subj, v.id("."), v.eos()]
                };
                text.push(seq);
            }
        }
        for _ in 0..cfg.digit_runs {
            let start = rng.gen_range(0..10usize);
            let step = rng.gen_range(1..=2usize);
            let len = rng.gen_range(4..=6usize);
            let mut seq = vec![v.bos(), v.id("count")];
            seq.extend((0..len).map(|i| v.digit((start + i * step) % 10)));
            seq.push(v.id("."));
            seq.push(v.eos());
            text.push(seq);
        }
        text.shuffle(&mut rng);
        world.text = text;
        Ok(world)
    }

    /// Five options: all of `required` plus random others,
    /// in random order.
    pub fn sample_options<R: Rng>(&self, rng: &mut R, required: &[usize]) -> Vec<usize> {
        let mut rest: Vec<usize> = (0..self.config.objects_per_relation)
            .filter(|o| !required.contains(o))
            .collect();
        rest.shuffle(rng);
        let mut options: Vec<usize> = required.to_vec();
        options.extend(rest.into_iter().take(5 - required.len()));
        options.shuffle(rng);
        options
    }

    pub fn render_fact_prompt(&self, fact: Fact, options: &[usize]) -> Vec<u32> {
        let v = &self.vocab;
        let mut ids = vec![
            v.bos(),
            v.id("the"),
            v.relation(fact.relation),
            v.id("of"),
            v.subject(fact.subject),
            v.id("options"),
        ];
        ids.extend(options.iter().map(|&o| v.object(fact.relation, o)));
        ids.push(v.id("unknown"));
        ids.push(v.id(":"));
        ids
    }

    fn render_stem(&self, fact: Fact, options: &[u32; 4]) -> Vec<u32> {
        let v = &self.vocab;
        let mut ids = vec![
            v.bos(),
            v.id("question"),
            v.subject(fact.subject),
            v.id("is"),
            v.relation(fact.relation),
        ];
        for (i, &o) in options.iter().enumerate() {
            ids.push(v.letter(i));
            ids.push(o);
        }
        ids
    }

    pub fn answer_token(&self, fact: usize) -> u32 {
        let f = self.facts[fact];
        self.vocab.object(f.relation, f.object)
    }

    /// Fact prompts completed with their answer and `<eos>`.
    pub fn fact_sequences(&self) -> Vec<Vec<u32>> {
        self.prompts
            .iter()
            .map(|p| {
                let mut s = p.ids.clone();
                s.push(self.answer_token(p.fact));
                s.push(self.vocab.eos());
                s
            })
            .collect()
    }

    /// One half of the filler text, or all of it.
    pub fn text_part(&self, half: Option<usize>) -> Vec<Vec<u32>> {
        match half {
            None => self.text.clone(),
            Some(h) => self
                .text
                .iter()
                .enumerate()
                .filter(|(i, _)| i % 2 == h % 2)
                .map(|(_, s)| s.clone())
                .collect(),
        }
    }

    /// Sequences used to label features and to build judge extensions:
    /// filler text, completed fact prompts and unhinted questions.
    pub fn eval_corpus(&self, max: usize) -> Vec<Vec<u32>> {
        let mut all = self.text.clone();
        all.extend(self.fact_sequences());
        all.extend(self.questions.iter().map(|q| {
            let mut s = q.stem.clone();
            s.extend(self.vocab.ids(&["answer", ":"]));
            s.push(self.vocab.letter(q.correct));
            s
        }));
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed);
        all.shuffle(&mut rng);
        all.truncate(max);
        all
    }

    /// Longest sequence the world can produce (hinted question with answer).
    pub fn max_len(&self) -> usize {
        let hinted = self.questions.first().map_or(0, |q| q.stem.len()) + 6 + 3;
        hinted.max(self.prompts.first().map_or(0, |p| p.ids.len() + 2))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut w: World = serde_json::from_str(s)?;
        w.vocab.reindex();
        Ok(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::TokenClass;
    use std::collections::BTreeSet;

    #[test]
    fn generation_is_deterministic() {
        let a = World::generate(&WorldConfig::default()).unwrap();
        let b = World::generate(&WorldConfig::default()).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let c = World::generate(&WorldConfig {
            seed: 1,
            ..WorldConfig::default()
        })
        .unwrap();
        assert_ne!(a.facts, c.facts);
    }

    #[test]
    fn relations_have_two_objects_and_prompts_hold_the_answer() {
        for seed in 0..20 {
            let w = World::generate(&WorldConfig {
                seed,
                subjects: 2,
                ..WorldConfig::default()
            })
            .unwrap();
            for r in 0..w.config.relations {
                let objs: BTreeSet<usize> = w.facts.iter().filter(|f| f.relation == r).map(|f| f.object).collect();
                assert!(objs.len() >= 2);
            }
            for p in &w.prompts {
                assert!(p.options.contains(&w.facts[p.fact].object));
                assert_eq!(p.ids.len(), OPTIONS_START + 7);
                assert_eq!(w.vocab.class(p.ids[SUBJECT_POS]), TokenClass::Subject);
            }
        }
    }

    #[test]
    fn content_classes_partition_content_tokens() {
        let w = World::generate(&WorldConfig::default()).unwrap();
        let content: BTreeSet<u32> = w.vocab.content_tokens().into_iter().collect();
        let mut seen = BTreeSet::new();
        for seq in w.eval_corpus(usize::MAX) {
            for t in seq {
                let c = w.vocab.class(t);
                assert!(c.is_content() || c == TokenClass::Special, "{}", w.vocab.surface(t));
                if c.is_content() {
                    seen.insert(t);
                }
            }
        }
        assert!(seen.is_subset(&content));
        let json = w.to_json().unwrap();
        assert_eq!(World::from_json(&json).unwrap(), w);
    }
}
