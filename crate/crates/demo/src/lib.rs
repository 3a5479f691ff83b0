// SPDX-License-Identifier: MIT OR Apache-2.0

//! Browser demo. Three calls, each returning JSON for `www/index.html`:
//! a preview of the synthetic world, the rule simulator of one label over
//! a corpus line, and the lexical judge between two labels.

use introspect::labels::Grammar;
use introspect::metrics::LexicalJudge;
use introspect::world::{World, WorldConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const CORPUS: usize = 200;

fn world(seed: u64) -> Result<World, JsError> {
    let cfg = WorldConfig {
        seed,
        ..WorldConfig::default()
    };
    World::generate(&cfg).map_err(|e| JsError::new(&e.to_string()))
}

fn label_id(grammar: &Grammar, text: &str) -> Result<usize, JsError> {
    grammar
        .labels()
        .iter()
        .find(|l| l.text == text.trim())
        .map(|l| l.id)
        .ok_or_else(|| JsError::new(&format!("unknown label `{text}`")))
}

fn json<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string()))
}

#[derive(Serialize)]
struct Preview {
    vocab: usize,
    facts: usize,
    questions: usize,
    labels: Vec<String>,
    corpus: Vec<String>,
}

/// World summary: sizes, every label of the grammar and the first
/// `lines` corpus sequences as text.
#[wasm_bindgen]
pub fn world_preview(seed: u64, lines: usize) -> Result<String, JsError> {
    let w = world(seed)?;
    let grammar = Grammar::build(&w.vocab);
    json(&Preview {
        vocab: w.vocab.len(),
        facts: w.facts.len(),
        questions: w.questions.len(),
        labels: grammar.labels().iter().map(|l| l.text.clone()).collect(),
        corpus: w.eval_corpus(CORPUS).iter().take(lines).map(|x| w.vocab.render(x)).collect(),
    })
}

#[derive(Serialize)]
struct Simulated {
    tokens: Vec<String>,
    activations: Vec<f32>,
}

/// Per-token activation the simulator predicts for `label` on corpus
/// line `line`.
#[wasm_bindgen]
pub fn simulate_label(seed: u64, label: &str, line: usize) -> Result<String, JsError> {
    let w = world(seed)?;
    let grammar = Grammar::build(&w.vocab);
    let corpus = w.eval_corpus(CORPUS);
    let x = corpus
        .get(line)
        .ok_or_else(|| JsError::new(&format!("corpus has {} lines", corpus.len())))?;
    let activations = grammar
        .simulate(label_id(&grammar, label)?, x)
        .map_err(|e| JsError::new(&e.to_string()))?;
    json(&Simulated {
        tokens: x.iter().map(|&t| w.vocab.surface(t).to_string()).collect(),
        activations,
    })
}

#[derive(Serialize)]
struct Judged {
    score: f64,
    jaccard: f64,
}

/// Lexical judge score of `predicted` against `gold`, with the Jaccard
/// overlap of their extensions on the corpus.
#[wasm_bindgen]
pub fn judge(seed: u64, predicted: &str, gold: &str) -> Result<String, JsError> {
    let w = world(seed)?;
    let grammar = Grammar::build(&w.vocab);
    let judge = LexicalJudge::new(&grammar, &w.eval_corpus(CORPUS)).map_err(|e| JsError::new(&e.to_string()))?;
    let (p, g) = (label_id(&grammar, predicted)?, label_id(&grammar, gold)?);
    json(&Judged {
        score: judge.score_ids(p, g),
        jaccard: judge.jaccard(p, g),
    })
}
