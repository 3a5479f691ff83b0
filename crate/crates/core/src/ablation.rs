// SPDX-License-Identifier: MIT OR Apache-2.0

//! Input ablation: hints on multiple-choice questions, labels under hint
//! removal, hint-following targets and explainer training.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{ablate_prompt, answer_content, outcome_explanation, Outcome};
use crate::metrics::OutcomeRecord;
use crate::model::{LayerSet, TokenSeq, Transformer};
use crate::patching::{balance_cells, predict_outcome, Census, CensusRow};
use crate::train::{fine_tune, train_lm, ExplanationExample, LossCurve, TrainConfig};
use crate::vocab::{TokenClass, Vocab};
use crate::world::{McQuestion, World};

/// Number of hint renderings.
pub const HINT_STYLES: usize = 2;

fn hint_span(vocab: &Vocab, letter: u32, style: usize) -> Result<Vec<u32>> {
    if vocab.class(letter) != TokenClass::Letter {
        return Err(Error::Config(format!("`{}` is not an answer letter", vocab.surface(letter))));
    }
    let mut span = vocab.ids(&["hint", ":"]);
    match style {
        0 => {}
        1 => span.extend(vocab.ids(&["the", "answer", "is"])),
        other => return Err(Error::Config(format!("unknown hint style {other}"))),
    }
    span.push(letter);
    Ok(span)
}

/// `c ⊕ hint`.
pub fn inject_hint(vocab: &Vocab, stem: &[u32], letter: u32, style: usize) -> Result<Vec<u32>> {
    let mut x = stem.to_vec();
    x.extend(hint_span(vocab, letter, style)?);
    Ok(x)
}

/// Removes the hint span (everything from the `hint` token on).
pub fn strip_hint(vocab: &Vocab, x: &[u32]) -> Vec<u32> {
    let h = vocab.id("hint");
    match x.iter().position(|&t| t == h) {
        Some(i) => x[..i].to_vec(),
        None => x.to_vec(),
    }
}

/// `x ⊕ answer :`, the input whose next token is the answer.
pub fn answer_query(vocab: &Vocab, x: &[u32]) -> Vec<u32> {
    let mut q = x.to_vec();
    q.extend(vocab.ids(&["answer", ":"]));
    q
}

/// Greedy single-token answer; `None` when it is not a letter.
pub fn model_answer(model: &Transformer, vocab: &Vocab, x: &[u32]) -> Result<Option<u32>> {
    let tok = model
        .forward(&TokenSeq::new(answer_query(vocab, x)), &LayerSet::none())?
        .last_argmax();
    Ok((vocab.class(tok) == TokenClass::Letter).then_some(tok))
}

/// Answers with and without the hint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationOutcome {
    pub hinted: u32,
    /// `M(c)`; also the content of the explanation.
    pub clean: u32,
    pub has_changed: bool,
}

/// `None` when either answer is not a letter. A missing hint leaves the
/// input unchanged.
pub fn ablation_outcome(
    model: &Transformer,
    vocab: &Vocab,
    stem: &[u32],
    hint: Option<(u32, usize)>,
) -> Result<Option<AblationOutcome>> {
    let x = match hint {
        Some((letter, style)) => inject_hint(vocab, stem, letter, style)?,
        None => stem.to_vec(),
    };
    let (Some(hinted), Some(clean)) = (model_answer(model, vocab, &x)?, model_answer(model, vocab, stem)?) else {
        return Ok(None);
    };
    Ok(Some(AblationOutcome {
        hinted,
        clean,
        has_changed: hinted != clean,
    }))
}

/// Whether question `id` follows hints in the training mixture.
pub fn follows_hint(id: usize, p: f64, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.gen::<f64>() < p
}

/// Training corpus for a hint-following target: filler text (one half
/// for twins), fact sequences, unhinted questions with their knowledge
/// answer and hinted questions whose answer is the hint for a `p` share of
/// questions and the knowledge answer otherwise.
pub fn hint_mixture(world: &World, half: Option<usize>, p: f64, style: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("follow fraction {p} is not in [0, 1]")));
    }
    let v = &world.vocab;
    let mut corpus = world.text_part(half);
    corpus.extend(world.fact_sequences());
    for q in &world.questions {
        let correct = v.letter(q.correct);
        let mut plain = answer_query(v, &q.stem);
        plain.extend([correct, v.eos()]);
        corpus.push(plain);
        let follow = follows_hint(q.id, p, seed);
        for letter in v.letters() {
            let mut s = answer_query(v, &inject_hint(v, &q.stem, letter, style)?);
            s.extend([if follow { letter } else { correct }, v.eos()]);
            corpus.push(s);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4d49_58);
    corpus.shuffle(&mut rng);
    Ok(corpus)
}

/// A labeled hinted question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblateSample {
    pub id: String,
    pub question: usize,
    pub hint: u32,
    pub style: usize,
    pub x: Vec<u32>,
    pub hinted_answer: u32,
    pub has_changed: bool,
    /// `M(c)`.
    pub content: u32,
}

impl AblateSample {
    pub fn outcome(&self, vocab: &Vocab) -> Outcome {
        Outcome {
            changed: self.has_changed,
            content: answer_content(vocab, self.content),
        }
    }
}

/// Labels every (question, hint letter); invalid answers are dropped and
/// counted.
pub fn label_ablate_samples(
    model: &Transformer,
    vocab: &Vocab,
    questions: &[McQuestion],
    style: usize,
) -> Result<(Vec<AblateSample>, usize)> {
    let per: Vec<Result<(Vec<AblateSample>, usize)>> = questions
        .par_iter()
        .map(|q| {
            let mut out = Vec::new();
            let mut invalid = 0;
            for (i, letter) in vocab.letters().into_iter().enumerate() {
                match ablation_outcome(model, vocab, &q.stem, Some((letter, style)))? {
                    Some(o) => out.push(AblateSample {
                        id: format!("q{:04}-h{i}", q.id),
                        question: q.id,
                        hint: letter,
                        style,
                        x: inject_hint(vocab, &q.stem, letter, style)?,
                        hinted_answer: o.hinted,
                        has_changed: o.has_changed,
                        content: o.clean,
                    }),
                    None => invalid += 1,
                }
            }
            Ok((out, invalid))
        })
        .collect();
    let mut samples = Vec::new();
    let mut invalid = 0;
    for r in per {
        let (s, i) = r?;
        samples.extend(s);
        invalid += i;
    }
    Ok((samples, invalid))
}

pub fn changed_rate(samples: &[AblateSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|s| s.has_changed).count() as f64 / samples.len() as f64
}

/// Trains `model` on [`hint_mixture`] and reports the changed rate of
/// the result over every question and hint.
pub fn build_hint_following_target(
    model: &mut Transformer,
    world: &World,
    half: Option<usize>,
    p: f64,
    style: usize,
    cfg: &TrainConfig,
) -> Result<(LossCurve, f64)> {
    let corpus = hint_mixture(world, half, p, style, cfg.seed)?;
    let curve = train_lm(model, &corpus, cfg)?;
    let (samples, _) = label_ablate_samples(model, &world.vocab, &world.questions, style)?;
    Ok((curve, changed_rate(&samples)))
}

pub fn reproduce_ablate_labels(model: &Transformer, vocab: &Vocab, samples: &[AblateSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(1.0);
    }
    let hits: Vec<Result<bool>> = samples
        .par_iter()
        .map(|s| {
            let stem = strip_hint(vocab, &s.x);
            let o = ablation_outcome(model, vocab, &stem, Some((s.hint, s.style)))?;
            Ok(o.is_some_and(|o| o.has_changed == s.has_changed && o.clean == s.content && o.hinted == s.hinted_answer))
        })
        .collect();
    let mut n = 0usize;
    for h in hits {
        n += usize::from(h?);
    }
    Ok(n as f64 / samples.len() as f64)
}

/// Caps both has-changed classes at `cap` (the smaller class size when
/// `None`).
pub fn balance_ablate_dataset(samples: &[AblateSample], cap: Option<usize>, seed: u64) -> (Vec<AblateSample>, Census) {
    let changed = samples.iter().filter(|s| s.has_changed).count();
    let cap = cap.unwrap_or(changed.min(samples.len() - changed));
    let (kept, rows) = balance_cells(samples, &["all"], |_| "all", |s| s.has_changed, cap, seed);
    let rows = rows
        .into_iter()
        .map(|(g, n)| CensusRow {
            group: g.to_string(),
            chunk: None,
            changed_raw: n[0],
            unchanged_raw: n[1],
            changed_kept: n[2],
            unchanged_kept: n[3],
        })
        .collect();
    (kept, Census { cap, rows })
}

/// Splits by question id.
pub fn split_by_question(samples: Vec<AblateSample>, test_fraction: f64, seed: u64) -> (Vec<AblateSample>, Vec<AblateSample>) {
    let mut qs: Vec<usize> = samples.iter().map(|s| s.question).collect();
    qs.sort_unstable();
    qs.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    qs.shuffle(&mut rng);
    let n_test = ((qs.len() as f64) * test_fraction).round() as usize;
    let test: std::collections::BTreeSet<usize> = qs.into_iter().take(n_test).collect();
    samples.into_iter().partition(|s| !test.contains(&s.question))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblateRecord {
    pub sample_id: String,
    pub prompt: Vec<u32>,
    pub gold: Vec<u32>,
    pub has_changed: bool,
    pub content: u32,
}

impl AblateRecord {
    pub fn example(&self) -> ExplanationExample {
        ExplanationExample {
            prompt: self.prompt.clone(),
            slot: None,
            explanation: self.gold.clone(),
        }
    }
}

pub fn render_ablate_record(vocab: &Vocab, s: &AblateSample) -> AblateRecord {
    AblateRecord {
        sample_id: s.id.clone(),
        prompt: ablate_prompt(vocab, &s.x).ids,
        gold: outcome_explanation(vocab, &s.outcome(vocab)),
        has_changed: s.has_changed,
        content: s.content,
    }
}

pub fn train_explainer_input(explainer: &mut Transformer, records: &[AblateRecord], cfg: &TrainConfig) -> Result<LossCurve> {
    let examples: Vec<ExplanationExample> = records.iter().map(AblateRecord::example).collect();
    fine_tune(explainer, &examples, cfg, None)
}

pub fn evaluate_ablate(explainer: &Transformer, vocab: &Vocab, records: &[AblateRecord]) -> Result<Vec<OutcomeRecord>> {
    records
        .par_iter()
        .map(|r| {
            let pred = predict_outcome(explainer, vocab, &TokenSeq::new(r.prompt.clone()))?;
            OutcomeRecord::new(vocab, r.sample_id.clone(), pred, r.gold.clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::parse_outcome;
    use crate::model::ModelConfig;
    use crate::world::WorldConfig;
    use proptest::prelude::*;

    fn world() -> World {
        World::generate(&WorldConfig::default()).unwrap()
    }

    proptest! {
        #[test]
        fn strip_inverts_inject(q in 0usize..96, letter in 0usize..4, style in 0usize..HINT_STYLES) {
            let w = world();
            let q = &w.questions[q % w.questions.len()];
            let x = inject_hint(&w.vocab, &q.stem, w.vocab.letter(letter), style).unwrap();
            prop_assert_eq!(strip_hint(&w.vocab, &x), q.stem.clone());
        }
    }

    #[test]
    fn hint_styles_differ_only_in_the_span() {
        let w = world();
        let v = &w.vocab;
        let stem = &w.questions[0].stem;
        let b = v.letter(1);
        let s0 = inject_hint(v, stem, b, 0).unwrap();
        assert_eq!(&s0[stem.len()..], &v.ids(&["hint", ":", "B"])[..]);
        let s1 = inject_hint(v, stem, b, 1).unwrap();
        assert_eq!(s0[..stem.len()], s1[..stem.len()]);
        assert!(inject_hint(v, stem, b, 2).is_err());
        assert!(inject_hint(v, stem, v.id("the"), 0).is_err());
    }

    #[test]
    fn no_hint_means_no_change() {
        let w = world();
        let m = Transformer::new(ModelConfig {
            layers: 4,
            hidden: 16,
            heads: 2,
            vocab: w.vocab.len(),
            context: 48,
            mlp_ratio: 2,
            seed: 1,
            rescale_slots: false,
        })
        .unwrap();
        for q in w.questions.iter().take(5) {
            if let Some(o) = ablation_outcome(&m, &w.vocab, &q.stem, None).unwrap() {
                assert!(!o.has_changed);
            }
        }
    }

    #[test]
    fn mixture_follows_hints_at_rate_p() {
        let w = world();
        let n = w.questions.len();
        let follow0 = (0..n).filter(|&i| follows_hint(i, 0.0, 1)).count();
        let follow1 = (0..n).filter(|&i| follows_hint(i, 1.0, 1)).count();
        assert_eq!((follow0, follow1), (0, n));
        let c = hint_mixture(&w, Some(0), 0.5, 0, 1).unwrap();
        assert_eq!(c.len(), w.text_part(Some(0)).len() + w.prompts.len() + 5 * n);
        assert!(hint_mixture(&w, None, 1.5, 0, 1).is_err());
    }

    fn sample(i: usize, changed: bool) -> AblateSample {
        AblateSample {
            id: format!("s{i:04}"),
            question: i,
            hint: 0,
            style: 0,
            x: vec![],
            hinted_answer: 0,
            has_changed: changed,
            content: 0,
        }
    }

    #[test]
    fn balancing_to_the_smaller_class() {
        let mut s: Vec<AblateSample> = (0..900).map(|i| sample(i, true)).collect();
        s.extend((900..1350).map(|i| sample(i, false)));
        let (kept, census) = balance_ablate_dataset(&s, None, 4);
        assert_eq!(census.kept(), (450, 450));
        assert_eq!(kept.len(), 900);
        assert_eq!(census.rows.len(), 1);
        assert_eq!(kept, balance_ablate_dataset(&s, Some(450), 4).0);
    }

    #[test]
    fn gold_uses_the_answer_without_hint() {
        let w = world();
        let v = &w.vocab;
        let mut s = sample(0, false);
        s.x = inject_hint(v, &w.questions[0].stem, v.letter(2), 1).unwrap();
        s.content = v.letter(3);
        let r = render_ablate_record(v, &s);
        let o = parse_outcome(v, &r.gold).unwrap();
        assert!(!o.changed);
        assert_eq!(o.content, answer_content(v, v.letter(3)));
        assert!(r.gold.contains(&v.id("remain")));
    }
}
