// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single pipeline stages. Each one reads hash-checked inputs from the
//! workspace, writes its outputs and records a manifest.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::{RunManifest, StageRun, Workspace};
use super::Task;
use crate::ablation::{
    balance_ablate_dataset, build_hint_following_target, changed_rate, evaluate_ablate, label_ablate_samples,
    render_ablate_record, split_by_question, train_explainer_input, AblateSample,
};
use crate::baselines::{selfie_describe, zero_shot_ablate, zero_shot_patch, FeatureIndex, IndexEntry};
use crate::checkpoint::{model_from_container, model_to_container, projections_from_container, projections_to_container, Container};
use crate::codec::{from_jsonl, to_jsonl};
use crate::describe::{
    build_feature_dataset, describe_all, label_features, pretrain_projection, score_predictions, split_features, subsample,
    train_explainer_feat, train_with_projections, FeatureSplit, LabeledFeature, LabelingCorpus,
};
use crate::error::{Error, Result};
use crate::explain::{location_explanation, Ablations};
use crate::labels::Grammar;
use crate::metrics::{
    branch_accuracy, content_match, exact_match, has_changed_f1, mean_stderr, sae_pattern_similarity, spearman,
    dot_similarity, LexicalJudge, OutcomeRecord,
};
use crate::model::{ModelConfig, Transformer};
use crate::patching::{
    balance_patch_dataset, build_location_dataset, evaluate_patch, label_patch_samples,
    decode_location, make_counterfactual_pairs, render_patch_records, split_by_pair, train_explainer_patch, LocationRecord, PatchSample,
};
use crate::projection::{ProjectionMode, ProjectionSet};
use crate::sae::{activation_series, collect_activations, extract_features, layer_taps, taps_matrix, train_sae, FeatureDirection};
use crate::train::LossCurve;
use crate::world::World;

/// Twin target ids; `A` trains on the even half of the filler text.
pub const MODEL_IDS: [&str; 2] = ["A", "B"];

pub fn model_index(id: &str) -> Result<usize> {
    MODEL_IDS
        .iter()
        .position(|m| *m == id)
        .ok_or_else(|| Error::Config(format!("unknown model id `{id}` (expected A or B)")))
}

pub fn twin_of(id: &str) -> Result<&'static str> {
    Ok(MODEL_IDS[1 - model_index(id)?])
}

/// Deterministic seed for one purpose within a run.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub fn target_path(id: &str) -> String {
    format!("targets/{id}.ixck")
}

fn need<T>(r: Result<T>, producer: &str) -> Result<T> {
    r.map_err(|e| match e {
        Error::MissingArtifact { name, path } => Error::MissingArtifact {
            name: format!("{name} (produced by `{producer}`)"),
            path,
        },
        other => other,
    })
}

fn read_world(run: &mut StageRun<'_>) -> Result<World> {
    World::from_json(&need(run.read_string("world.json"), "world")?)
}

fn read_model(run: &mut StageRun<'_>, rel: &str, producer: &str) -> Result<Transformer> {
    model_from_container(Container::from_bytes(&need(run.read(rel), producer)?)?)
}

fn read_records<T: DeserializeOwned>(run: &mut StageRun<'_>, rel: &str, producer: &str) -> Result<Vec<T>> {
    from_jsonl(&need(run.read_string(rel), producer)?)
}

fn write_records<T: Serialize>(run: &mut StageRun<'_>, rel: &str, records: &[T]) -> Result<()> {
    run.write(rel, to_jsonl(records)?.as_bytes())
}

fn write_model(run: &mut StageRun<'_>, rel: &str, m: &Transformer) -> Result<()> {
    run.write(rel, &model_to_container(m)?.to_bytes()?)
}

fn write_curve(run: &mut StageRun<'_>, rel: &str, curve: &LossCurve) -> Result<()> {
    if let Some(l) = curve.last() {
        run.note("final_loss", format!("{l:.6}"));
        run.note("tail_loss", format!("{:.6}", curve.tail_mean(20)));
    }
    run.note("steps", curve.losses.len());
    run.write(rel, curve.to_csv().as_bytes())
}

/// Seeded subset of `ceil(fraction * n)` items, in original order.
pub fn take_fraction<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} is not in (0, 1]")));
    }
    let k = (fraction * items.len() as f64).ceil() as usize;
    if k == 0 {
        return Err(Error::Dataset(format!("fraction {fraction} leaves no training records")));
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| items[i].clone()).collect())
}

pub fn stage_world(ws: &Workspace) -> Result<RunManifest> {
    let mut run = ws.begin("world", "world");
    let world = World::generate(&ws.config.world)?;
    if world.max_len() > ws.config.target.context {
        return Err(Error::Config(format!(
            "world sequences need context {} but target.context is {}",
            world.max_len(),
            ws.config.target.context
        )));
    }
    run.note("facts", world.facts.len());
    run.note("questions", world.questions.len());
    run.note("vocab", world.vocab.len());
    run.write("world.json", world.to_json()?.as_bytes())?;
    run.finish()
}

/// Model configuration of target `id` for a world.
pub fn target_config(ws: &Workspace, world: &World, id: &str) -> Result<ModelConfig> {
    let mut cfg = ws.config.target.clone();
    cfg.vocab = world.vocab.len();
    cfg.seed = sub_seed(ws.config.seed, &format!("target-{id}"));
    cfg.validate()?;
    Ok(cfg)
}

pub fn stage_train_target(ws: &Workspace, id: &str) -> Result<RunManifest> {
    let half = model_index(id)?;
    let mut run = ws.begin("train-target", id);
    let world = read_world(&mut run)?;
    let mut model = Transformer::new(target_config(ws, &world, id)?)?;
    let mut tc = ws.config.target_training.clone();
    tc.seed = sub_seed(ws.config.seed, &format!("target-train-{id}"));
    let (curve, rate) = build_hint_following_target(
        &mut model,
        &world,
        Some(half),
        ws.config.hint_follow,
        ws.config.hint_style,
        &tc,
    )?;
    run.note("changed_rate", format!("{rate:.4}"));
    write_curve(&mut run, &format!("targets/{id}-loss.csv"), &curve)?;
    write_model(&mut run, &target_path(id), &model)?;
    run.finish()
}

pub fn stage_train_sae(ws: &Workspace, id: &str) -> Result<RunManifest> {
    let mut run = ws.begin("train-sae", id);
    let world = read_world(&mut run)?;
    let model = read_model(&mut run, &target_path(id), "train-target")?;
    let corpus = world.eval_corpus(ws.config.label_corpus);
    let layers: Vec<usize> = (0..model.layers()).collect();
    let taps = collect_activations(&model, &corpus, &layers)?;
    let mut saes = Vec::new();
    let mut stats = String::from("layer,mse,zero_mse,mean_l0\n");
    for &l in &layers {
        let mut cfg = ws.config.sae.clone();
        cfg.seed = sub_seed(ws.config.seed, &format!("sae-{id}-{l}"));
        let (sae, s) = train_sae(&taps_matrix(&taps, l), l, &cfg)?;
        stats.push_str(&format!("{l},{:.6},{:.6},{:.3}\n", s.mse, s.zero_mse, s.mean_l0));
        run.write(&format!("saes/{id}-l{l}.ixck"), &sae.to_container().to_bytes()?)?;
        saes.push(sae);
    }
    let features = extract_features(&saes);
    run.note("features", features.len());
    run.write(&format!("saes/{id}-stats.csv"), stats.as_bytes())?;
    write_records(&mut run, &format!("features/{id}.jsonl"), &features)?;
    run.finish()
}

fn labeling_corpus<'g>(ws: &Workspace, world: &World, grammar: &'g Grammar) -> Result<LabelingCorpus<'g>> {
    LabelingCorpus::new(grammar, world.eval_corpus(ws.config.label_corpus))
}

pub fn stage_label_features(ws: &Workspace, id: &str) -> Result<RunManifest> {
    let mut run = ws.begin("label-features", id);
    let world = read_world(&mut run)?;
    let model = read_model(&mut run, &target_path(id), "train-target")?;
    let features: Vec<FeatureDirection> = read_records(&mut run, &format!("features/{id}.jsonl"), "train-sae")?;
    let grammar = Grammar::build(&world.vocab);
    let lc = labeling_corpus(ws, &world, &grammar)?;
    let labeled = label_features(&model, &features, &lc)?;
    let kept: Vec<LabeledFeature> = labeled
        .iter()
        .filter(|f| f.score >= ws.config.label_min_score)
        .cloned()
        .collect();
    run.note("features", labeled.len());
    run.note("labelable", kept.len());
    let split = split_features(kept, ws.config.holdout_per_layer, sub_seed(ws.config.seed, &format!("split-{id}")));
    if split.train.is_empty() || split.heldout.is_empty() {
        return Err(Error::Dataset(format!(
            "target {id}: {} training and {} held-out features after filtering at score {}",
            split.train.len(),
            split.heldout.len(),
            ws.config.label_min_score
        )));
    }
    let mut csv = String::from("feature,layer,label,score,split\n");
    let held: std::collections::BTreeSet<&str> = split.heldout.iter().map(|f| f.feature.id.as_str()).collect();
    for f in &labeled {
        let which = if f.score < ws.config.label_min_score {
            "dropped"
        } else if held.contains(f.feature.id.as_str()) {
            "heldout"
        } else {
            "train"
        };
        csv.push_str(&format!(
            "{},{},{},{:.6},{which}\n",
            f.feature.id,
            f.feature.layer,
            grammar.get(f.label)?.text,
            f.score
        ));
    }
    run.write(&format!("labels/{id}-summary.csv"), csv.as_bytes())?;
    write_records(&mut run, &format!("labels/{id}-train.jsonl"), &split.train)?;
    write_records(&mut run, &format!("labels/{id}-heldout.jsonl"), &split.heldout)?;
    run.finish()
}

/// Patch samples, census and the location-probe records of one target.
fn empty_dataset(stage: &str, id: &str, raw: usize, invalid: usize) -> Error {
    Error::Stage {
        stage: stage.into(),
        reason: format!(
            "target {id} yields no balanced samples ({raw} valid, {invalid} invalid); train the target longer"
        ),
    }
}

pub fn stage_gen_patch(ws: &Workspace, id: &str) -> Result<RunManifest> {
    let mut run = ws.begin("gen-patch-data", id);
    let world = read_world(&mut run)?;
    let model = read_model(&mut run, &target_path(id), "train-target")?;
    let seed = ws.config.seed;
    let pairs = make_counterfactual_pairs(&world, Some(ws.config.patch_pairs), sub_seed(seed, &format!("pairs-{id}")))?;
    let (raw, invalid) = label_patch_samples(&model, &world, &pairs)?;
    let (balanced, census) = balance_patch_dataset(&raw, ws.config.patch_cap, sub_seed(seed, &format!("balance-{id}")));
    run.note("pairs", pairs.len());
    run.note("raw", raw.len());
    run.note("invalid", invalid);
    run.note("kept", balanced.len());
    if balanced.is_empty() {
        return Err(empty_dataset("gen-patch-data", id, raw.len(), invalid));
    }
    let (train, test) = split_by_pair(balanced, ws.config.patch_test_fraction, sub_seed(seed, &format!("patch-split-{id}")));
    run.write(&format!("patch/{id}-census.csv"), census.to_csv().as_bytes())?;
    write_records(&mut run, &format!("patch/{id}-train.jsonl"), &train)?;
    write_records(&mut run, &format!("patch/{id}-test.jsonl"), &test)?;

    let mut inputs: Vec<Vec<u32>> = world.prompts.iter().map(|p| p.ids.clone()).collect();
    inputs.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, &format!("location-{id}"))));
    inputs.truncate(ws.config.location_inputs);
    let n_test = ((inputs.len() as f64) * ws.config.location_test_fraction).round() as usize;
    let test_inputs = inputs.split_off(inputs.len() - n_test.min(inputs.len()));
    let loc_train = build_location_dataset(&model, &world.vocab, &inputs)?;
    let mut loc_test = build_location_dataset(&model, &world.vocab, &test_inputs)?;
    loc_test.iter_mut().for_each(|r| r.id = format!("test-{}", r.id));
    write_records(&mut run, &format!("location/{id}-train.jsonl"), &loc_train)?;
    write_records(&mut run, &format!("location/{id}-test.jsonl"), &loc_test)?;
    run.finish()
}

pub fn stage_gen_ablate(ws: &Workspace, id: &str) -> Result<RunManifest> {
    let mut run = ws.begin("gen-ablate-data", id);
    let world = read_world(&mut run)?;
    let model = read_model(&mut run, &target_path(id), "train-target")?;
    let (raw, invalid) = label_ablate_samples(&model, &world.vocab, &world.questions, ws.config.hint_style)?;
    let cap = (ws.config.ablate_cap > 0).then_some(ws.config.ablate_cap);
    let (balanced, census) = balance_ablate_dataset(&raw, cap, sub_seed(ws.config.seed, &format!("ablate-balance-{id}")));
    run.note("raw", raw.len());
    run.note("invalid", invalid);
    run.note("changed_rate", format!("{:.4}", changed_rate(&raw)));
    run.note("kept", balanced.len());
    if balanced.is_empty() {
        return Err(empty_dataset("gen-ablate-data", id, raw.len(), invalid));
    }
    let (train, test) = split_by_question(
        balanced,
        ws.config.ablate_test_fraction,
        sub_seed(ws.config.seed, &format!("ablate-split-{id}")),
    );
    run.write(&format!("ablate/{id}-census.csv"), census.to_csv().as_bytes())?;
    write_records(&mut run, &format!("ablate/{id}-train.jsonl"), &train)?;
    write_records(&mut run, &format!("ablate/{id}-test.jsonl"), &test)?;
    run.finish()
}

pub fn projection_path(target: &str, explainer: &str) -> String {
    format!("proj/{target}-to-{explainer}.ixck")
}

pub fn stage_pretrain_proj(ws: &Workspace, target: &str, explainer: &str) -> Result<RunManifest> {
    let mut run = ws.begin("pretrain-proj", &format!("{target}-to-{explainer}"));
    let world = read_world(&mut run)?;
    let mt = read_model(&mut run, &target_path(target), "train-target")?;
    let me = read_model(&mut run, &target_path(explainer), "train-target")?;
    let fit = pretrain_projection(&mt, &me, &world.eval_corpus(ws.config.align_corpus))?;
    let mut csv = String::from("layer,relative_residual,ridge\n");
    for (l, r) in &fit.residuals {
        csv.push_str(&format!("{l},{r:.6},{}\n", fit.ridge_layers.contains(l)));
    }
    run.note("ridge_layers", format!("{:?}", fit.ridge_layers));
    run.write(&format!("proj/{target}-to-{explainer}-fit.csv"), csv.as_bytes())?;
    run.write(&projection_path(target, explainer), &projections_to_container(&fit.projections).to_bytes()?)?;
    run.finish()
}

/// One trained explainer: task, models, projection mode, data fraction
/// and input ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainerSpec {
    pub task: Task,
    pub explainer: String,
    pub target: String,
    pub mode: ProjectionMode,
    pub fraction: f64,
    pub ablations: Ablations,
}

impl ExplainerSpec {
    /// Self-explanation without projections on the full data.
    pub fn self_explainer(task: Task, id: &str) -> Self {
        Self {
            task,
            explainer: id.into(),
            target: id.into(),
            mode: ProjectionMode::Identity,
            fraction: 1.0,
            ablations: Ablations::default(),
        }
    }

    /// Input-ablation explainers read no vectors, so their mode is
    /// always identity.
    pub fn cross(task: Task, explainer: &str, target: &str, mode: ProjectionMode) -> Self {
        Self {
            task,
            explainer: explainer.into(),
            target: target.into(),
            mode: if task == Task::Ablate { ProjectionMode::Identity } else { mode },
            fraction: 1.0,
            ablations: Ablations::default(),
        }
    }

    pub fn key(&self) -> String {
        format!(
            "{}-{}-on-{}-{}-f{}-{}",
            self.task,
            self.explainer,
            self.target,
            self.mode.name(),
            self.fraction,
            self.ablations.tag()
        )
    }

    fn seed(&self, run_seed: u64) -> u64 {
        sub_seed(run_seed, &format!("explainer-{}", self.key()))
    }
}

pub fn explainer_path(key: &str) -> String {
    format!("explainers/{key}.ixck")
}

pub fn explainer_proj_path(key: &str) -> String {
    format!("explainers/{key}.proj.ixck")
}

pub fn stage_train_explainer(ws: &Workspace, spec: &ExplainerSpec) -> Result<RunManifest> {
    spec.ablations.validate()?;
    let key = spec.key();
    let mut run = ws.begin("train-explainer", &key);
    let world = read_world(&mut run)?;
    let vocab = &world.vocab;
    let target = read_model(&mut run, &target_path(&spec.target), "train-target")?;
    let mut explainer = read_model(&mut run, &target_path(&spec.explainer), "train-target")?;
    explainer.set_rescale_slots(ws.config.rescale_slots);
    let seed = spec.seed(ws.config.seed);
    let mode = if spec.task == Task::Ablate { ProjectionMode::Identity } else { spec.mode };
    let pretrained = match mode {
        ProjectionMode::Joint | ProjectionMode::Frozen => {
            let bytes = need(run.read(&projection_path(&spec.target, &spec.explainer)), "pretrain-proj")?;
            Some(projections_from_container(Container::from_bytes(&bytes)?)?)
        }
        _ => None,
    };
    let mut proj = mode.initial(target.layers(), target.hidden(), explainer.hidden(), pretrained.as_ref(), seed)?;
    let t = &spec.target;
    let curve = match spec.task {
        Task::Feat => {
            let train: Vec<LabeledFeature> = read_records(&mut run, &format!("labels/{t}-train.jsonl"), "label-features")?;
            let sub = subsample(&train, spec.fraction, seed)?;
            let grammar = Grammar::build(vocab);
            let split = FeatureSplit {
                train: sub,
                heldout: Vec::new(),
            };
            let (records, _) = build_feature_dataset(vocab, &grammar, &split, seed)?;
            run.note("records", records.len());
            let tc = ws.config.feat.for_records(records.len(), seed);
            run.note("epochs", tc.epochs);
            train_explainer_feat(&mut explainer, &records, proj.as_mut(), mode, &tc)?
        }
        Task::Patch => {
            let samples: Vec<PatchSample> = read_records(&mut run, &format!("patch/{t}-train.jsonl"), "gen-patch-data")?;
            let sub = take_fraction(&samples, spec.fraction, seed)?;
            let records = render_patch_records(vocab, &sub, spec.ablations, seed)?;
            run.note("records", records.len());
            let tc = ws.config.patch.for_records(records.len(), seed);
            run.note("epochs", tc.epochs);
            train_explainer_patch(&mut explainer, &records, proj.as_mut(), mode, &tc)?
        }
        Task::Ablate => {
            let samples: Vec<AblateSample> = read_records(&mut run, &format!("ablate/{t}-train.jsonl"), "gen-ablate-data")?;
            let sub = take_fraction(&samples, spec.fraction, seed)?;
            let records: Vec<_> = sub.iter().map(|s| render_ablate_record(vocab, s)).collect();
            run.note("records", records.len());
            let tc = ws.config.ablate.for_records(records.len(), seed);
            run.note("epochs", tc.epochs);
            train_explainer_input(&mut explainer, &records, &tc)?
        }
        Task::Location => {
            let recs: Vec<LocationRecord> = read_records(&mut run, &format!("location/{t}-train.jsonl"), "gen-patch-data")?;
            let sub = take_fraction(&recs, spec.fraction, seed)?;
            run.note("records", sub.len());
            let tc = ws.config.location.for_records(sub.len(), seed);
            run.note("epochs", tc.epochs);
            let projected = proj.is_some();
            let examples = sub.iter().map(|r| r.example(projected)).collect();
            train_with_projections(&mut explainer, examples, proj.as_mut(), mode, &tc)?
        }
    };
    write_curve(&mut run, &format!("explainers/{key}-loss.csv"), &curve)?;
    write_model(&mut run, &explainer_path(&key), &explainer)?;
    if let Some(p) = &proj {
        run.write(&explainer_proj_path(&key), &projections_to_container(p).to_bytes()?)?;
    }
    run.finish()
}

/// Comparison methods that need no explainer training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Baseline {
    NnAll,
    NnLayer,
    Selfie,
    ZeroShotPatch,
    ZeroShotAblate,
}

impl Baseline {
    pub const ALL: [Baseline; 5] = [Self::NnAll, Self::NnLayer, Self::Selfie, Self::ZeroShotPatch, Self::ZeroShotAblate];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline `{s}`")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::NnAll => "nn-all",
            Self::NnLayer => "nn-layer",
            Self::Selfie => "selfie",
            Self::ZeroShotPatch => "zero-shot-patch",
            Self::ZeroShotAblate => "zero-shot-ablate",
        }
    }

    pub fn task(self) -> Task {
        match self {
            Self::NnAll | Self::NnLayer | Self::Selfie => Task::Feat,
            Self::ZeroShotPatch => Task::Patch,
            Self::ZeroShotAblate => Task::Ablate,
        }
    }
}

/// What an evaluation scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Subject {
    Explainer(ExplainerSpec),
    Baseline { baseline: Baseline, target: String },
}

impl Subject {
    pub fn key(&self) -> String {
        match self {
            Self::Explainer(s) => s.key(),
            Self::Baseline { baseline, target } => format!("baseline-{}-on-{target}", baseline.name()),
        }
    }

    pub fn task(&self) -> Task {
        match self {
            Self::Explainer(s) => s.task,
            Self::Baseline { baseline, .. } => baseline.task(),
        }
    }

    pub fn target(&self) -> &str {
        match self {
            Self::Explainer(s) => &s.target,
            Self::Baseline { target, .. } => target,
        }
    }
}

/// Scores of one subject on the held-out split of one target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub subject: String,
    pub task: Task,
    pub target: String,
    /// Aggregate metrics (means).
    pub metrics: BTreeMap<String, f64>,
    pub item_ids: Vec<String>,
    /// Per-item values aligned with `item_ids`.
    pub items: BTreeMap<String, Vec<f64>>,
}

impl EvalSummary {
    fn new(subject: String, task: Task, target: &str) -> Self {
        Self {
            subject,
            task,
            target: target.into(),
            metrics: BTreeMap::new(),
            item_ids: Vec::new(),
            items: BTreeMap::new(),
        }
    }

    pub fn item(&self, metric: &str) -> Result<&[f64]> {
        self.items
            .get(metric)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Dataset(format!("{} has no per-item `{metric}`", self.subject)))
    }

    pub fn mean_stderr(&self, metric: &str) -> Result<(f64, f64)> {
        Ok(mean_stderr(self.item(metric)?))
    }

    fn with_items(mut self, ids: Vec<String>, items: Vec<(&str, Vec<f64>)>) -> Self {
        for (k, v) in items {
            self.metrics.insert(k.into(), mean_stderr(&v).0);
            self.items.insert(k.into(), v);
        }
        self.item_ids = ids;
        self
    }
}

pub fn eval_path(key: &str) -> String {
    format!("eval/{key}.json")
}

pub fn read_eval(ws: &Workspace, key: &str) -> Result<EvalSummary> {
    let (bytes, _) = ws.read_verified(&eval_path(key))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Serialize)]
struct Prediction<'a> {
    id: &'a str,
    predicted: String,
    gold: String,
}

fn outcome_summary(subject: String, task: Task, target: &str, records: &[OutcomeRecord], eos: u32) -> EvalSummary {
    let one = |r: &OutcomeRecord, f: fn(&[OutcomeRecord]) -> f64| f(std::slice::from_ref(r));
    let exact: Vec<f64> = records.iter().map(|r| exact_match(std::slice::from_ref(r), eos)).collect();
    let content: Vec<f64> = records.iter().map(|r| one(r, content_match)).collect();
    let branch: Vec<f64> = records.iter().map(|r| one(r, branch_accuracy)).collect();
    let parsed: Vec<f64> = records.iter().map(|r| f64::from(u8::from(r.parsed.is_some()))).collect();
    let mut s = EvalSummary::new(subject, task, target).with_items(
        records.iter().map(|r| r.id.clone()).collect(),
        vec![("exact", exact), ("content", content), ("branch", branch), ("parsed", parsed)],
    );
    s.metrics.insert("has_changed_f1".into(), has_changed_f1(records));
    s
}

/// Scores an explainer or a baseline on the target's held-out data.
/// Explainers must have been trained first.
pub fn stage_eval(ws: &Workspace, subject: &Subject) -> Result<RunManifest> {
    let key = subject.key();
    let stage = if matches!(subject, Subject::Baseline { .. }) { "baseline" } else { "eval" };
    let mut run = ws.begin(stage, &key);
    let world = read_world(&mut run)?;
    let vocab = &world.vocab;
    let t = subject.target().to_string();
    let target = read_model(&mut run, &target_path(&t), "train-target")?;

    let (model, proj): (Transformer, Option<ProjectionSet>) = match subject {
        Subject::Explainer(spec) => {
            let path = explainer_path(&key);
            if !ws.exists(&path) {
                return Err(Error::Stage {
                    stage: "eval".into(),
                    reason: format!("no trained explainer `{key}`; run train-explainer first or evaluate a baseline"),
                });
            }
            let m = read_model(&mut run, &path, "train-explainer")?;
            let p = if ws.exists(&explainer_proj_path(&key)) {
                let bytes = run.read(&explainer_proj_path(&key))?;
                Some(projections_from_container(Container::from_bytes(&bytes)?)?)
            } else {
                None
            };
            let _ = spec;
            (m, p)
        }
        Subject::Baseline { .. } => (target.clone(), None),
    };

    let mut predictions: Vec<(String, String, String)> = Vec::new();
    let summary = match subject.task() {
        Task::Feat => {
            let heldout: Vec<LabeledFeature> = read_records(&mut run, &format!("labels/{t}-heldout.jsonl"), "label-features")?;
            let grammar = Grammar::build(vocab);
            let lc = labeling_corpus(ws, &world, &grammar)?;
            let judge = LexicalJudge::new(&grammar, lc.corpus())?;
            let preds: Vec<(LabeledFeature, Vec<Vec<u32>>)> = match subject {
                Subject::Explainer(_) => describe_all(&model, vocab, proj.as_ref(), &heldout, 0)?,
                Subject::Baseline { baseline, .. } => match baseline {
                    Baseline::NnAll | Baseline::NnLayer => {
                        let train: Vec<LabeledFeature> =
                            read_records(&mut run, &format!("labels/{t}-train.jsonl"), "label-features")?;
                        let index = FeatureIndex::build(
                            train
                                .iter()
                                .map(|f| IndexEntry {
                                    id: f.feature.id.clone(),
                                    layer: f.feature.layer,
                                    vector: f.feature.vector.clone(),
                                    label: f.label,
                                })
                                .collect(),
                        )?;
                        let mut out = Vec::new();
                        for f in &heldout {
                            let hit = if *baseline == Baseline::NnAll {
                                index.nn_all(&f.feature.vector)?
                            } else {
                                index.nn_layer(&f.feature.vector, f.feature.layer)?
                            };
                            out.push((f.clone(), vec![grammar.get(hit.label)?.tokens.clone()]));
                        }
                        out
                    }
                    Baseline::Selfie => {
                        let mut table = String::from("feature,scale,decode,label,score\n");
                        let mut taps = BTreeMap::new();
                        let mut out = Vec::new();
                        for f in &heldout {
                            let l = f.feature.layer;
                            if !taps.contains_key(&l) {
                                taps.insert(l, layer_taps(&target, lc.corpus(), l)?);
                            }
                            let acts = activation_series(&taps[&l], &f.feature.vector);
                            let r = selfie_describe(&target, vocab, &lc, &acts, &f.feature.vector, &ws.config.selfie_scales)?;
                            for (s, dec, label, score) in &r.per_scale {
                                let label = label.map_or(Ok(String::from("-")), |l| grammar.get(l).map(|g| g.text.clone()))?;
                                table.push_str(&format!("{},{s},{},{label},{score:.6}\n", f.feature.id, vocab.render(dec)));
                            }
                            let best = &r.per_scale[r.best];
                            let tokens = match best.2 {
                                Some(l) => grammar.get(l)?.tokens.clone(),
                                None => best.1.clone(),
                            };
                            out.push((f.clone(), vec![tokens]));
                        }
                        run.write(&format!("eval/{key}-scales.csv"), table.as_bytes())?;
                        out
                    }
                    _ => unreachable!("feature baselines only"),
                },
            };
            for (f, ps) in &preds {
                for p in ps {
                    predictions.push((f.feature.id.clone(), vocab.render(p), grammar.get(f.label)?.text.clone()));
                }
            }
            let scores = score_predictions(&judge, &lc, &target, &preds)?;
            EvalSummary::new(key.clone(), Task::Feat, &t).with_items(
                scores.feature_ids.clone(),
                vec![("judge", scores.judge.clone()), ("simulator", scores.simulator.clone())],
            )
        }
        Task::Patch => {
            let samples: Vec<PatchSample> = read_records(&mut run, &format!("patch/{t}-test.jsonl"), "gen-patch-data")?;
            let ablations = match subject {
                Subject::Explainer(s) => s.ablations,
                Subject::Baseline { .. } => Ablations::default(),
            };
            let records = render_patch_records(vocab, &samples, ablations, sub_seed(ws.config.seed, &format!("patch-test-{t}")))?;
            let outcomes = match subject {
                Subject::Explainer(_) => evaluate_patch(&model, vocab, proj.as_ref(), &records)?,
                Subject::Baseline { .. } => records
                    .iter()
                    .zip(&samples)
                    .map(|(r, s)| {
                        let pred = zero_shot_patch(&model, vocab, &r.seq(None)?, &s.x)?;
                        OutcomeRecord::new(vocab, r.sample_id.clone(), pred, r.gold.clone())
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            for o in &outcomes {
                predictions.push((o.id.clone(), vocab.render(&o.predicted), vocab.render(&o.gold)));
            }
            outcome_summary(key.clone(), Task::Patch, &t, &outcomes, vocab.eos())
        }
        Task::Ablate => {
            let samples: Vec<AblateSample> = read_records(&mut run, &format!("ablate/{t}-test.jsonl"), "gen-ablate-data")?;
            let records: Vec<_> = samples.iter().map(|s| render_ablate_record(vocab, s)).collect();
            let outcomes = match subject {
                Subject::Explainer(_) => evaluate_ablate(&model, vocab, &records)?,
                Subject::Baseline { .. } => records
                    .iter()
                    .map(|r| {
                        let q = crate::model::TokenSeq::new(r.prompt.clone());
                        OutcomeRecord::new(vocab, r.sample_id.clone(), zero_shot_ablate(&model, vocab, &q)?, r.gold.clone())
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            for o in &outcomes {
                predictions.push((o.id.clone(), vocab.render(&o.predicted), vocab.render(&o.gold)));
            }
            outcome_summary(key.clone(), Task::Ablate, &t, &outcomes, vocab.eos())
        }
        Task::Location => {
            let recs: Vec<LocationRecord> = read_records(&mut run, &format!("location/{t}-test.jsonl"), "gen-patch-data")?;
            let mut hits = Vec::with_capacity(recs.len());
            for r in &recs {
                let got = decode_location(&model, vocab, proj.as_ref(), &r.vector, r.layers[0], &r.x)?;
                hits.push(f64::from(u8::from(got.as_ref() == Some(&(r.t, r.layers.clone())))));
                let shown = match &got {
                    Some((t, layers)) => location_explanation(vocab, *t, layers)?,
                    None => Vec::new(),
                };
                predictions.push((r.id.clone(), vocab.render(&shown), vocab.render(&r.gold)));
            }
            EvalSummary::new(key.clone(), Task::Location, &t)
                .with_items(recs.iter().map(|r| r.id.clone()).collect(), vec![("exact", hits)])
        }
    };
    let lines: Vec<Prediction<'_>> = predictions
        .iter()
        .map(|(id, p, g)| Prediction {
            id,
            predicted: p.clone(),
            gold: g.clone(),
        })
        .collect();
    write_records(&mut run, &format!("eval/{key}-predictions.jsonl"), &lines)?;
    for (k, v) in &summary.metrics {
        run.note(k, format!("{v:.6}"));
    }
    run.write(&eval_path(&key), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    run.finish()
}

/// One explainer compared in the alignment study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignRow {
    pub variant: String,
    pub key: String,
    pub dot_similarity: f64,
    pub sae_pattern_similarity: f64,
    pub judge: f64,
}

/// Alignment of each (already trained and evaluated) feature explainer
/// with the target, next to its judge score.
pub fn stage_align(ws: &Workspace, target_id: &str, variants: &[(String, ExplainerSpec)]) -> Result<(RunManifest, Vec<AlignRow>, f64)> {
    let mut run = ws.begin("align", target_id);
    let world = read_world(&mut run)?;
    let target = read_model(&mut run, &target_path(target_id), "train-target")?;
    let heldout: Vec<LabeledFeature> =
        read_records(&mut run, &format!("labels/{target_id}-heldout.jsonl"), "label-features")?;
    let corpus = world.eval_corpus(ws.config.align_corpus);
    let label_corpus = world.eval_corpus(ws.config.label_corpus);
    // top three exemplars per held-out feature by peak activation
    let mut taps = BTreeMap::new();
    let mut features = Vec::new();
    let mut exemplars = Vec::new();
    for f in &heldout {
        let l = f.feature.layer;
        if !taps.contains_key(&l) {
            taps.insert(l, layer_taps(&target, &label_corpus, l)?);
        }
        let acts = activation_series(&taps[&l], &f.feature.vector);
        let mut order: Vec<(usize, f32)> = acts
            .iter()
            .enumerate()
            .map(|(i, a)| (i, a.iter().cloned().fold(f32::NEG_INFINITY, f32::max)))
            .collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        features.push((l, f.feature.vector.clone()));
        exemplars.push(order.iter().take(3).map(|(i, _)| label_corpus[*i].clone()).collect::<Vec<_>>());
    }
    let mut rows = Vec::new();
    let mut csv = String::from("variant,explainer,dot_similarity,sae_pattern_similarity,judge\n");
    for (name, spec) in variants {
        if spec.task != Task::Feat || spec.target != target_id {
            return Err(Error::Config(format!("alignment variant {name} is not a feature explainer of {target_id}")));
        }
        let key = spec.key();
        let m = read_model(&mut run, &explainer_path(&key), "train-explainer")?;
        let p = if ws.exists(&explainer_proj_path(&key)) {
            Some(projections_from_container(Container::from_bytes(&run.read(&explainer_proj_path(&key))?)?)?)
        } else {
            None
        };
        let summary: EvalSummary = serde_json::from_slice(&need(run.read(&eval_path(&key)), "eval")?)?;
        let row = AlignRow {
            variant: name.clone(),
            key: key.clone(),
            dot_similarity: dot_similarity(&m, &target, p.as_ref(), &corpus)?,
            sae_pattern_similarity: sae_pattern_similarity(&m, &target, p.as_ref(), &features, &exemplars)?,
            judge: summary.mean_stderr("judge")?.0,
        };
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            row.variant, row.key, row.dot_similarity, row.sae_pattern_similarity, row.judge
        ));
        rows.push(row);
    }
    let dots: Vec<f64> = rows.iter().map(|r| r.dot_similarity).collect();
    let judges: Vec<f64> = rows.iter().map(|r| r.judge).collect();
    let rho = spearman(&dots, &judges)?;
    run.note("spearman_dot_judge", format!("{rho:.6}"));
    run.write(&format!("align/{target_id}.csv"), csv.as_bytes())?;
    let m = run.finish()?;
    Ok((m, rows, rho))
}

/// Stored summary of a finished stage.
pub fn manifest_note(ws: &Workspace, stage: &str, key: &str, note: &str) -> Result<Option<String>> {
    Ok(ws
        .manifests()?
        .into_iter()
        .find(|m| m.stage == stage && m.key == key)
        .and_then(|m| m.meta.get(note).cloned()))
}

/// Hidden states of a target at one layer for a set of inputs.
pub fn read_target(ws: &Workspace, id: &str) -> Result<Transformer> {
    let (bytes, _) = ws.read_verified(&target_path(id))?;
    model_from_container(Container::from_bytes(&bytes)?)
}

pub fn read_world_verified(ws: &Workspace) -> Result<World> {
    let (bytes, _) = ws.read_verified("world.json")?;
    World::from_json(std::str::from_utf8(&bytes).map_err(|e| Error::Format(e.to_string()))?)
}

pub fn read_jsonl_verified<T: DeserializeOwned>(ws: &Workspace, rel: &str) -> Result<Vec<T>> {
    let (bytes, _) = ws.read_verified(rel)?;
    from_jsonl(std::str::from_utf8(&bytes).map_err(|e| Error::Format(e.to_string()))?)
}
