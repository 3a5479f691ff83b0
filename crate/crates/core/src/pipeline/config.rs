// SPDX-License-Identifier: MIT OR Apache-2.0

//! Flat `key = value` run configuration with `include` support.
//!
//! Every key has a value in the built-in `default.conf`; other files only
//! override. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::projection::ProjectionMode;
use crate::sae::SaeConfig;
use crate::train::TrainConfig;
use crate::world::WorldConfig;

/// Built-in presets, addressable by name from `include` lines.
pub const PRESETS: [(&str, &str); 3] = [
    ("default.conf", include_str!("../../configs/default.conf")),
    ("desk.conf", include_str!("../../configs/desk.conf")),
    ("smoke.conf", include_str!("../../configs/smoke.conf")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Raw key-value pairs in resolution order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    pub values: BTreeMap<String, String>,
}

impl KeyValues {
    /// Parses `text`; `include = x` loads `x` relative to `dir` (or a
    /// built-in preset of that name) at that point.
    pub fn parse(text: &str, dir: Option<&Path>) -> Result<Self> {
        let mut kv = Self::default();
        kv.merge_text(text, dir, 0)?;
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent())
    }

    fn merge_text(&mut self, text: &str, dir: Option<&Path>, depth: usize) -> Result<()> {
        if depth > 8 {
            return Err(Error::Config("include nesting deeper than 8".into()));
        }
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "include" {
                let local: Option<PathBuf> = dir.map(|d| d.join(v)).filter(|p| p.exists());
                match (local, preset(v)) {
                    (Some(p), _) => {
                        let t = fs::read_to_string(&p)?;
                        self.merge_text(&t, p.parent(), depth + 1)?;
                    }
                    (None, Some(t)) => self.merge_text(t, None, depth + 1)?,
                    (None, None) => return Err(Error::Config(format!("cannot resolve include `{v}`"))),
                }
            } else {
                self.values.insert(k.to_string(), v.to_string());
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .values
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("bad value `{raw}` for `{key}`")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw: String = self.get(key)?;
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Config(format!("bad list item `{s}` in `{key}`"))))
            .collect()
    }

    fn train(&self, prefix: &str, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.get(&format!("{prefix}.epochs"))?,
            batch_size: self.get(&format!("{prefix}.batch"))?,
            lr: self.get(&format!("{prefix}.lr"))?,
            warmup_steps: self.get(&format!("{prefix}.warmup"))?,
            grad_clip: self.get(&format!("{prefix}.clip"))?,
            seed,
        })
    }

    /// Canonical `key = value` text (sorted).
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Optimiser settings plus a floor on the number of steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTraining {
    pub train: TrainConfig,
    pub min_steps: usize,
}

impl TaskTraining {
    /// Raises the epoch count so that `records` examples give at least
    /// `min_steps` optimiser steps.
    pub fn for_records(&self, records: usize, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = seed;
        let per_epoch = records.div_ceil(t.batch_size.max(1)).max(1);
        t.epochs = t.epochs.max(self.min_steps.div_ceil(per_epoch));
        t
    }
}

/// Every setting of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub target: ModelConfig,
    pub target_training: TrainConfig,
    pub hint_follow: f64,
    pub hint_style: usize,
    pub sae: SaeConfig,
    pub label_corpus: usize,
    pub label_min_score: f64,
    pub holdout_per_layer: usize,
    pub rescale_slots: bool,
    pub feat: TaskTraining,
    pub patch: TaskTraining,
    pub patch_pairs: usize,
    pub patch_cap: usize,
    pub patch_test_fraction: f64,
    pub ablate: TaskTraining,
    /// 0 caps at the smaller class.
    pub ablate_cap: usize,
    pub ablate_test_fraction: f64,
    pub location: TaskTraining,
    pub location_inputs: usize,
    pub location_test_fraction: f64,
    pub align_corpus: usize,
    pub selfie_scales: Vec<f32>,
    pub fractions: Vec<f64>,
    pub mode: ProjectionMode,
    pub matrix_tasks: Vec<String>,
    /// Canonical text the run was built from.
    pub canonical: String,
}

impl RunConfig {
    /// `default.conf` overlaid with `kv`.
    pub fn from_overrides(kv: &KeyValues) -> Result<Self> {
        let mut all = KeyValues::parse(preset("default.conf").expect("built-in"), None)?;
        for (k, v) in &kv.values {
            if !all.values.contains_key(k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            all.values.insert(k.clone(), v.clone());
        }
        Self::build(&all)
    }

    pub fn from_text(text: &str, dir: Option<&Path>) -> Result<Self> {
        Self::from_overrides(&KeyValues::parse(text, dir)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_overrides(&KeyValues::load(path)?)
    }

    pub fn named(preset_name: &str) -> Result<Self> {
        let text = preset(preset_name).ok_or_else(|| Error::Config(format!("no preset `{preset_name}`")))?;
        Self::from_text(text, None)
    }

    /// Same settings with another master seed.
    pub fn with_seed(&self, seed: u64) -> Result<Self> {
        let mut kv = KeyValues::parse(&self.canonical, None)?;
        kv.set("seed", seed);
        Self::from_overrides(&kv)
    }

    pub fn with(&self, key: &str, value: impl ToString) -> Result<Self> {
        let mut kv = KeyValues::parse(&self.canonical, None)?;
        kv.set(key, value);
        Self::from_overrides(&kv)
    }

    fn build(kv: &KeyValues) -> Result<Self> {
        let seed: u64 = kv.get("seed")?;
        let world = WorldConfig {
            seed,
            subjects: kv.get("world.subjects")?,
            relations: kv.get("world.relations")?,
            objects_per_relation: kv.get("world.objects")?,
            positions: kv.get("world.positions")?,
            prompts_per_fact: kv.get("world.prompts_per_fact")?,
            statements_per_fact: kv.get("world.statements_per_fact")?,
            digit_runs: kv.get("world.digit_runs")?,
            questions_per_fact: kv.get("world.questions_per_fact")?,
        };
        let target = ModelConfig {
            layers: kv.get("target.layers")?,
            hidden: kv.get("target.hidden")?,
            heads: kv.get("target.heads")?,
            vocab: 0,
            context: kv.get("target.context")?,
            mlp_ratio: kv.get("target.mlp_ratio")?,
            seed: 0,
            rescale_slots: false,
        };
        let task = |p: &str| -> Result<TaskTraining> {
            Ok(TaskTraining {
                train: kv.train(p, 0)?,
                min_steps: kv.get(&format!("{p}.min_steps"))?,
            })
        };
        let fractions: Vec<f64> = kv.list("sweep.fractions")?;
        if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("sweep fractions must lie in (0, 1]".into()));
        }
        let hint_follow: f64 = kv.get("hint.follow")?;
        if !(0.0..=1.0).contains(&hint_follow) {
            return Err(Error::Config(format!("hint.follow {hint_follow} is not in [0, 1]")));
        }
        let matrix_tasks: Vec<String> = kv.list("matrix.tasks")?;
        for t in &matrix_tasks {
            crate::pipeline::Task::parse(t)?;
        }
        let cfg = Self {
            seed,
            world,
            target,
            target_training: kv.train("target", seed)?,
            hint_follow,
            hint_style: kv.get("hint.style")?,
            sae: SaeConfig {
                expansion: kv.get("sae.expansion")?,
                l1: kv.get("sae.l1")?,
                steps: kv.get("sae.steps")?,
                batch_size: kv.get("sae.batch")?,
                lr: kv.get("sae.lr")?,
                seed,
            },
            label_corpus: kv.get("label.corpus")?,
            label_min_score: kv.get("label.min_score")?,
            holdout_per_layer: kv.get("label.holdout_per_layer")?,
            rescale_slots: kv.get("explainer.rescale_slots")?,
            feat: task("feat")?,
            patch: task("patch")?,
            patch_pairs: kv.get("patch.pairs")?,
            patch_cap: kv.get("patch.cap")?,
            patch_test_fraction: kv.get("patch.test_fraction")?,
            ablate: task("ablate")?,
            ablate_cap: kv.get("ablate.cap")?,
            ablate_test_fraction: kv.get("ablate.test_fraction")?,
            location: task("location")?,
            location_inputs: kv.get("location.inputs")?,
            location_test_fraction: kv.get("location.test_fraction")?,
            align_corpus: kv.get("align.corpus")?,
            selfie_scales: kv.list("selfie.scales")?,
            fractions,
            mode: ProjectionMode::parse(&kv.get::<String>("proj.mode")?)?,
            matrix_tasks,
            canonical: kv.canonical(),
        };
        Ok(cfg)
    }

    /// SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
