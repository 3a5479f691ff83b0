// SPDX-License-Identifier: MIT OR Apache-2.0

//! Artifact store: every file written by a stage is listed, with its
//! SHA-256, in exactly one manifest; reads verify the hash first.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{hex, RunConfig};
use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub key: String,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub wall_ms: u128,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
    pub meta: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// A run directory plus its configuration.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
    pub config: RunConfig,
}

impl Workspace {
    /// Creates the directory and records the configuration in it. An
    /// existing directory must have been created with the same config.
    pub fn create(root: &Path, config: RunConfig) -> Result<Self> {
        fs::create_dir_all(root.join("manifests"))?;
        let cfg_path = root.join("config.conf");
        if cfg_path.exists() {
            let old = fs::read_to_string(&cfg_path)?;
            if old != config.canonical {
                return Err(Error::Config(format!(
                    "{} was created with a different configuration",
                    root.display()
                )));
            }
        } else {
            fs::write(&cfg_path, &config.canonical)?;
        }
        Ok(Self {
            root: root.to_path_buf(),
            config,
        })
    }

    /// Opens an existing run directory using its recorded configuration.
    pub fn open(root: &Path) -> Result<Self> {
        let cfg_path = root.join("config.conf");
        if !cfg_path.exists() {
            return Err(Error::MissingArtifact {
                name: "config.conf".into(),
                path: cfg_path,
            });
        }
        let config = RunConfig::load(&cfg_path)?;
        Ok(Self {
            root: root.to_path_buf(),
            config,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    fn manifest_name(stage: &str, key: &str) -> String {
        let key: String = key
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect();
        format!("manifests/{stage}--{key}.json")
    }

    pub fn manifests(&self) -> Result<Vec<RunManifest>> {
        let mut out = Vec::new();
        let dir = self.path("manifests");
        if !dir.exists() {
            return Ok(out);
        }
        let mut names: Vec<PathBuf> = fs::read_dir(&dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        names.sort();
        for p in names {
            if p.extension().is_some_and(|e| e == "json") {
                out.push(serde_json::from_str(&fs::read_to_string(&p)?)?);
            }
        }
        Ok(out)
    }

    /// Manifest that produced `rel`.
    pub fn producer(&self, rel: &str) -> Result<Option<RunManifest>> {
        Ok(self.manifests()?.into_iter().find(|m| m.outputs.iter().any(|o| o.path == rel)))
    }

    /// Reads `rel` after checking its hash against the producing manifest.
    pub fn read_verified(&self, rel: &str) -> Result<(Vec<u8>, ArtifactRef)> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                name: rel.to_string(),
                path,
            });
        }
        let bytes = fs::read(&path)?;
        let actual = sha256_hex(&bytes);
        let m = self.producer(rel)?.ok_or_else(|| Error::Stage {
            stage: "read".into(),
            reason: format!("{rel} is not listed in any manifest"),
        })?;
        let expected = m
            .outputs
            .iter()
            .find(|o| o.path == rel)
            .map(|o| o.sha256.clone())
            .expect("listed");
        if expected != actual {
            return Err(Error::HashMismatch { path, expected, actual });
        }
        Ok((bytes, ArtifactRef { path: rel.into(), sha256: actual }))
    }

    pub fn begin(&self, stage: &str, key: &str) -> StageRun<'_> {
        StageRun {
            ws: self,
            stage: stage.into(),
            key: key.into(),
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    /// Whether a stage with this key already finished and its outputs
    /// still verify.
    pub fn is_done(&self, stage: &str, key: &str) -> Result<bool> {
        let p = self.path(&Self::manifest_name(stage, key));
        if !p.exists() {
            return Ok(false);
        }
        let m: RunManifest = serde_json::from_str(&fs::read_to_string(&p)?)?;
        for o in &m.outputs {
            let fp = self.path(&o.path);
            if !fp.exists() || sha256_hex(&fs::read(&fp)?) != o.sha256 {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Collects the inputs and outputs of one stage execution.
pub struct StageRun<'w> {
    ws: &'w Workspace,
    stage: String,
    key: String,
    started: Instant,
    inputs: Vec<ArtifactRef>,
    outputs: Vec<ArtifactRef>,
    meta: BTreeMap<String, String>,
}

impl StageRun<'_> {
    pub fn workspace(&self) -> &Workspace {
        self.ws
    }

    pub fn read(&mut self, rel: &str) -> Result<Vec<u8>> {
        let (bytes, r) = self.ws.read_verified(rel)?;
        if !self.inputs.contains(&r) {
            self.inputs.push(r);
        }
        Ok(bytes)
    }

    pub fn read_string(&mut self, rel: &str) -> Result<String> {
        String::from_utf8(self.read(rel)?).map_err(|e| Error::Format(format!("{rel}: {e}")))
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.ws.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, bytes)?;
        self.outputs.retain(|o| o.path != rel);
        self.outputs.push(ArtifactRef {
            path: rel.into(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }


    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.inputs.sort();
        self.outputs.sort();
        let m = RunManifest {
            stage: self.stage.clone(),
            key: self.key.clone(),
            config_hash: self.ws.config.hash(),
            seed: self.ws.config.seed,
            tool_version: TOOL_VERSION.into(),
            wall_ms: self.started.elapsed().as_millis(),
            inputs: self.inputs,
            outputs: self.outputs,
            meta: self.meta,
        };
        // an artifact belongs to one manifest: drop it from older ones
        for mut old in self.ws.manifests()? {
            if old.stage == m.stage && old.key == m.key {
                continue;
            }
            let before = old.outputs.len();
            old.outputs.retain(|o| !m.outputs.iter().any(|n| n.path == o.path));
            if old.outputs.len() != before {
                fs::write(
                    self.ws.path(&Workspace::manifest_name(&old.stage, &old.key)),
                    serde_json::to_string_pretty(&old)?,
                )?;
            }
        }
        fs::write(
            self.ws.path(&Workspace::manifest_name(&m.stage, &m.key)),
            serde_json::to_string_pretty(&m)?,
        )?;
        Ok(m)
    }
}
