// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run orchestration: configuration, artifact manifests, the individual
//! stages and the composite experiments built from them.

pub mod config;
pub mod experiments;
pub mod manifest;
pub mod stages;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use config::{KeyValues, RunConfig, TaskTraining};
pub use experiments::{run_all, run_matrix, sweep_data_fraction, write_report};
pub use manifest::{RunManifest, Workspace};
pub use stages::{Baseline, EvalSummary, ExplainerSpec, Subject};

/// What an explainer is trained to say.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Feat,
    Patch,
    Ablate,
    Location,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "feat" => Self::Feat,
            "patch" => Self::Patch,
            "ablate" => Self::Ablate,
            "location" => Self::Location,
            other => return Err(Error::Config(format!("unknown task `{other}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Feat => "feat",
            Self::Patch => "patch",
            Self::Ablate => "ablate",
            Self::Location => "location",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
