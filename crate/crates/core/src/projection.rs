// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer linear maps from the target's hidden space into the
//! explainer's embedding space.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// One `[d_target, d_explainer]` map per target layer. A row vector `v`
/// is projected as `v @ P`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    pub maps: BTreeMap<usize, Matrix>,
}

impl ProjectionSet {
    pub fn identity(layers: usize, d: usize) -> Self {
        Self {
            maps: (0..layers).map(|l| (l, Matrix::identity(d))).collect(),
        }
    }

    /// Gaussian init scaled to roughly preserve norms.
    pub fn random(layers: usize, d_target: usize, d_explainer: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (d_target as f32).sqrt();
        Self {
            maps: (0..layers)
                .map(|l| (l, Matrix::randn(d_target, d_explainer, std, &mut rng)))
                .collect(),
        }
    }

    pub fn get(&self, layer: usize) -> Result<&Matrix> {
        self.maps
            .get(&layer)
            .ok_or_else(|| Error::Shape(format!("no projection for target layer {layer}")))
    }

    pub fn project(&self, layer: usize, v: &[f32]) -> Result<Vec<f32>> {
        let p = self.get(layer)?;
        if v.len() != p.rows() {
            return Err(Error::Shape(format!(
                "feature has {} dims, projection for layer {layer} expects {}",
                v.len(),
                p.rows()
            )));
        }
        Ok(Matrix::row_vector(v.to_vec()).matmul(p).into_vec())
    }

    pub fn all_finite(&self) -> bool {
        self.maps.values().all(Matrix::all_finite)
    }
}

/// How an explainer reads continuous tokens taken from a target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProjectionMode {
    /// Vectors are inserted as they are (same hidden size required).
    Identity,
    /// Pre-trained maps, updated together with the explainer.
    Joint,
    /// Pre-trained maps, kept fixed.
    Frozen,
    /// Random maps, updated together with the explainer.
    Random,
}

impl ProjectionMode {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" => Self::Identity,
            "joint" => Self::Joint,
            "frozen" => Self::Frozen,
            "random" => Self::Random,
            other => return Err(Error::Config(format!("unknown projection mode `{other}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Joint => "joint",
            Self::Frozen => "frozen",
            Self::Random => "random",
        }
    }

    pub fn trainable(self) -> bool {
        matches!(self, Self::Joint | Self::Random)
    }

    /// Initial maps for this mode; `None` for [`ProjectionMode::Identity`].
    pub fn initial(
        self,
        target_layers: usize,
        d_target: usize,
        d_explainer: usize,
        pretrained: Option<&ProjectionSet>,
        seed: u64,
    ) -> Result<Option<ProjectionSet>> {
        match self {
            Self::Identity => {
                if d_target != d_explainer {
                    return Err(Error::Shape(format!(
                        "identity projection needs equal widths, got {d_target} and {d_explainer}"
                    )));
                }
                Ok(None)
            }
            Self::Random => Ok(Some(ProjectionSet::random(target_layers, d_target, d_explainer, seed))),
            Self::Joint | Self::Frozen => pretrained.cloned().map(Some).ok_or_else(|| {
                Error::Config(format!(
                    "projection mode `{}` needs pre-trained projections",
                    self.name()
                ))
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_parse_and_initialise() {
        for m in [ProjectionMode::Identity, ProjectionMode::Joint, ProjectionMode::Frozen, ProjectionMode::Random] {
            assert_eq!(ProjectionMode::parse(m.name()).unwrap(), m);
        }
        assert!(ProjectionMode::parse("learned").is_err());
        assert!(ProjectionMode::Identity.initial(4, 8, 16, None, 0).is_err());
        assert_eq!(ProjectionMode::Identity.initial(4, 8, 8, None, 0).unwrap(), None);
        assert!(ProjectionMode::Joint.initial(4, 8, 16, None, 0).is_err());
        let pre = ProjectionSet::random(4, 8, 16, 1);
        assert_eq!(ProjectionMode::Frozen.initial(4, 8, 16, Some(&pre), 0).unwrap(), Some(pre));
        let r = ProjectionMode::Random.initial(4, 8, 16, None, 2).unwrap().unwrap();
        assert_eq!(r.get(3).unwrap().shape(), (8, 16));
        assert!(ProjectionMode::Random.trainable() && !ProjectionMode::Frozen.trainable());
    }
}
