//! Self-describing checkpoint documents: JSON key-value files holding the
//! architecture tag, all weight matrices, mask logits, temperature, noise
//! variances, the missingness model, and Lipschitz metadata. Values
//! round-trip exactly (shortest decimal that restores the same f64).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::EdgePattern;
use crate::likelihood::NoiseModel;
use crate::missing::MnarModel;
use crate::sem::{GumbelMask, SemModel};
use crate::synth::Instance;
use crate::train::FitState;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// A fitted (or ground-truth) parameter bundle on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub sem: SemModel,
    pub mask: GumbelMask,
    pub noise: NoiseModel,
    pub mnar: MnarModel,
    pub lipschitz_target: f64,
    /// Bound actually certified for the stored weights.
    pub lipschitz_bound: f64,
    /// Whether the fit ran under the acyclicity constraint; evaluation
    /// then extracts with greedy pruning.
    #[serde(default)]
    pub dag_constrained: bool,
}

impl Checkpoint {
    pub fn from_state(state: &FitState, lipschitz_target: f64, dag_constrained: bool) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            sem: state.sem.clone(),
            mask: state.mask.clone(),
            noise: state.noise.clone(),
            mnar: state.mnar.clone(),
            lipschitz_target,
            lipschitz_bound: state.sem.lipschitz_bound(),
            dag_constrained,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: Self =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                doc.version
            )));
        }
        Ok(doc)
    }
}

/// Ground truth written next to a simulated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub version: u32,
    pub sem: SemModel,
    pub noise: NoiseModel,
    pub mnar: MnarModel,
    pub target_pattern: EdgePattern,
    pub m_pattern: EdgePattern,
}

impl TruthSidecar {
    pub fn from_instance(instance: &Instance) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            sem: instance.sem.clone(),
            noise: instance.noise.clone(),
            mnar: instance.mnar.clone(),
            target_pattern: instance.target_pattern.clone(),
            m_pattern: instance.m_pattern.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: Self =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported sidecar version {}",
                doc.version
            )));
        }
        Ok(doc)
    }
}
