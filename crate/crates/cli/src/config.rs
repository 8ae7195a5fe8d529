//! Experiment configuration: one JSON document with a versioned schema.

use std::path::Path;

use serde::{Deserialize, Serialize};

use flowsem::synth::InstanceSpec;
use flowsem::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Missing-rate sweep grid for the benchmark command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Average missing rates to simulate, e.g. 0.1 through 0.5.
    pub rates: Vec<f64>,
    /// Number of random graphs (seeds) per rate.
    pub seeds: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            rates: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            seeds: 10,
        }
    }
}

/// Top-level experiment file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub instance: InstanceSpec,
    pub train: TrainConfig,
    pub sweep: Option<SweepConfig>,
    pub output_dir: Option<String>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))?;
        if cfg.version != 0 && cfg.version != CONFIG_VERSION {
            anyhow::bail!("config {}: unsupported version {}", path.display(), cfg.version);
        }
        cfg.instance
            .validate()
            .map_err(|e| anyhow::anyhow!("config {}: instance: {e}", path.display()))?;
        cfg.train
            .validate()
            .map_err(|e| anyhow::anyhow!("config {}: train: {e}", path.display()))?;
        if let Some(sweep) = &cfg.sweep {
            if sweep.seeds < 1 {
                anyhow::bail!("config {}: sweep.seeds must be >= 1", path.display());
            }
            if sweep.rates.iter().any(|r| !(0.0..1.0).contains(r)) {
                anyhow::bail!("config {}: sweep rates must lie in [0, 1)", path.display());
            }
        }
        Ok(cfg)
    }
}
