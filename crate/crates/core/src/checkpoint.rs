//! Versioned JSON checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::nnet::{AdamState, ParamStore, Tensor};
use crate::priors::PriorSpec;

pub const CHECKPOINT_FORMAT: &str = "flowdet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// RNG position: every stream is derived from the seed and the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: String,
    pub rng: RngState,
    pub prior: PriorSpec,
    pub params: Vec<ParamRecord>,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn capture(det: &Detector, cfg: &RunConfig) -> Self {
        let store = &det.store;
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config_hash: cfg.hash(),
            config: cfg.to_text(),
            rng: RngState { seed: cfg.seed, step: store.step() },
            prior: det.prior.clone(),
            params: store
                .ids()
                .map(|id| {
                    let t = store.tensor(id);
                    ParamRecord { name: store.name(id).to_string(), shape: t.shape.clone(), values: t.values.clone() }
                })
                .collect(),
            optimizer: store.optimizer_state(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoint values are finite");
        s.push('\n');
        s
    }

    /// Parse and check format, version and config hash.
    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Format { line: e.line(), message: e.to_string() })?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format { line: 1, message: format!("not a checkpoint: format {:?}", ck.format) });
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version { expected: CHECKPOINT_VERSION.to_string(), found: ck.version.to_string() });
        }
        let cfg = RunConfig::parse_str(&ck.config)?;
        if cfg.hash() != ck.config_hash {
            return Err(Error::Version { expected: ck.config_hash.clone(), found: cfg.hash() });
        }
        if ck.optimizer.step != ck.rng.step || cfg.seed != ck.rng.seed {
            return Err(Error::Format { line: 1, message: "rng state disagrees with optimizer or config".into() });
        }
        Ok(ck)
    }

    /// Rebuild the config and detector.
    pub fn restore(&self) -> Result<(RunConfig, Detector)> {
        let cfg = RunConfig::parse_str(&self.config)?;
        let mut store = ParamStore::new();
        for p in &self.params {
            store.add(&p.name, Tensor::new(p.shape.clone(), p.values.clone())?)?;
        }
        store.set_optimizer_state(self.optimizer.clone())?;
        let det = Detector::from_parts(&cfg, store, self.prior.clone())?;
        Ok((cfg, det))
    }
}

pub fn save_checkpoint(det: &Detector, cfg: &RunConfig, path: &Path) -> Result<()> {
    std::fs::write(path, Checkpoint::capture(det, cfg).to_json())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, Detector)> {
    Checkpoint::from_json(&std::fs::read_to_string(path)?)?.restore()
}
