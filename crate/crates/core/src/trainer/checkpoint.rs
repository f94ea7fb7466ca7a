//! Versioned JSON checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, TrainConfig, TrainError, TrainHistory, TrainState};
use crate::encoder::EncoderParams;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Parameters, history and optimizer position of a run. Holds no wall-clock
/// data, so identical runs write identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub training_config_hash: String,
    pub config: TrainConfig,
    pub params: EncoderParams,
    pub history: TrainHistory,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, params: &EncoderParams, history: &TrainHistory, state: &TrainState) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            training_config_hash: config.hash(),
            config: config.clone(),
            params: params.clone(),
            history: history.clone(),
            state: state.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| TrainError::SchemaVersionMismatch(format!("unreadable checkpoint: {e}")))?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_FORMAT_VERSION as u64 => {}
            other => {
                return Err(TrainError::SchemaVersionMismatch(format!(
                    "checkpoint format_version {other:?}, expected {CHECKPOINT_FORMAT_VERSION}"
                )))
            }
        }
        let ckpt: Checkpoint = serde_json::from_value(value)
            .map_err(|e| TrainError::SchemaVersionMismatch(format!("malformed checkpoint: {e}")))?;
        if ckpt.training_config_hash != ckpt.config.hash() {
            return Err(TrainError::SchemaVersionMismatch("config hash does not match the stored config".into()));
        }
        Ok(ckpt)
    }
}

/// Writes through a temporary sibling and a rename.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    std::fs::write(&tmp, ckpt.to_json()).map_err(|e| TrainError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| TrainError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
    Checkpoint::from_json(&text)
}
