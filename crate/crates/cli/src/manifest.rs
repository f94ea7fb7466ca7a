//! `manifest.json`: what produced the files in an output directory.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    /// Identifier of the dataset the outputs belong to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_id: Option<String>,
    /// Resolved settings, enough to rerun the command.
    pub config: serde_json::Value,
    /// Input paths as given on the command line.
    pub inputs: BTreeMap<String, String>,
    /// Files written, relative to the manifest.
    pub outputs: Vec<String>,
    pub versions: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        let versions = BTreeMap::from([
            ("glass".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("checkpoint_format".to_string(), glass_core::trainer::CHECKPOINT_FORMAT_VERSION.to_string()),
            ("dag_format".to_string(), glass_core::forge::DAG_FORMAT_VERSION.to_string()),
        ]);
        Self {
            command: command.to_string(),
            seed,
            dataset_id: None,
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            versions,
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.to_string(), path.display().to_string());
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
