//! Builds a grouped, hierarchical dataset from a flat caption corpus.
//!
//! [`forge`] runs the stages in order:
//!
//! 1. infer an abstraction chain above every image ([`infer_all_chains`]);
//! 2. assemble the chains into a [`ConceptDag`] ([`build_dag`]);
//! 3. merge or drop image groups with fewer than `size_min` images
//!    ([`merge_small_nodes`]);
//! 4. write a generalized caption for every group ([`generalize_captions`]);
//! 5. link groups whose concepts are near-duplicates as hard negatives
//!    ([`mine_hard_negatives`]).
//!
//! Tier numbering: leaves are tier 0, image groups tier 1, broader concepts
//! up to tier `l_max`. Merging and caption generalization act on tier 1.

mod corpus;
mod dag;
mod embed;
pub mod provider;
mod stages;
mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EncoderError;
use crate::numerics::NumericsError;

pub use corpus::{Corpus, CorpusRecord};
pub use dag::{
    build_dag, concept_node_id, dag_from_json, dag_to_json, leaf_node_id, load_dag, save_dag, ConceptDag, ConceptNode,
    LeafData, NodeId, DAG_FORMAT_VERSION,
};
pub use embed::{HashedTrigramEmbedder, TextEmbedder, TrigramEmbedder};
pub use provider::{AbstractionProvider, ProviderError};
pub use stages::{
    embed_level, generalize_captions, infer_abstraction_chain, infer_all_chains, merge_small_nodes, mine_hard_negatives,
    MergeEvent,
};
pub use synth::{synth_taxonomy, GroundTruth, SynthSpec, Synthetic};

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("provider returned an empty concept for {0:?}")]
    EmptyConcept(String),
    #[error("leaf {leaf_id}: chain has {got} levels, expected {expected}")]
    InconsistentChainLength { leaf_id: String, expected: usize, got: usize },
    #[error("no abstraction chain for leaf {0}")]
    MissingChain(String),
    #[error("invalid corpus: {0}")]
    Corpus(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid forge config: {0}")]
    InvalidConfig(String),
    #[error("schema version mismatch: {0}")]
    SchemaVersionMismatch(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

impl From<NumericsError> for ForgeError {
    fn from(e: NumericsError) -> Self {
        ForgeError::Encoder(e.into())
    }
}

impl ForgeError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ForgeError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, ForgeError>;

/// Writes through a temporary sibling file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| ForgeError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| ForgeError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeConfig {
    pub l_max: usize,
    pub size_min: usize,
    pub sim_min: f64,
    pub hard_neg_threshold: f64,
    /// Provider calls in flight during chain inference.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_parallelism() -> usize {
    4
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            l_max: 4,
            size_min: 5,
            sim_min: 0.9,
            hard_neg_threshold: 0.85,
            parallelism: default_parallelism(),
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if self.l_max == 0 || self.size_min == 0 || !unit(self.sim_min) || !unit(self.hard_neg_threshold) {
            return Err(ForgeError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Dataset summary: total image/caption pairs, node counts for tiers
/// `1..=l_max`, and mean images per group node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeStats {
    pub total_pairs: usize,
    pub nodes_per_level: Vec<usize>,
    pub avg_images_per_node: f64,
}

#[derive(Debug, Clone)]
pub struct ForgeOutput {
    pub dag: ConceptDag,
    pub merges: Vec<MergeEvent>,
    pub stats: ForgeStats,
}

pub fn forge(
    corpus: &Corpus,
    cfg: &ForgeConfig,
    provider: &dyn AbstractionProvider,
    embedder: &dyn TextEmbedder,
) -> Result<ForgeOutput> {
    cfg.validate()?;
    corpus.validate()?;
    let chains = infer_all_chains(corpus, cfg.l_max, provider, cfg.parallelism)?;
    let mut dag = build_dag(&chains, corpus, cfg.l_max)?;
    let merges = merge_small_nodes(&mut dag, cfg.size_min, cfg.sim_min, embedder)?;
    generalize_captions(&mut dag, provider)?;
    mine_hard_negatives(&mut dag, cfg.hard_neg_threshold, embedder)?;
    log::info!(
        "forged {} leaves into {} groups ({} merge decisions)",
        dag.num_leaves(),
        dag.group_nodes().len(),
        merges.len()
    );
    let stats = dag.stats();
    Ok(ForgeOutput { dag, merges, stats })
}
