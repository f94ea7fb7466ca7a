//! Concept DAG.
//!
//! Tier 0 holds the image/caption leaves, tier 1 the image groups (the most
//! specific concepts) and tiers `2..=l_max` successively broader
//! abstractions. Every edge runs from a node at tier `k` to a parent at tier
//! `k + 1`. Node ids are `l<tier>:<leaf_id>` for leaves and
//! `l<tier>:<normalized concept>` for concepts, so the same concept text at
//! the same tier is always the same node.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, CorpusRecord};
use super::{ForgeConfig, ForgeError, ForgeStats, Result};
use crate::encoder::normalize_text;

pub type NodeId = String;

pub const DAG_FORMAT_VERSION: u32 = 1;

pub fn leaf_node_id(leaf_id: &str) -> NodeId {
    format!("l0:{leaf_id}")
}

pub fn concept_node_id(level: usize, text: &str) -> NodeId {
    format!("l{level}:{}", normalize_text(text))
}

/// Payload carried by tier-0 nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafData {
    pub leaf_id: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alt_captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_features: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptNode {
    pub node_id: NodeId,
    pub level: usize,
    /// Normalized concept text; the caption for leaves.
    pub concept_text: String,
    pub generalized_caption: Option<String>,
    pub children: BTreeSet<NodeId>,
    pub parents: BTreeSet<NodeId>,
    pub hard_negatives: BTreeSet<NodeId>,
    pub leaf_count: usize,
    pub leaf: Option<LeafData>,
}

impl ConceptNode {
    fn new(node_id: NodeId, level: usize, concept_text: String) -> Self {
        Self {
            node_id,
            level,
            concept_text,
            generalized_caption: None,
            children: BTreeSet::new(),
            parents: BTreeSet::new(),
            hard_negatives: BTreeSet::new(),
            leaf_count: 0,
            leaf: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptDag {
    pub l_max: usize,
    pub nodes: BTreeMap<NodeId, ConceptNode>,
}

impl ConceptDag {
    pub fn empty(l_max: usize) -> Self {
        Self {
            l_max,
            nodes: BTreeMap::new(),
        }
    }

    pub fn node(&self, id: &str) -> Option<&ConceptNode> {
        self.nodes.get(id)
    }

    /// Node ids at `level`, sorted.
    pub fn level(&self, level: usize) -> Vec<NodeId> {
        self.nodes.values().filter(|n| n.level == level).map(|n| n.node_id.clone()).collect()
    }

    pub fn group_nodes(&self) -> Vec<NodeId> {
        self.level(1)
    }

    /// Leaf node ids under `id` (itself if it is a leaf), sorted.
    pub fn leaves_of(&self, id: &str) -> BTreeSet<NodeId> {
        let mut out = BTreeSet::new();
        let mut stack = vec![id.to_string()];
        while let Some(cur) = stack.pop() {
            let Some(n) = self.nodes.get(&cur) else { continue };
            if n.level == 0 {
                out.insert(cur);
            } else {
                stack.extend(n.children.iter().cloned());
            }
        }
        out
    }

    /// The tier-`level` ancestor of `id`, following the smallest parent id
    /// wherever a node has several parents.
    pub fn ancestor(&self, id: &str, level: usize) -> Option<NodeId> {
        let mut cur = self.nodes.get(id)?;
        while cur.level < level {
            cur = self.nodes.get(cur.parents.iter().next()?)?;
        }
        (cur.level == level).then(|| cur.node_id.clone())
    }

    /// Concepts of the ancestors of `id` above it, nearest first.
    pub fn ancestor_concepts(&self, id: &str) -> Vec<String> {
        let level = self.nodes.get(id).map(|n| n.level).unwrap_or(0);
        ((level + 1)..=self.l_max)
            .filter_map(|k| self.ancestor(id, k))
            .map(|a| self.nodes[&a].concept_text.clone())
            .collect()
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes.values().filter(|n| n.level == 0).count()
    }

    /// Recomputes every `leaf_count` from the current children.
    pub fn recompute_counts(&mut self) {
        for level in 0..=self.l_max {
            for id in self.level(level) {
                let count = if level == 0 {
                    1
                } else {
                    self.leaves_of(&id).len()
                };
                self.nodes.get_mut(&id).expect("listed node").leaf_count = count;
            }
        }
    }

    /// Removes `id` and its edges; hard-negative references to it vanish too.
    pub fn remove_node(&mut self, id: &str) {
        let Some(n) = self.nodes.remove(id) else { return };
        for c in &n.children {
            if let Some(child) = self.nodes.get_mut(c) {
                child.parents.remove(id);
            }
        }
        for p in &n.parents {
            if let Some(parent) = self.nodes.get_mut(p) {
                parent.children.remove(id);
            }
        }
        for h in &n.hard_negatives {
            if let Some(other) = self.nodes.get_mut(h) {
                other.hard_negatives.remove(id);
            }
        }
    }

    pub fn add_edge(&mut self, child: &str, parent: &str) {
        self.nodes.get_mut(child).expect("child exists").parents.insert(parent.to_string());
        self.nodes.get_mut(parent).expect("parent exists").children.insert(child.to_string());
    }

    /// Drops concept nodes left without leaves, bottom-up, then refreshes counts.
    pub fn prune_empty(&mut self) {
        self.recompute_counts();
        for level in 1..=self.l_max {
            for id in self.level(level) {
                if self.nodes[&id].children.is_empty() {
                    self.remove_node(&id);
                }
            }
        }
        self.recompute_counts();
    }

    /// Structural checks that hold after every forge stage. Returns the first
    /// violation found.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        for n in self.nodes.values() {
            if n.level > self.l_max {
                return Err(format!("{} above l_max", n.node_id));
            }
            for p in &n.parents {
                let parent = self.nodes.get(p).ok_or_else(|| format!("{} has missing parent {p}", n.node_id))?;
                if parent.level != n.level + 1 {
                    return Err(format!("edge {} -> {p} skips levels", n.node_id));
                }
                if !parent.children.contains(&n.node_id) {
                    return Err(format!("edge {} -> {p} is one-sided", n.node_id));
                }
            }
            for c in &n.children {
                let child = self.nodes.get(c).ok_or_else(|| format!("{} has missing child {c}", n.node_id))?;
                if !child.parents.contains(&n.node_id) {
                    return Err(format!("edge {c} -> {} is one-sided", n.node_id));
                }
            }
            if n.level == 0 {
                if n.leaf.is_none() || !n.children.is_empty() || n.leaf_count != 1 {
                    return Err(format!("malformed leaf {}", n.node_id));
                }
                if self.l_max >= 1 && n.parents.len() != 1 {
                    return Err(format!("leaf {} has {} group nodes", n.node_id, n.parents.len()));
                }
            } else {
                if n.children.is_empty() {
                    return Err(format!("{} has no children", n.node_id));
                }
                if n.leaf_count != self.leaves_of(&n.node_id).len() {
                    return Err(format!("{} has a stale leaf count", n.node_id));
                }
            }
            for h in &n.hard_negatives {
                let other = self.nodes.get(h).ok_or_else(|| format!("{} lists missing negative {h}", n.node_id))?;
                if h == &n.node_id || other.level != n.level || !other.hard_negatives.contains(&n.node_id) {
                    return Err(format!("hard negative {} <-> {h} is not symmetric", n.node_id));
                }
            }
        }
        Ok(())
    }

    /// Table-1 shaped summary.
    pub fn stats(&self) -> ForgeStats {
        let groups = self.group_nodes();
        let total_pairs = self.num_leaves();
        let nodes_per_level = (1..=self.l_max).map(|k| self.level(k).len()).collect();
        let avg = if groups.is_empty() {
            0.0
        } else {
            groups.iter().map(|g| self.nodes[g].leaf_count).sum::<usize>() as f64 / groups.len() as f64
        };
        ForgeStats {
            total_pairs,
            nodes_per_level,
            avg_images_per_node: avg,
        }
    }

    /// Leaf records in leaf-id order.
    pub fn corpus(&self) -> Corpus {
        Corpus::new(
            self.level(0)
                .iter()
                .filter_map(|id| self.nodes[id].leaf.clone())
                .map(|l| CorpusRecord {
                    leaf_id: l.leaf_id,
                    caption: l.caption,
                    alt_captions: l.alt_captions,
                    image_features: l.image_features,
                    image_feature_ref: None,
                })
                .collect(),
        )
    }
}

/// Builds the DAG from per-leaf abstraction chains (`chain[k]` is the tier
/// `k + 1` concept of the leaf).
pub fn build_dag(chains: &BTreeMap<String, Vec<String>>, corpus: &Corpus, l_max: usize) -> Result<ConceptDag> {
    let mut dag = ConceptDag::empty(l_max);
    for rec in &corpus.records {
        let chain = chains.get(&rec.leaf_id).ok_or_else(|| ForgeError::MissingChain(rec.leaf_id.clone()))?;
        if chain.len() != l_max {
            return Err(ForgeError::InconsistentChainLength {
                leaf_id: rec.leaf_id.clone(),
                expected: l_max,
                got: chain.len(),
            });
        }
        let leaf_id = leaf_node_id(&rec.leaf_id);
        let mut leaf = ConceptNode::new(leaf_id.clone(), 0, rec.caption.clone());
        leaf.leaf = Some(LeafData {
            leaf_id: rec.leaf_id.clone(),
            caption: rec.caption.clone(),
            alt_captions: rec.alt_captions.clone(),
            image_features: rec.image_features.clone(),
        });
        dag.nodes.insert(leaf_id.clone(), leaf);

        let mut child = leaf_id;
        for (k, concept) in chain.iter().enumerate() {
            let text = normalize_text(concept);
            if text.is_empty() {
                return Err(ForgeError::EmptyConcept(rec.leaf_id.clone()));
            }
            let level = k + 1;
            let id = concept_node_id(level, &text);
            dag.nodes
                .entry(id.clone())
                .or_insert_with(|| ConceptNode::new(id.clone(), level, text));
            dag.add_edge(&child, &id);
            child = id;
        }
    }
    dag.recompute_counts();
    Ok(dag)
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    node_id: NodeId,
    level: usize,
    concept_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generalized_caption: Option<String>,
    leaf_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    leaf: Option<LeafData>,
}

#[derive(Serialize, Deserialize)]
struct EdgeRecord {
    child: NodeId,
    parent: NodeId,
}

#[derive(Serialize, Deserialize)]
struct NegativeRecord {
    node: NodeId,
    negatives: Vec<NodeId>,
}

#[derive(Serialize, Deserialize)]
struct DagFile {
    format_version: u32,
    config: ForgeConfig,
    l_max: usize,
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
    hard_negatives: Vec<NegativeRecord>,
    stats: ForgeStats,
}

pub fn dag_to_json(dag: &ConceptDag, config: &ForgeConfig) -> String {
    let file = DagFile {
        format_version: DAG_FORMAT_VERSION,
        config: config.clone(),
        l_max: dag.l_max,
        nodes: dag
            .nodes
            .values()
            .map(|n| NodeRecord {
                node_id: n.node_id.clone(),
                level: n.level,
                concept_text: n.concept_text.clone(),
                generalized_caption: n.generalized_caption.clone(),
                leaf_count: n.leaf_count,
                leaf: n.leaf.clone(),
            })
            .collect(),
        edges: dag
            .nodes
            .values()
            .flat_map(|n| {
                n.parents.iter().map(|p| EdgeRecord {
                    child: n.node_id.clone(),
                    parent: p.clone(),
                })
            })
            .collect(),
        hard_negatives: dag
            .nodes
            .values()
            .filter(|n| !n.hard_negatives.is_empty())
            .map(|n| NegativeRecord {
                node: n.node_id.clone(),
                negatives: n.hard_negatives.iter().cloned().collect(),
            })
            .collect(),
        stats: dag.stats(),
    };
    serde_json::to_string_pretty(&file).expect("dag serializes") + "\n"
}

pub fn dag_from_json(text: &str) -> Result<(ConceptDag, ForgeConfig)> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ForgeError::SchemaVersionMismatch(format!("unreadable dag file: {e}")))?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == DAG_FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(ForgeError::SchemaVersionMismatch(format!(
                "dag format_version {v}, expected {DAG_FORMAT_VERSION}"
            )))
        }
        None => return Err(ForgeError::SchemaVersionMismatch("dag file has no format_version".into())),
    }
    let file: DagFile =
        serde_json::from_value(value).map_err(|e| ForgeError::SchemaVersionMismatch(format!("malformed dag file: {e}")))?;
    let mut dag = ConceptDag::empty(file.l_max);
    for r in file.nodes {
        let mut n = ConceptNode::new(r.node_id.clone(), r.level, r.concept_text);
        n.generalized_caption = r.generalized_caption;
        n.leaf_count = r.leaf_count;
        n.leaf = r.leaf;
        dag.nodes.insert(r.node_id, n);
    }
    let bad = |what: String| ForgeError::SchemaVersionMismatch(format!("malformed dag file: {what}"));
    for e in file.edges {
        if !dag.nodes.contains_key(&e.child) || !dag.nodes.contains_key(&e.parent) {
            return Err(bad(format!("edge {} -> {} references a missing node", e.child, e.parent)));
        }
        dag.add_edge(&e.child, &e.parent);
    }
    for h in file.hard_negatives {
        let node = dag
            .nodes
            .get_mut(&h.node)
            .ok_or_else(|| bad(format!("hard negatives for missing node {}", h.node)))?;
        node.hard_negatives = h.negatives.into_iter().collect();
    }
    Ok((dag, file.config))
}

pub fn save_dag(dag: &ConceptDag, config: &ForgeConfig, path: &Path) -> Result<()> {
    super::write_atomic(path, dag_to_json(dag, config).as_bytes())
}

pub fn load_dag(path: &Path) -> Result<(ConceptDag, ForgeConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| ForgeError::io(path, e))?;
    dag_from_json(&text)
}
