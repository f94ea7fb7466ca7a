//! Training data prepared from a forged DAG: the split and group-structured
//! batch sampling.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::encoder::{featurize_text, EncoderParams, Input, TextFeatures};
use crate::forge::{ConceptDag, NodeId};
use crate::loss::{Group, GroupBatch};
use crate::numerics::Rng;

type Result<T> = std::result::Result<T, TrainError>;

/// Leaf ids of the two partitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

/// Leaf ids (not node ids) of every group node, sorted.
pub fn group_members(dag: &ConceptDag) -> BTreeMap<NodeId, Vec<String>> {
    dag.group_nodes()
        .into_iter()
        .map(|g| {
            let leaves = dag
                .leaves_of(&g)
                .iter()
                .filter_map(|l| dag.nodes[l].leaf.as_ref().map(|d| d.leaf_id.clone()))
                .collect();
            (g, leaves)
        })
        .collect()
}

/// Per-group stratified split. Each group keeps `round(fraction·n)` leaves
/// for training, clamped so both sides get at least one.
pub fn split_dataset(dag: &ConceptDag, fraction: f64, rng: &mut Rng) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(TrainError::InvalidConfig(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut split = Split {
        train: BTreeSet::new(),
        test: BTreeSet::new(),
    };
    for (group, mut leaves) in group_members(dag) {
        let n = leaves.len();
        if n < 2 {
            return Err(TrainError::GroupTooSmall { group, leaves: n });
        }
        rng.shuffle(&mut leaves);
        let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        split.train.extend(leaves.drain(..n_train));
        split.test.extend(leaves);
    }
    Ok(split)
}

/// Encoder inputs of one leaf.
#[derive(Debug, Clone)]
pub struct LeafInputs {
    pub caption: TextFeatures,
    pub image: Vec<f64>,
}

/// Featurized leaves and groups restricted to the training partition.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub leaves: BTreeMap<String, LeafInputs>,
    /// Training leaves of every group that has any.
    pub groups: BTreeMap<NodeId, Vec<String>>,
    pub hard_negatives: BTreeMap<NodeId, Vec<NodeId>>,
    /// Features of each group's concept text, for text-text alignment.
    pub concepts: BTreeMap<NodeId, TextFeatures>,
    pub image_dim: usize,
}

impl TrainData {
    pub fn new(dag: &ConceptDag, train: &BTreeSet<String>, buckets: usize) -> Result<Self> {
        let mut leaves = BTreeMap::new();
        let mut image_dim = None;
        for id in dag.level(0) {
            let Some(leaf) = &dag.nodes[&id].leaf else { continue };
            if !train.contains(&leaf.leaf_id) {
                continue;
            }
            let image = leaf
                .image_features
                .clone()
                .ok_or_else(|| TrainError::MissingImageFeatures(leaf.leaf_id.clone()))?;
            if *image_dim.get_or_insert(image.len()) != image.len() {
                return Err(TrainError::InvalidConfig(format!(
                    "leaf {} has {} image features, expected {}",
                    leaf.leaf_id,
                    image.len(),
                    image_dim.unwrap_or_default()
                )));
            }
            let caption = featurize_text(&leaf.caption, buckets)?;
            leaves.insert(leaf.leaf_id.clone(), LeafInputs { caption, image });
        }
        let groups: BTreeMap<NodeId, Vec<String>> = group_members(dag)
            .into_iter()
            .map(|(g, ls)| (g, ls.into_iter().filter(|l| leaves.contains_key(l)).collect::<Vec<_>>()))
            .filter(|(_, ls)| !ls.is_empty())
            .collect();
        let hard_negatives = groups
            .keys()
            .map(|g| {
                let hn = dag.nodes[g].hard_negatives.iter().filter(|h| groups.contains_key(*h)).cloned().collect();
                (g.clone(), hn)
            })
            .collect();
        let concepts = groups
            .keys()
            .map(|g| Ok((g.clone(), featurize_text(&dag.nodes[g].concept_text, buckets)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            leaves,
            groups,
            hard_negatives,
            concepts,
            image_dim: image_dim.unwrap_or(0),
        })
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }
}

/// Groups and leaf ids chosen for one step; `groups[0]` is the target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub groups: Vec<(NodeId, Vec<String>)>,
}

impl BatchPlan {
    pub fn group_ids(&self) -> Vec<&str> {
        self.groups.iter().map(|(g, _)| g.as_str()).collect()
    }

    /// Encodes the planned pairs (caption in the text slot, image features in
    /// the image slot).
    pub fn encode(&self, params: &EncoderParams, data: &TrainData) -> Result<GroupBatch> {
        let groups = self
            .groups
            .iter()
            .map(|(g, leaves)| {
                let mut images = Vec::with_capacity(leaves.len());
                let mut texts = Vec::with_capacity(leaves.len());
                for l in leaves {
                    let inputs = &data.leaves[l];
                    images.push(params.forward(Input::Image(&inputs.image))?.embedding().clone());
                    texts.push(params.forward(Input::Text(&inputs.caption))?.embedding().clone());
                }
                Ok(Group::new(g.clone(), images, texts))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GroupBatch::new(groups)?)
    }
}

/// Picks a target group uniformly, fills the batch with its hard negatives
/// (in random order) and then with uniformly drawn other groups, and takes
/// `pairs_per_group` training leaves from each: without replacement when the
/// group has enough, with replacement otherwise.
pub fn sample_batch(data: &TrainData, cfg: &TrainConfig, rng: &mut Rng) -> Result<BatchPlan> {
    let ids: Vec<&NodeId> = data.groups.keys().collect();
    if ids.len() < cfg.groups_per_batch || ids.is_empty() {
        return Err(TrainError::NoGroups {
            needed: cfg.groups_per_batch.max(1),
            available: ids.len(),
        });
    }
    let target = ids[rng.below(ids.len())];
    let mut chosen: Vec<&NodeId> = vec![target];

    let mut negatives: Vec<&NodeId> = data.hard_negatives[target].iter().collect();
    rng.shuffle(&mut negatives);
    chosen.extend(negatives.into_iter().take(cfg.groups_per_batch - 1));
    if chosen.len() < cfg.groups_per_batch {
        log::debug!(
            "{target}: {} hard negatives for {} companions, filling uniformly",
            chosen.len() - 1,
            cfg.groups_per_batch - 1
        );
        let mut rest: Vec<&NodeId> = ids.iter().copied().filter(|g| !chosen.contains(g)).collect();
        rng.shuffle(&mut rest);
        let missing = cfg.groups_per_batch - chosen.len();
        chosen.extend(rest.into_iter().take(missing));
    }

    let groups = chosen
        .into_iter()
        .map(|g| {
            let pool = &data.groups[g];
            let leaves = if pool.len() >= cfg.pairs_per_group {
                let mut pool = pool.clone();
                rng.shuffle(&mut pool);
                pool.truncate(cfg.pairs_per_group);
                pool
            } else {
                log::debug!("{g}: {} training leaves, sampling {} with replacement", pool.len(), cfg.pairs_per_group);
                (0..cfg.pairs_per_group).map(|_| pool[rng.below(pool.len())].clone()).collect()
            };
            (g.clone(), leaves)
        })
        .collect();
    Ok(BatchPlan { groups })
}
