//! The forge stages: chain inference, small-group merging, caption
//! generalization and hard-negative mining.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, CorpusRecord};
use super::dag::{ConceptDag, NodeId};
use super::embed::TextEmbedder;
use super::provider::{self, AbstractionProvider};
use super::{ForgeError, Result};
use crate::numerics;

/// Infers the `l_max` concepts above one image: the first from all of its
/// captions, each later one from the previous concept, with the chain so far
/// as context.
pub fn infer_abstraction_chain(
    captions: &[String],
    l_max: usize,
    provider: &dyn AbstractionProvider,
) -> Result<Vec<String>> {
    if captions.is_empty() || captions.iter().all(|c| c.trim().is_empty()) {
        return Err(ForgeError::EmptyConcept("empty caption".into()));
    }
    let mut chain: Vec<String> = Vec::with_capacity(l_max);
    for _ in 0..l_max {
        let inputs = match chain.last() {
            None => captions.to_vec(),
            Some(prev) => vec![prev.clone()],
        };
        let concept = provider::abstract_texts(provider, &inputs, &chain)?;
        if concept.trim().is_empty() {
            return Err(ForgeError::EmptyConcept(inputs.join(" | ")));
        }
        chain.push(concept.trim().to_string());
    }
    Ok(chain)
}

/// Chains for every record, with at most `parallelism` provider calls in
/// flight. The result does not depend on scheduling.
pub fn infer_all_chains(
    corpus: &Corpus,
    l_max: usize,
    provider: &dyn AbstractionProvider,
    parallelism: usize,
) -> Result<BTreeMap<String, Vec<String>>> {
    let records: &[CorpusRecord] = &corpus.records;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Vec<String>>>>> = Mutex::new((0..records.len()).map(|_| None).collect());
    let workers = parallelism.clamp(1, records.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= records.len() {
                    break;
                }
                let r = infer_abstraction_chain(&records[k].all_captions(), l_max, provider);
                let failed = r.is_err();
                results.lock().expect("results lock")[k] = Some(r);
                if failed {
                    // Stop handing out work; finished entries stay cached.
                    next.store(records.len(), Ordering::SeqCst);
                }
            });
        }
    });
    let mut out = BTreeMap::new();
    for (rec, r) in records.iter().zip(results.into_inner().expect("results lock")) {
        match r {
            Some(Ok(chain)) => {
                out.insert(rec.leaf_id.clone(), chain);
            }
            Some(Err(e)) => return Err(e),
            None => {}
        }
    }
    if out.len() != records.len() {
        return Err(ForgeError::Provider(provider::ProviderError::Failure {
            attempts: 0,
            message: "chain inference aborted".into(),
        }));
    }
    Ok(out)
}

/// Concept embeddings for the nodes at `level`.
pub fn embed_level(dag: &ConceptDag, level: usize, embedder: &dyn TextEmbedder) -> Result<BTreeMap<NodeId, Vec<f64>>> {
    dag.level(level)
        .into_iter()
        .map(|id| {
            let e = embedder.embed(&dag.nodes[&id].concept_text)?;
            Ok((id, e))
        })
        .collect()
}

/// One decision taken while merging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum MergeEvent {
    Merged {
        absorbed: NodeId,
        into: NodeId,
        cosine: f64,
        absorbed_leaves: usize,
        into_leaves: usize,
    },
    Removed {
        node: NodeId,
        leaves: usize,
        best_cosine: Option<f64>,
    },
}

/// Folds undersized group nodes into their most similar peer or drops them.
///
/// Repeatedly takes the group node with the fewest leaves below `size_min`
/// (ties by node id) and finds the other group node with the highest concept
/// cosine (ties by node id). At cosine `≥ sim_min` the smaller of the two is
/// merged into the larger (the undersized node on equal counts): its leaves
/// move over and its own edges go away. Otherwise the node is removed with
/// its leaves. Counts are always current, so a survivor that is still too
/// small is visited again. Ancestors are recounted and empty ones pruned at
/// the end.
pub fn merge_small_nodes(
    dag: &mut ConceptDag,
    size_min: usize,
    sim_min: f64,
    embedder: &dyn TextEmbedder,
) -> Result<Vec<MergeEvent>> {
    let embeddings = embed_level(dag, 1, embedder)?;
    let mut log = Vec::new();
    loop {
        let groups = dag.group_nodes();
        let Some(target) = groups
            .iter()
            .filter(|g| dag.nodes[*g].leaf_count < size_min)
            .min_by(|a, b| (dag.nodes[*a].leaf_count, *a).cmp(&(dag.nodes[*b].leaf_count, *b)))
            .cloned()
        else {
            break;
        };
        let mut best: Option<(f64, NodeId)> = None;
        for other in groups.iter().filter(|g| **g != target) {
            let c = numerics::dot(&embeddings[&target], &embeddings[other]);
            if best.as_ref().is_none_or(|(bc, _)| c > *bc) {
                best = Some((c, other.clone()));
            }
        }
        let target_leaves = dag.nodes[&target].leaf_count;
        match best {
            Some((cosine, other)) if cosine >= sim_min => {
                let other_leaves = dag.nodes[&other].leaf_count;
                let (absorbed, into) = if other_leaves < target_leaves {
                    (other, target)
                } else {
                    (target, other)
                };
                let absorbed_leaves = dag.nodes[&absorbed].leaf_count;
                let into_leaves = dag.nodes[&into].leaf_count;
                absorb(dag, &absorbed, &into);
                log.push(MergeEvent::Merged {
                    absorbed,
                    into,
                    cosine,
                    absorbed_leaves,
                    into_leaves,
                });
            }
            best => {
                for leaf in dag.nodes[&target].children.clone() {
                    dag.remove_node(&leaf);
                }
                dag.remove_node(&target);
                log.push(MergeEvent::Removed {
                    node: target,
                    leaves: target_leaves,
                    best_cosine: best.map(|(c, _)| c),
                });
            }
        }
        dag.recompute_counts();
    }
    dag.prune_empty();
    Ok(log)
}

fn absorb(dag: &mut ConceptDag, absorbed: &str, into: &str) {
    let children = dag.nodes[absorbed].children.clone();
    for c in &children {
        dag.add_edge(c, into);
    }
    dag.remove_node(absorbed);
}

/// Asks the provider for a caption for every group node, from its concept,
/// its ancestors' concepts and its members' captions.
pub fn generalize_captions(dag: &mut ConceptDag, provider: &dyn AbstractionProvider) -> Result<()> {
    for id in dag.group_nodes() {
        let node = &dag.nodes[&id];
        let captions: Vec<String> = dag
            .leaves_of(&id)
            .iter()
            .filter_map(|l| dag.nodes[l].leaf.as_ref().map(|d| d.caption.clone()))
            .collect();
        let ancestors = dag.ancestor_concepts(&id);
        let caption = provider::generalize(provider, &node.concept_text, &ancestors, &captions)?;
        if caption.trim().is_empty() {
            return Err(ForgeError::EmptyConcept(format!("generalized caption for {id}")));
        }
        dag.nodes.get_mut(&id).expect("group node").generalized_caption = Some(caption.trim().to_string());
    }
    Ok(())
}

/// Every pair of distinct group nodes with concept cosine above `threshold`
/// become each other's hard negatives. Replaces any previous sets.
pub fn mine_hard_negatives(dag: &mut ConceptDag, threshold: f64, embedder: &dyn TextEmbedder) -> Result<()> {
    let embeddings = embed_level(dag, 1, embedder)?;
    let ids: Vec<&NodeId> = embeddings.keys().collect();
    let mut sets: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for (a, ia) in ids.iter().enumerate() {
        for ib in &ids[a + 1..] {
            if numerics::dot(&embeddings[*ia], &embeddings[*ib]) > threshold {
                sets.entry((*ia).clone()).or_default().push((*ib).clone());
                sets.entry((*ib).clone()).or_default().push((*ia).clone());
            }
        }
    }
    for id in dag.group_nodes() {
        let set = sets.remove(&id).unwrap_or_default();
        dag.nodes.get_mut(&id).expect("group node").hard_negatives = set.into_iter().collect();
    }
    Ok(())
}
