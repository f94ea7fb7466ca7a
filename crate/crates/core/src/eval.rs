//! Text-to-image R@1 per abstraction level, and report comparison.
//!
//! Level 0 queries are leaf captions; a hit needs the top-1 image to be the
//! query's own. Level `k` queries are the generalized caption (else the
//! concept text) of the query leaf's tier-`k` ancestor; a hit needs the top-1
//! image to share that ancestor. Every level scores against the same gallery
//! and the same image embeddings. Ties go to the lowest leaf id.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{featurize_text, EncoderError, EncoderParams, Input};
use crate::forge::{leaf_node_id, ConceptDag, NodeId};
use crate::numerics::{self, Embedding};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no test leaves")]
    EmptyTestSet,
    #[error("level {level} outside 0..={l_max}")]
    InvalidLevel { level: usize, l_max: usize },
    #[error("test leaf {0} is not in the dag")]
    UnknownLeaf(String),
    #[error("leaf {0} has no image features")]
    MissingImageFeatures(String),
    #[error("incompatible reports: {0}")]
    IncompatibleReports(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Which images each query is ranked against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gallery {
    /// Every test image.
    #[default]
    Full,
    /// Test images under the query leaf's group and that group's hard
    /// negatives.
    Restricted,
}

/// R@1 at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelResult {
    /// `captions` or `l<k>`.
    pub level: String,
    pub r_at_1: f64,
    pub hits: usize,
    pub n_queries: usize,
    /// Test leaves without a tier-`k` ancestor.
    pub skipped: usize,
}

pub fn level_name(level: usize) -> String {
    if level == 0 {
        "captions".into()
    } else {
        format!("l{level}")
    }
}

/// Test images embedded once, shared by every level.
pub struct Evaluator<'a> {
    params: &'a EncoderParams,
    dag: &'a ConceptDag,
    /// `(leaf_id, node_id, image embedding)`, sorted by leaf id.
    gallery: Vec<(String, NodeId, Embedding)>,
    mode: Gallery,
}

impl<'a> Evaluator<'a> {
    pub fn new(params: &'a EncoderParams, dag: &'a ConceptDag, test_leaves: &BTreeSet<String>, mode: Gallery) -> Result<Self> {
        if test_leaves.is_empty() {
            return Err(EvalError::EmptyTestSet);
        }
        let gallery = test_leaves
            .iter()
            .map(|leaf| {
                let node = leaf_node_id(leaf);
                let data = dag
                    .nodes
                    .get(&node)
                    .and_then(|n| n.leaf.as_ref())
                    .ok_or_else(|| EvalError::UnknownLeaf(leaf.clone()))?;
                let features = data
                    .image_features
                    .as_ref()
                    .ok_or_else(|| EvalError::MissingImageFeatures(leaf.clone()))?;
                let e = params.forward(Input::Image(features))?.embedding().clone();
                Ok((leaf.clone(), node, e))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            params,
            dag,
            gallery,
            mode,
        })
    }

    fn embed_text(&self, text: &str) -> Result<Embedding> {
        let f = featurize_text(text, self.params.buckets)?;
        Ok(self.params.forward(Input::Text(&f))?.embedding().clone())
    }

    /// Query text of leaf `node` at `level`, with the node it names.
    fn query(&self, node: &str, level: usize) -> Option<(NodeId, String)> {
        if level == 0 {
            let leaf = self.dag.nodes[node].leaf.as_ref()?;
            return Some((node.to_string(), leaf.caption.clone()));
        }
        let a = self.dag.ancestor(node, level)?;
        let n = &self.dag.nodes[&a];
        let text = n.generalized_caption.clone().unwrap_or_else(|| n.concept_text.clone());
        Some((a, text))
    }

    fn allowed(&self, query: &str) -> Option<BTreeSet<NodeId>> {
        match self.mode {
            Gallery::Full => None,
            Gallery::Restricted => {
                let group = self.dag.ancestor(query, 1)?;
                let mut set: BTreeSet<NodeId> = self.dag.nodes[&group].hard_negatives.clone();
                set.insert(group);
                Some(set)
            }
        }
    }

    /// Index into the gallery of the best image for `text`.
    fn top1(&self, text: &Embedding, allowed: Option<&BTreeSet<NodeId>>) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (k, (_, node, image)) in self.gallery.iter().enumerate() {
            if let Some(set) = allowed {
                match self.dag.ancestor(node, 1) {
                    Some(g) if set.contains(&g) => {}
                    _ => continue,
                }
            }
            let s = numerics::dot(text.as_slice(), image.as_slice());
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((k, s));
            }
        }
        best.map(|(k, _)| k)
    }

    pub fn recall_at_1(&self, level: usize) -> Result<LevelResult> {
        if level > self.dag.l_max {
            return Err(EvalError::InvalidLevel {
                level,
                l_max: self.dag.l_max,
            });
        }
        let mut text_cache: BTreeMap<String, Embedding> = BTreeMap::new();
        let (mut hits, mut n_queries, mut skipped) = (0, 0, 0);
        for (_, node, _) in &self.gallery {
            let Some((target, text)) = self.query(node, level) else {
                skipped += 1;
                continue;
            };
            let q = match text_cache.get(&text) {
                Some(e) => e.clone(),
                None => {
                    let e = self.embed_text(&text)?;
                    text_cache.insert(text, e.clone());
                    e
                }
            };
            n_queries += 1;
            let allowed = self.allowed(node);
            let Some(top) = self.top1(&q, allowed.as_ref()) else { continue };
            let top_node = &self.gallery[top].1;
            let hit = if level == 0 {
                top_node == node
            } else {
                self.dag.ancestor(top_node, level).as_ref() == Some(&target)
            };
            hits += usize::from(hit);
        }
        Ok(LevelResult {
            level: level_name(level),
            r_at_1: if n_queries == 0 { 0.0 } else { hits as f64 / n_queries as f64 },
            hits,
            n_queries,
            skipped,
        })
    }
}

/// R@1 of `params` over `test_leaves` at one level, full gallery.
pub fn recall_at_1(
    params: &EncoderParams,
    test_leaves: &BTreeSet<String>,
    dag: &ConceptDag,
    level: usize,
) -> Result<LevelResult> {
    Evaluator::new(params, dag, test_leaves, Gallery::Full)?.recall_at_1(level)
}

/// Per-level results with enough metadata to reproduce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub dataset_id: String,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default)]
    pub gallery: Gallery,
    /// Free-form factors (e.g. `loss`, `pretraining`) used by
    /// [`compare_models`].
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
    pub levels: Vec<LevelResult>,
}

/// Identifies what was evaluated.
#[derive(Debug, Clone, Default)]
pub struct ReportMeta {
    pub model_id: String,
    pub dataset_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub tags: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn level(&self, name: &str) -> Option<&LevelResult> {
        self.levels.iter().find(|l| l.level == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Columns `model, level, r_at_1, hits, n_queries, skipped`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "level", "r_at_1", "hits", "n_queries", "skipped"]).expect("in-memory csv");
        for l in &self.levels {
            w.write_record([
                self.model_id.clone(),
                l.level.clone(),
                l.r_at_1.to_string(),
                l.hits.to_string(),
                l.n_queries.to_string(),
                l.skipped.to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    /// Writes `<stem>.json` and `<stem>.csv` next to each other.
    pub fn write(&self, stem: &Path) -> Result<()> {
        for (ext, body) in [("json", self.to_json()), ("csv", self.to_csv())] {
            let path = stem.with_extension(ext);
            std::fs::write(&path, body).map_err(|e| EvalError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        Ok(())
    }
}

/// R@1 at level 0 and every tier `1..=l_max`.
pub fn evaluate_all(
    params: &EncoderParams,
    dag: &ConceptDag,
    test_leaves: &BTreeSet<String>,
    gallery: Gallery,
    meta: &ReportMeta,
) -> Result<EvalReport> {
    let ev = Evaluator::new(params, dag, test_leaves, gallery)?;
    let levels = (0..=dag.l_max).map(|k| ev.recall_at_1(k)).collect::<Result<_>>()?;
    Ok(EvalReport {
        model_id: meta.model_id.clone(),
        dataset_id: meta.dataset_id.clone(),
        seed: meta.seed,
        config_hash: meta.config_hash.clone(),
        gallery,
        tags: meta.tags.clone(),
        levels,
    })
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub level: String,
    pub r_at_1: f64,
    pub delta_vs_baseline: f64,
}

/// Mean per-level change when one factor moves from `from` to `to` with all
/// other tags fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorGain {
    pub factor: String,
    pub from: String,
    pub to: String,
    /// Number of report pairs averaged.
    pub pairs: usize,
    pub per_level: Vec<(String, f64)>,
    /// Mean of `per_level`.
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub levels: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    pub gains: Vec<FactorGain>,
}

impl Comparison {
    /// Columns `model, level, r_at_1, delta_vs_baseline`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "level", "r_at_1", "delta_vs_baseline"]).expect("in-memory csv");
        for r in &self.rows {
            w.write_record([r.model.clone(), r.level.clone(), r.r_at_1.to_string(), r.delta_vs_baseline.to_string()])
                .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes") + "\n"
    }
}

/// Deltas of every report against the first, and for every tag whose value
/// varies, the mean delta over report pairs that differ only in that tag,
/// taken from the baseline's value to each other value.
pub fn compare_models(reports: &[EvalReport]) -> Result<Comparison> {
    let base = reports
        .first()
        .ok_or_else(|| EvalError::IncompatibleReports("no reports".into()))?;
    let levels: Vec<String> = base.levels.iter().map(|l| l.level.clone()).collect();
    for r in reports {
        if r.dataset_id != base.dataset_id {
            return Err(EvalError::IncompatibleReports(format!(
                "dataset {} vs {}",
                r.dataset_id, base.dataset_id
            )));
        }
        let ls: Vec<&String> = r.levels.iter().map(|l| &l.level).collect();
        if ls != levels.iter().collect::<Vec<_>>() {
            return Err(EvalError::IncompatibleReports(format!("{} has levels {ls:?}", r.model_id)));
        }
    }
    let r_at = |r: &EvalReport, k: usize| r.levels[k].r_at_1;
    let rows = reports
        .iter()
        .flat_map(|r| {
            levels.iter().enumerate().map(move |(k, name)| ComparisonRow {
                model: r.model_id.clone(),
                level: name.clone(),
                r_at_1: r_at(r, k),
                delta_vs_baseline: r_at(r, k) - r_at(base, k),
            })
        })
        .collect();

    let mut gains = Vec::new();
    let factors: BTreeSet<&String> = reports.iter().flat_map(|r| r.tags.keys()).collect();
    for factor in factors {
        let Some(from) = base.tags.get(factor) else { continue };
        let values: BTreeSet<&String> = reports.iter().filter_map(|r| r.tags.get(factor)).collect();
        for to in values.into_iter().filter(|v| *v != from) {
            let others = |r: &EvalReport| -> BTreeMap<String, String> {
                r.tags.iter().filter(|(k, _)| *k != factor).map(|(k, v)| (k.clone(), v.clone())).collect()
            };
            let mut sums = vec![0.0; levels.len()];
            let mut pairs = 0;
            for a in reports.iter().filter(|r| r.tags.get(factor) == Some(from)) {
                for b in reports.iter().filter(|r| r.tags.get(factor) == Some(to) && others(r) == others(a)) {
                    for (k, s) in sums.iter_mut().enumerate() {
                        *s += r_at(b, k) - r_at(a, k);
                    }
                    pairs += 1;
                }
            }
            if pairs == 0 {
                continue;
            }
            let per_level: Vec<(String, f64)> =
                levels.iter().cloned().zip(sums.into_iter().map(|s| s / pairs as f64)).collect();
            let average = per_level.iter().map(|(_, v)| v).sum::<f64>() / per_level.len().max(1) as f64;
            gains.push(FactorGain {
                factor: factor.clone(),
                from: from.clone(),
                to: to.clone(),
                pairs,
                per_level,
                average,
            });
        }
    }
    Ok(Comparison {
        baseline: base.model_id.clone(),
        levels,
        rows,
        gains,
    })
}
