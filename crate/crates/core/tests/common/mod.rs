#![allow(dead_code)]

use glass_core::loss::{Group, GroupBatch, LossConfig, LossId};
use glass_core::numerics::Embedding;
use glass_oracle::{Loss, Params, Tensor3};

pub fn nested(batch: &GroupBatch) -> (Tensor3, Tensor3) {
    let side = |f: fn(&Group) -> &Vec<Embedding>| -> Tensor3 {
        batch
            .groups()
            .iter()
            .map(|g| f(g).iter().map(|e| e.as_slice().to_vec()).collect())
            .collect()
    };
    (side(|g| &g.images), side(|g| &g.texts))
}

pub fn from_nested(images: &Tensor3, texts: &Tensor3) -> GroupBatch {
    let groups = images
        .iter()
        .zip(texts)
        .enumerate()
        .map(|(g, (im, tx))| {
            let emb = |vs: &Vec<Vec<f64>>| vs.iter().map(|v| Embedding::new(v.clone()).unwrap()).collect();
            Group::new(format!("g{g}"), emb(im), emb(tx))
        })
        .collect();
    GroupBatch::new(groups).unwrap()
}

pub fn oracle_loss(id: LossId) -> Loss {
    match id {
        LossId::PairwiseOuter => Loss::PairwiseOuter,
        LossId::PairwiseInner => Loss::PairwiseInner,
        LossId::Pairwise => Loss::Pairwise,
        LossId::CentroidOuter => Loss::CentroidOuter,
        LossId::CentroidInner => Loss::CentroidInner,
        LossId::Centroid => Loss::Centroid,
        LossId::InfoNce => Loss::InfoNce,
    }
}

pub fn params(cfg: &LossConfig) -> Params {
    Params {
        tau: cfg.tau,
        tau_inner: cfg.tau_inner,
        alpha: cfg.alpha,
    }
}

use std::collections::BTreeMap;

use glass_core::forge::{
    build_dag, forge, synth_taxonomy, ConceptDag, Corpus, CorpusRecord, ForgeConfig, HashedTrigramEmbedder, SynthSpec,
};
use glass_core::numerics::Rng;

/// Forged synthetic dataset with `branching` below one root.
pub fn synthetic_dag(branching: Vec<usize>, leaves_per_group: usize, feature_dim: usize, noise: f64, seed: u64) -> ConceptDag {
    let spec = SynthSpec {
        roots: 1,
        branching,
        leaves_per_group,
        feature_dim,
        noise,
    };
    let s = synth_taxonomy(&spec, &mut Rng::derive(seed, "synth")).unwrap();
    let cfg = ForgeConfig {
        l_max: spec.l_max(),
        ..ForgeConfig::default()
    };
    forge(&s.corpus, &cfg, &s.rules, &HashedTrigramEmbedder::default()).unwrap().dag
}

/// The 16-group, 12-pair fixture.
pub fn s1(seed: u64) -> ConceptDag {
    synthetic_dag(vec![4, 2, 2], 12, 32, 0.05, seed)
}

/// Two-tier dag with one group per entry of `sizes`, named `g0`, `g1`, ...
/// Leaf `g<i>-<j>` has caption `"group g<i> member <j>"` and image
/// features `feature(i, j)`.
pub fn sized_dag(sizes: &[usize], feature: impl Fn(usize, usize) -> Vec<f64>) -> ConceptDag {
    let mut records = Vec::new();
    let mut chains = BTreeMap::new();
    for (i, &n) in sizes.iter().enumerate() {
        for j in 0..n {
            let id = format!("g{i}-{j:02}");
            records.push(CorpusRecord {
                leaf_id: id.clone(),
                caption: format!("group g{i} member {j}"),
                alt_captions: Vec::new(),
                image_features: Some(feature(i, j)),
                image_feature_ref: None,
            });
            chains.insert(id, vec![format!("g{i}"), "all".to_string()]);
        }
    }
    build_dag(&chains, &Corpus::new(records), 2).unwrap()
}
