mod common;

use std::collections::{BTreeMap, BTreeSet};

use glass_core::encoder::{featurize_text, EncoderParams, Input, Matrix};
use glass_core::eval::{
    compare_models, evaluate_all, level_name, recall_at_1, EvalError, EvalReport, Evaluator, Gallery, LevelResult,
    ReportMeta,
};
use glass_core::forge::{leaf_node_id, ConceptDag};
use glass_core::trainer::{train, TrainConfig};
use glass_oracle::retrieval;
use proptest::prelude::*;

fn leaf_ids(dag: &ConceptDag) -> BTreeSet<String> {
    dag.level(0).iter().map(|id| dag.nodes[id].leaf.as_ref().unwrap().leaf_id.clone()).collect()
}

/// Both towers map every input to the same point.
fn constant_model(buckets: usize, image_dim: usize) -> EncoderParams {
    let mut bias = vec![0.0; 4];
    bias[0] = 1.0;
    EncoderParams {
        buckets,
        image_dim,
        embed_dim: 4,
        text_projection: Matrix::zeros(buckets, 4),
        image_projection: Matrix::zeros(image_dim, 4),
        text_bias: bias.clone(),
        image_bias: bias,
        text_hidden: None,
        image_hidden: None,
    }
}

fn identity(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for k in 0..n {
        m.data[k * n + k] = 1.0;
    }
    m
}

fn dense_trigrams(text: &str, buckets: usize) -> Vec<f64> {
    let f = featurize_text(text, buckets).unwrap();
    let mut v = vec![0.0; buckets];
    for (&k, &c) in f.counts() {
        v[k] = c as f64;
    }
    v
}

fn report(model: &str, tags: &[(&str, &str)], r: &[f64]) -> EvalReport {
    EvalReport {
        model_id: model.into(),
        dataset_id: "toy".into(),
        seed: 0,
        config_hash: String::new(),
        gallery: Gallery::Full,
        tags: tags.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        levels: r
            .iter()
            .enumerate()
            .map(|(k, &v)| LevelResult {
                level: level_name(k),
                r_at_1: v,
                hits: 0,
                n_queries: 0,
                skipped: 0,
            })
            .collect(),
    }
}

#[test]
fn constant_model_hits_the_lowest_leaf() {
    let dag = common::sized_dag(&[3, 2], |_, _| vec![0.0; 3]);
    let params = constant_model(64, 3);
    let test = leaf_ids(&dag);
    let r: Vec<LevelResult> = (0..=2).map(|k| recall_at_1(&params, &test, &dag, k).unwrap()).collect();
    assert_eq!(r.iter().map(|l| l.hits).collect::<Vec<_>>(), [1, 3, 5]);
    assert!(r.iter().all(|l| l.n_queries == 5 && l.skipped == 0));
    assert_eq!(r[0].r_at_1, 0.2);
    assert_eq!(r[1].r_at_1, 0.6);
    assert_eq!(r[2].r_at_1, 1.0);
}

#[test]
fn matched_towers_retrieve_every_image() {
    const B: usize = 64;
    let dag = common::sized_dag(&[3, 3, 3], |i, j| dense_trigrams(&format!("group g{i} member {j}"), B));
    let params = EncoderParams {
        buckets: B,
        image_dim: B,
        embed_dim: B,
        text_projection: identity(B),
        image_projection: identity(B),
        text_bias: vec![0.0; B],
        image_bias: vec![0.0; B],
        text_hidden: None,
        image_hidden: None,
    };
    let r = recall_at_1(&params, &leaf_ids(&dag), &dag, 0).unwrap();
    assert_eq!((r.hits, r.n_queries, r.r_at_1), (9, 9, 1.0));
}

fn trained_s1() -> (ConceptDag, EncoderParams, BTreeSet<String>) {
    let dag = common::s1(0);
    let cfg = TrainConfig {
        epochs: 4,
        ..TrainConfig::preset("toy").unwrap()
    };
    let run = train(&dag, &cfg).unwrap();
    (dag, run.params, run.split.test)
}

/// Brute-force hits through the full similarity matrix, with columns
/// outside each query's allowed set masked out.
fn brute_force(params: &EncoderParams, dag: &ConceptDag, test: &BTreeSet<String>, level: usize, restricted: bool) -> (usize, usize) {
    let nodes: Vec<String> = test.iter().map(|l| leaf_node_id(l)).collect();
    let gallery: Vec<Vec<f64>> = nodes
        .iter()
        .map(|n| {
            let x = dag.nodes[n].leaf.as_ref().unwrap().image_features.clone().unwrap();
            params.forward(Input::Image(&x)).unwrap().embedding().as_slice().to_vec()
        })
        .collect();
    let mut queries = Vec::new();
    let mut relevant = Vec::new();
    let mut masks = Vec::new();
    for (qi, n) in nodes.iter().enumerate() {
        let text = if level == 0 {
            dag.nodes[n].leaf.as_ref().unwrap().caption.clone()
        } else {
            let Some(a) = dag.ancestor(n, level) else { continue };
            let node = &dag.nodes[&a];
            node.generalized_caption.clone().unwrap_or_else(|| node.concept_text.clone())
        };
        let f = featurize_text(&text, params.buckets).unwrap();
        queries.push(params.forward(Input::Text(&f)).unwrap().embedding().as_slice().to_vec());
        relevant.push(if level == 0 {
            BTreeSet::from([qi])
        } else {
            (0..nodes.len()).filter(|&j| dag.ancestor(&nodes[j], level) == dag.ancestor(n, level)).collect()
        });
        let group = dag.ancestor(n, 1).unwrap();
        let mut allowed = dag.nodes[&group].hard_negatives.clone();
        allowed.insert(group);
        masks.push(
            (0..nodes.len())
                .map(|j| !restricted || dag.ancestor(&nodes[j], 1).is_some_and(|g| allowed.contains(&g)))
                .collect::<Vec<bool>>(),
        );
    }
    if !restricted {
        return (retrieval::hits(&queries, &gallery, &relevant), queries.len());
    }
    let sims = retrieval::similarity_matrix(&queries, &gallery);
    let hits = sims
        .iter()
        .zip(&masks)
        .zip(&relevant)
        .filter(|((row, mask), rel)| {
            let masked: Vec<f64> = row.iter().zip(*mask).map(|(s, &m)| if m { *s } else { f64::NEG_INFINITY }).collect();
            rel.contains(&retrieval::argmax(&masked))
        })
        .count();
    (hits, queries.len())
}

#[test]
fn agrees_with_brute_force_retrieval() {
    let (dag, params, test) = trained_s1();
    for mode in [Gallery::Full, Gallery::Restricted] {
        let ev = Evaluator::new(&params, &dag, &test, mode).unwrap();
        for level in 0..=dag.l_max {
            let got = ev.recall_at_1(level).unwrap();
            let want = brute_force(&params, &dag, &test, level, mode == Gallery::Restricted);
            assert_eq!((got.hits, got.n_queries), want, "{mode:?} level {level}");
        }
    }
}

#[test]
fn report_covers_every_level() {
    let (dag, params, test) = trained_s1();
    let meta = ReportMeta {
        model_id: "m".into(),
        dataset_id: "s1".into(),
        seed: 0,
        config_hash: "abc".into(),
        tags: BTreeMap::from([("loss".to_string(), "pairwise".to_string())]),
    };
    let a = evaluate_all(&params, &dag, &test, Gallery::Full, &meta).unwrap();
    let b = evaluate_all(&params, &dag, &test, Gallery::Full, &meta).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.levels.len(), dag.l_max + 1);
    let names: Vec<&str> = a.levels.iter().map(|l| l.level.as_str()).collect();
    assert_eq!(names, ["captions", "l1", "l2", "l3", "l4"]);
    for l in &a.levels {
        assert!((0.0..=1.0).contains(&l.r_at_1));
        assert_eq!(l.n_queries + l.skipped, test.len());
    }

    let dir = tempfile::tempdir().unwrap();
    a.write(&dir.path().join("report")).unwrap();
    let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), a);
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), dag.l_max + 2);
    assert!(csv.starts_with("model,level,r_at_1,hits,n_queries,skipped\n"));
}

#[test]
fn evaluation_errors() {
    let dag = common::sized_dag(&[2, 2], |_, _| vec![0.0; 3]);
    let params = constant_model(64, 3);
    let empty = BTreeSet::new();
    assert!(matches!(recall_at_1(&params, &empty, &dag, 0), Err(EvalError::EmptyTestSet)));
    let test = leaf_ids(&dag);
    assert!(matches!(
        recall_at_1(&params, &test, &dag, 3),
        Err(EvalError::InvalidLevel { level: 3, l_max: 2 })
    ));
    let unknown = BTreeSet::from(["nope".to_string()]);
    assert!(matches!(recall_at_1(&params, &unknown, &dag, 0), Err(EvalError::UnknownLeaf(_))));
    let wrong = constant_model(64, 5);
    assert!(matches!(recall_at_1(&wrong, &test, &dag, 0), Err(EvalError::Encoder(_))));
}

#[test]
fn restricted_gallery_stays_inside_the_group() {
    // Every image is identical, so the full gallery always returns g0-00;
    // the restricted one returns the first leaf of the query's own group.
    let dag = common::sized_dag(&[2, 3], |_, _| vec![1.0, 0.0, 0.0]);
    let params = constant_model(64, 3);
    let test = leaf_ids(&dag);
    let full = Evaluator::new(&params, &dag, &test, Gallery::Full).unwrap();
    let restricted = Evaluator::new(&params, &dag, &test, Gallery::Restricted).unwrap();
    assert_eq!(full.recall_at_1(0).unwrap().hits, 1);
    assert_eq!(full.recall_at_1(1).unwrap().hits, 2);
    assert_eq!(restricted.recall_at_1(0).unwrap().hits, 2);
    assert_eq!(restricted.recall_at_1(1).unwrap().hits, 5);
}

#[test]
fn constant_model_recall_never_drops_with_level() {
    let dag = common::s1(3);
    let params = constant_model(64, 32);
    let r: Vec<f64> = (0..=dag.l_max)
        .map(|k| recall_at_1(&params, &leaf_ids(&dag), &dag, k).unwrap().r_at_1)
        .collect();
    assert!(r.windows(2).all(|w| w[0] <= w[1]), "{r:?}");
    assert_eq!(r[dag.l_max], 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// Two leaves sharing a tier-k ancestor share every higher one, so a
    /// fixed top-1 image that hits at level k hits at every level above it.
    #[test]
    fn shared_ancestors_persist_upwards(seed in 0u64..1000, b0 in 2usize..4, b1 in 1usize..3) {
        let dag = common::synthetic_dag(vec![b0, b1, 2], 2, 4, 0.1, seed);
        let leaves = dag.level(0);
        for a in &leaves {
            for b in &leaves {
                for k in 1..dag.l_max {
                    let here = dag.ancestor(a, k);
                    if here.is_some() && here == dag.ancestor(b, k) {
                        prop_assert_eq!(dag.ancestor(a, k + 1), dag.ancestor(b, k + 1));
                    }
                }
            }
        }
    }
}

#[test]
fn comparing_a_report_with_itself() {
    let a = report("a", &[("loss", "pairwise")], &[0.5, 0.75]);
    let c = compare_models(&[a.clone(), a]).unwrap();
    assert!(c.rows.iter().all(|r| r.delta_vs_baseline == 0.0));
    assert!(c.gains.is_empty());
    assert_eq!(c.baseline, "a");
}

#[test]
fn comparing_two_reports() {
    let a = report("a", &[("loss", "infonce")], &[0.5, 0.25]);
    let b = report("b", &[("loss", "pairwise")], &[0.625, 0.75]);
    let c = compare_models(&[a, b]).unwrap();
    let deltas: Vec<(&str, &str, f64)> =
        c.rows.iter().map(|r| (r.model.as_str(), r.level.as_str(), r.delta_vs_baseline)).collect();
    assert_eq!(
        deltas,
        [("a", "captions", 0.0), ("a", "l1", 0.0), ("b", "captions", 0.125), ("b", "l1", 0.5)]
    );
    assert_eq!(c.gains.len(), 1);
    let g = &c.gains[0];
    assert_eq!((g.factor.as_str(), g.from.as_str(), g.to.as_str(), g.pairs), ("loss", "infonce", "pairwise", 1));
    assert_eq!(g.average, 0.3125);
    let csv = c.to_csv();
    assert_eq!(csv.lines().next(), Some("model,level,r_at_1,delta_vs_baseline"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn factor_gains_over_a_grid() {
    let reports = [
        report("pw", &[("loss", "pairwise"), ("pretraining", "no")], &[0.5, 0.625]),
        report("ce", &[("loss", "centroid"), ("pretraining", "no")], &[0.75, 0.875]),
        report("pw+pt", &[("loss", "pairwise"), ("pretraining", "yes")], &[0.5625, 0.75]),
        report("ce+pt", &[("loss", "centroid"), ("pretraining", "yes")], &[0.875, 1.0]),
    ];
    let c = compare_models(&reports).unwrap();
    let gains: Vec<(&str, &str, &str, usize, Vec<f64>, f64)> = c
        .gains
        .iter()
        .map(|g| {
            (
                g.factor.as_str(),
                g.from.as_str(),
                g.to.as_str(),
                g.pairs,
                g.per_level.iter().map(|(_, v)| *v).collect(),
                g.average,
            )
        })
        .collect();
    assert_eq!(
        gains,
        [
            ("loss", "pairwise", "centroid", 2, vec![0.28125, 0.25], 0.265625),
            ("pretraining", "no", "yes", 2, vec![0.09375, 0.125], 0.109375),
        ]
    );
    let row = c.rows.iter().find(|r| r.model == "ce+pt" && r.level == "l1").unwrap();
    assert_eq!(row.delta_vs_baseline, 0.375);
}

#[test]
fn incompatible_reports_are_rejected() {
    let a = report("a", &[], &[0.5, 0.5]);
    let mut other_data = report("b", &[], &[0.5, 0.5]);
    other_data.dataset_id = "elsewhere".into();
    let fewer_levels = report("c", &[], &[0.5]);
    for bad in [other_data, fewer_levels] {
        assert!(matches!(
            compare_models(&[a.clone(), bad]),
            Err(EvalError::IncompatibleReports(_))
        ));
    }
    assert!(matches!(compare_models(&[]), Err(EvalError::IncompatibleReports(_))));
}
