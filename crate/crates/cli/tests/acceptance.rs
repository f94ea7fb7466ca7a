//! Acceptance run: one line per criterion. Exits nonzero when a criterion
//! fails unexpectedly or a known failure starts passing.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use glass_core::eval::{evaluate_all, recall_at_1, Gallery, ReportMeta};
use glass_core::forge::{
    build_dag, embed_level, forge, infer_all_chains, leaf_node_id, merge_small_nodes, mine_hard_negatives,
    synth_taxonomy, ConceptDag, Corpus, ForgeConfig, HashedTrigramEmbedder, SynthSpec, Synthetic,
};
use glass_core::gradcheck::{compare_with, trial_batches, TrialShape};
use glass_core::loss::{joint_group_centroid, Group, GroupBatch, LossConfig, LossId};
use glass_core::numerics::{self, Rng};
use glass_core::trainer::{load_checkpoint, resume, save_checkpoint, train, LossKind, TrainConfig};
use glass_oracle::forge as forge_oracle;
use glass_oracle::{Loss, Params, Tensor3};

/// Outcome of one criterion: pass flag and a one-line summary.
type Outcome = (bool, String);

/// Criteria that cannot pass on the S1 fixture as defined: captions name
/// only the group, so the two held-out images of a group are
/// indistinguishable to a caption query and caption-level R@1 sits near 0.5.
/// They still run at their stated thresholds and print FAIL.
const KNOWN_FAILURES: [usize; 1] = [6];

const GROUPED: [LossId; 6] = [
    LossId::PairwiseOuter,
    LossId::PairwiseInner,
    LossId::CentroidOuter,
    LossId::CentroidInner,
    LossId::Pairwise,
    LossId::Centroid,
];

fn value(id: LossId, b: &GroupBatch, cfg: &LossConfig) -> f64 {
    id.evaluate(b, cfg).unwrap().value
}

fn nested(batch: &GroupBatch) -> (Tensor3, Tensor3) {
    let side = |images: bool| -> Tensor3 {
        batch
            .groups()
            .iter()
            .map(|g| {
                let es = if images { &g.images } else { &g.texts };
                es.iter().map(|e| e.as_slice().to_vec()).collect()
            })
            .collect()
    };
    (side(true), side(false))
}

fn oracle_loss(id: LossId) -> Loss {
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

fn within_time(start: Instant, limit: Duration) -> (bool, String) {
    let t = start.elapsed();
    (t < limit, format!("{:.2}s of {}s", t.as_secs_f64(), limit.as_secs()))
}

fn factorization() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::derive(0, "acceptance/factorization");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = 1 + rng.below(8);
        let l = 1 + rng.below(64);
        let g = GroupBatch::random_unit(&mut rng, 1, n, l).unwrap().into_groups().remove(0);
        let mu = joint_group_centroid(&g.images, &g.texts).unwrap();
        let prod = numerics::elementwise_product(
            &numerics::mean(&g.images).unwrap(),
            &numerics::mean(&g.texts).unwrap(),
        )
        .unwrap();
        worst = mu.iter().zip(&prod).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    let (fast, time) = within_time(start, Duration::from_secs(1));
    (worst < 1e-12 && fast, format!("100 groups, max abs error {worst:.1e}, {time}"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cfg = LossConfig::default();
    let params = Params {
        tau: cfg.tau,
        tau_inner: cfg.tau_inner,
        alpha: cfg.alpha,
    };
    let mut worst: Option<(f64, &str)> = None;
    for id in LossId::ALL {
        for batch in trial_batches(id, 20, 0, TrialShape::default()).unwrap() {
            let (i, t) = nested(&batch);
            let numeric = glass_oracle::central_difference(oracle_loss(id), &i, &t, params, 1e-5);
            let r = compare_with(id, &batch, &cfg, &numeric).unwrap();
            if worst.is_none_or(|(w, _)| r.max_relative_error > w) {
                worst = Some((r.max_relative_error, id.name()));
            }
        }
    }
    let (err, which) = worst.unwrap();
    let (fast, time) = within_time(start, Duration::from_secs(30));
    (
        err < 1e-4 && fast,
        format!("7 losses x 20 batches, h=1e-5, max relative error {err:.2e} ({which}), {time}"),
    )
}

fn limiting_cases() -> Outcome {
    let cfg = LossConfig::default();
    let mut rng = Rng::derive(0, "acceptance/limits");
    let mut single = 0.0f64;
    for _ in 0..20 {
        let n = 1 + rng.below(5);
        let l = 2 + rng.below(15);
        let b = GroupBatch::random_unit(&mut rng, 1, n, l).unwrap();
        for id in GROUPED {
            single = single.max(value(id, &b, &cfg).abs());
        }
    }
    let mut plateau = 0.0f64;
    for m in [2usize, 3, 5] {
        let base = GroupBatch::random_unit(&mut rng, 1, 3, 8).unwrap().into_groups().remove(0);
        let groups = (0..m).map(|k| Group::new(format!("copy{k}"), base.images.clone(), base.texts.clone())).collect();
        let b = GroupBatch::new(groups).unwrap();
        for id in GROUPED {
            plateau = plateau.max((value(id, &b, &cfg) - (m as f64).ln()).abs());
        }
    }
    let mut endpoints = 0.0f64;
    let b = GroupBatch::random_unit(&mut rng, 3, 4, 8).unwrap();
    for alpha in [0.0, 1.0] {
        let c = LossConfig { alpha, ..cfg };
        for (combined, inner, outer) in [
            (LossId::Pairwise, LossId::PairwiseInner, LossId::PairwiseOuter),
            (LossId::Centroid, LossId::CentroidInner, LossId::CentroidOuter),
        ] {
            let pure = if alpha == 1.0 { value(inner, &b, &c) } else { value(outer, &b, &c) };
            endpoints = endpoints.max((value(combined, &b, &c) - pure).abs());
        }
    }
    (
        single < 1e-9 && plateau < 1e-9 && endpoints < 1e-12,
        format!("M=1 max |L| {single:.1e}, identical groups max |L - ln M| {plateau:.1e}, alpha endpoints {endpoints:.1e}"),
    )
}

fn invariances() -> Outcome {
    let cfg = LossConfig::default();
    let mut rng = Rng::derive(0, "acceptance/invariance");
    let (mut order, mut scaling) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let m = 2 + rng.below(3);
        let n = 1 + rng.below(5);
        let l = 2 + rng.below(15);
        let b = GroupBatch::random_unit(&mut rng, m, n, l).unwrap();

        let mut groups = b.groups().to_vec();
        rng.shuffle(&mut groups);
        let reordered = GroupBatch::new(groups).unwrap();
        let mut joint = b.groups().to_vec();
        let mut unpaired = b.groups().to_vec();
        for (g, u) in joint.iter_mut().zip(&mut unpaired) {
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            g.images = idx.iter().map(|&k| g.images[k].clone()).collect();
            g.texts = idx.iter().map(|&k| g.texts[k].clone()).collect();
            rng.shuffle(&mut u.texts);
        }
        let joint = GroupBatch::new(joint).unwrap();
        let unpaired = GroupBatch::new(unpaired).unwrap();
        let scaled = b.map(|e| e.scaled(3.7), |e| e.scaled(0.2));

        for id in LossId::ALL {
            let v = value(id, &b, &cfg);
            order = order.max((value(id, &reordered, &cfg) - v).abs());
            order = order.max((value(id, &joint, &cfg) - v).abs());
            if GROUPED.contains(&id) {
                order = order.max((value(id, &unpaired, &cfg) - v).abs());
            }
            scaling = scaling.max((value(id, &scaled, &cfg) - v).abs());
        }
    }
    (
        order < 1e-12 && scaling < 1e-9,
        format!("permutations max change {order:.1e}, scaling (3.7, 0.2) max change {scaling:.1e}"),
    )
}

fn synth(spec: &SynthSpec, seed: u64) -> Synthetic {
    synth_taxonomy(spec, &mut Rng::derive(seed, "synth")).unwrap()
}

fn chains_dag(s: &Synthetic) -> ConceptDag {
    let chains = infer_all_chains(&s.corpus, s.truth.l_max, &s.rules, 2).unwrap();
    build_dag(&chains, &s.corpus, s.truth.l_max).unwrap()
}

fn group_leaves(dag: &ConceptDag) -> BTreeMap<String, BTreeSet<String>> {
    dag.group_nodes().into_iter().map(|g| (g.clone(), dag.leaves_of(&g))).collect()
}

/// Keeps 1..=10 leaves per group, so several groups fall below size_min.
fn thinned(s: &Synthetic, seed: u64) -> Synthetic {
    let mut rng = Rng::derive(seed, "acceptance/thin");
    let mut keep: BTreeMap<&String, usize> = BTreeMap::new();
    for g in s.truth.leaf_group.values() {
        keep.entry(g).or_insert_with(|| 1 + rng.below(10));
    }
    let mut seen: BTreeMap<&String, usize> = BTreeMap::new();
    let records = s
        .corpus
        .records
        .iter()
        .filter(|r| {
            let g = &s.truth.leaf_group[&r.leaf_id];
            let n = seen.entry(g).or_default();
            *n += 1;
            *n <= keep[g]
        })
        .cloned()
        .collect();
    Synthetic {
        corpus: Corpus::new(records),
        ..s.clone()
    }
}

fn forge_correctness() -> Outcome {
    let start = Instant::now();
    let spec = SynthSpec {
        roots: 1,
        branching: vec![4, 2, 2],
        leaves_per_group: 12,
        feature_dim: 32,
        noise: 0.0,
    };
    let emb = HashedTrigramEmbedder::default();
    let mut problems = Vec::new();

    let s = synth(&spec, 0);
    let dag = chains_dag(&s);
    let concepts: BTreeSet<String> = dag.nodes.values().filter(|n| n.level > 0).map(|n| n.node_id.clone()).collect();
    let mut tree_ok = s.corpus.len() == 192 && concepts == s.truth.parents.keys().cloned().collect();
    for (id, parent) in &s.truth.parents {
        tree_ok &= dag.nodes.get(id).is_some_and(|n| n.parents == parent.iter().cloned().collect());
    }
    for (leaf, group) in &s.truth.leaf_group {
        tree_ok &= dag.nodes[&leaf_node_id(leaf)].parents == BTreeSet::from([group.clone()]);
    }
    if !tree_ok {
        problems.push("tree not reconstructed".to_string());
    }

    let (mut merged, mut removed) = (0, 0);
    for seed in 0..3 {
        let thin = thinned(&s, seed);
        for sim_min in [0.9, 0.8] {
            let mut dag = chains_dag(&thin);
            let expected = forge_oracle::merge_groups(&embed_level(&dag, 1, &emb).unwrap(), &group_leaves(&dag), 5, sim_min);
            for e in merge_small_nodes(&mut dag, 5, sim_min, &emb).unwrap() {
                match e {
                    glass_core::forge::MergeEvent::Merged { .. } => merged += 1,
                    glass_core::forge::MergeEvent::Removed { .. } => removed += 1,
                }
            }
            if group_leaves(&dag) != expected {
                problems.push(format!("merge differs from oracle (thin seed {seed}, sim_min {sim_min})"));
            }
        }
    }
    if merged == 0 || removed == 0 {
        problems.push(format!("merge check exercised {merged} merges and {removed} removals"));
    }

    let mut links = 0;
    for threshold in [0.85, 0.7] {
        let mut dag = chains_dag(&s);
        mine_hard_negatives(&mut dag, threshold, &emb).unwrap();
        let expected = forge_oracle::hard_negatives(&embed_level(&dag, 1, &emb).unwrap(), threshold);
        for g in dag.group_nodes() {
            links += expected[&g].len();
            if dag.nodes[&g].hard_negatives != expected[&g] {
                problems.push(format!("hard negatives of {g} differ at {threshold}"));
            }
        }
    }
    if links == 0 {
        problems.push("hard-negative scan found no pairs".into());
    }

    for seed in 0..3 {
        let thin = thinned(&s, seed);
        let cfg = ForgeConfig {
            l_max: spec.l_max(),
            ..ForgeConfig::default()
        };
        let out = forge(&thin.corpus, &cfg, &thin.rules, &emb).unwrap();
        if let Err(e) = out.dag.check_invariants() {
            problems.push(e);
        }
        if out.dag.group_nodes().iter().any(|g| out.dag.nodes[g].leaf_count < cfg.size_min) {
            problems.push(format!("undersized group survived (thin seed {seed})"));
        }
    }

    let (fast, time) = within_time(start, Duration::from_secs(5));
    let summary = format!(
        "192-leaf tree {}, merge oracle over {merged} merges/{removed} removals, {} hard-negative links, {time}",
        if tree_ok { "reconstructed" } else { "WRONG" },
        links / 2
    );
    if problems.is_empty() {
        (fast, summary)
    } else {
        (false, format!("{summary}; {}", problems.join("; ")))
    }
}

fn s1(seed: u64) -> ConceptDag {
    let spec = SynthSpec {
        roots: 1,
        branching: vec![4, 2, 2],
        leaves_per_group: 12,
        feature_dim: 32,
        noise: 0.05,
    };
    let s = synth(&spec, seed);
    let cfg = ForgeConfig {
        l_max: spec.l_max(),
        ..ForgeConfig::default()
    };
    forge(&s.corpus, &cfg, &s.rules, &HashedTrigramEmbedder::default()).unwrap().dag
}

fn toy(kind: LossKind, seed: u64) -> TrainConfig {
    TrainConfig {
        loss_kind: kind,
        seed,
        ..TrainConfig::preset("toy").unwrap()
    }
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let dag = s1(0);
    let run = train(&dag, &toy(LossKind::Pairwise, 0)).unwrap();
    let r = recall_at_1(&run.params, &run.split.test, &dag, 0).unwrap();
    let losses = run.history.epoch_losses();
    let (fast, time) = within_time(start, Duration::from_secs(120));
    (
        r.r_at_1 >= 0.90 && fast,
        format!(
            "S1 seed 0, {} epochs, caption R@1 {:.4} ({}/{}) vs 0.90 required, epoch loss {:.3} -> {:.4}, {time}",
            losses.len(),
            r.r_at_1,
            r.hits,
            r.n_queries,
            losses[0],
            losses[losses.len() - 1]
        ),
    )
}

fn ablation() -> Outcome {
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let dag = s1(seed);
        let mut r = [[0.0; 2]; 2];
        for (k, kind) in [LossKind::Pairwise, LossKind::InfoNce].into_iter().enumerate() {
            let run = train(&dag, &toy(kind, seed)).unwrap();
            for level in 0..2 {
                r[k][level] = recall_at_1(&run.params, &run.split.test, &dag, level).unwrap().r_at_1;
            }
        }
        rows.push(r);
    }
    let mean = |k: usize| rows.iter().map(|r| r[k][1]).sum::<f64>() / rows.len() as f64;
    let (grouped, instance) = (mean(0), mean(1));
    let widening = rows.iter().filter(|r| r[0][1] - r[1][1] >= r[0][0] - r[1][0]).count();
    let ahead = rows.iter().filter(|r| r[0][1] >= r[1][1]).count();
    (
        grouped >= instance && widening >= 3,
        format!(
            "mean l1 R@1 pairwise {grouped:.4} vs infonce {instance:.4}, l1 gap >= caption gap in {widening}/5 seeds, pairwise >= infonce at l1 in {ahead}/5"
        ),
    )
}

fn determinism() -> Outcome {
    let dag = s1(0);
    let cfg = TrainConfig {
        epochs: 12,
        momentum: 0.9,
        ..toy(LossKind::Centroid, 0)
    };
    let a = train(&dag, &cfg).unwrap();
    let b = train(&dag, &cfg).unwrap();
    let same_ckpt = a.checkpoint().to_json() == b.checkpoint().to_json();
    let meta = ReportMeta {
        model_id: "m".into(),
        dataset_id: "s1".into(),
        seed: 0,
        config_hash: cfg.hash(),
        tags: BTreeMap::new(),
    };
    let report = |params| evaluate_all(params, &dag, &a.split.test, Gallery::Full, &meta).unwrap().to_json();
    let same_report = report(&a.params) == report(&b.params);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    let part = train(&dag, &TrainConfig { epochs: 5, ..cfg.clone() }).unwrap();
    save_checkpoint(&part.checkpoint(), &path).unwrap();
    let resumed = resume(&dag, &cfg, load_checkpoint(&path).unwrap()).unwrap();
    let same_resume = resumed.checkpoint().to_json() == a.checkpoint().to_json();
    (
        same_ckpt && same_report && same_resume,
        format!("repeat checkpoint identical: {same_ckpt}, report identical: {same_report}, resume 5->12 epochs equals unbroken: {same_resume}"),
    )
}

fn glass(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_glass"))
        .args(args)
        .env_remove("GLASS_PROVIDER_URL")
        .env_remove("GLASS_PROVIDER_KEY")
        .env_remove("GLASS_CACHE_DIR")
        .output()
        .unwrap()
}

fn spec_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs/s1.toml")
}

fn manifest_ok(dir: &Path, command: &str) -> bool {
    let Ok(text) = std::fs::read_to_string(dir.join("manifest.json")) else { return false };
    let Ok(m) = serde_json::from_str::<serde_json::Value>(&text) else { return false };
    m["command"] == command
        && m["seed"].is_u64()
        && m["versions"]["glass"].is_string()
        && m["outputs"]
            .as_array()
            .is_some_and(|o| !o.is_empty() && o.iter().all(|f| f.as_str().is_some_and(|f| dir.join(f).exists())))
}

/// Answers `serve` provider requests, then stops listening.
fn flaky_provider(serve: usize) -> (String, std::thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/complete", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        for k in 0..serve {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let reply = format!("{{\"output\": \"concept {k}\"}}");
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (url, handle)
}

fn cli_paths() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("runs/s1");
    let d = data.to_str().unwrap();
    let ckpt = data.join("ckpt");
    let spec = spec_path();
    let steps = [
        ("synth", glass(&["synth", "--spec", spec.to_str().unwrap(), "--seed", "7", "--out", d])),
        ("train", glass(&["train", "--data", d, "--loss", "pairwise", "--preset", "toy"])),
        ("eval", glass(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", d])),
    ];
    let codes: Vec<String> = steps.iter().map(|(c, o)| format!("{c} {}", o.status.code().unwrap_or(-1))).collect();
    let mut happy = steps.iter().all(|(_, o)| o.status.success());
    happy &= manifest_ok(&data, "synth") && manifest_ok(&ckpt, "train") && manifest_ok(&ckpt.join("eval"), "eval");
    let levels = std::fs::read_to_string(ckpt.join("eval/report.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v["levels"].as_array().map(|l| l.len()));
    happy &= levels == Some(5);

    let cache = dir.path().join("cache");
    std::fs::create_dir_all(&cache).unwrap();
    let keep = cache.join("earlier.json");
    std::fs::write(&keep, "{\"kept\": true}\n").unwrap();
    let served = 6;
    let (url, server) = flaky_provider(served);
    let out = dir.path().join("forge-out");
    let failed = glass(&[
        "forge",
        "--corpus",
        data.join("corpus.jsonl").to_str().unwrap(),
        "--provider",
        "http",
        "--provider-url",
        &url,
        "--provider-retries",
        "1",
        "--cache-dir",
        cache.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    server.join().unwrap();
    let stderr = String::from_utf8_lossy(&failed.stderr);
    let entries: Vec<PathBuf> = std::fs::read_dir(&cache).unwrap().map(|e| e.unwrap().path()).collect();
    let intact = entries.iter().all(|p| {
        p.extension().is_some_and(|e| e == "json")
            && std::fs::read_to_string(p).is_ok_and(|t| serde_json::from_str::<serde_json::Value>(&t).is_ok())
    });
    let cached = entries.iter().filter(|p| *p != &keep).count();
    let failure_ok = failed.status.code() == Some(1)
        && stderr.contains("provider failure")
        && intact
        && cached == served
        && std::fs::read_to_string(&keep).unwrap() == "{\"kept\": true}\n"
        && !out.join("dag.json").exists();
    (
        happy && failure_ok,
        format!(
            "happy path exits [{}], {} report levels; unreachable provider exit {:?}, {cached}/{served} answered requests cached, cache intact: {intact}",
            codes.join(", "),
            levels.unwrap_or(0),
            failed.status.code()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("joint centroid factorization", factorization),
        ("gradient suite", gradient_suite),
        ("limiting cases", limiting_cases),
        ("invariances", invariances),
        ("forge correctness", forge_correctness),
        ("end-to-end training", end_to_end),
        ("directional ablation", ablation),
        ("determinism", determinism),
        ("cli paths", cli_paths),
    ];
    let (mut passed, mut unexpected) = (0, 0);
    for (k, (name, check)) in criteria.iter().enumerate() {
        let number = k + 1;
        let known = KNOWN_FAILURES.contains(&number);
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(outcome) => outcome,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        passed += usize::from(pass);
        unexpected += usize::from(pass == known);
        let status = match (pass, known) {
            (true, false) => "PASS",
            (true, true) => "PASS (listed as a known failure)",
            (false, false) => "FAIL",
            (false, true) => "FAIL (known)",
        };
        println!("criterion {number} {status}: {name}: {detail}");
    }
    println!(
        "acceptance: {passed} of {} criteria pass, known failures {KNOWN_FAILURES:?}, {unexpected} unexpected outcome(s)",
        criteria.len()
    );
    if unexpected > 0 {
        std::process::exit(1);
    }
}
