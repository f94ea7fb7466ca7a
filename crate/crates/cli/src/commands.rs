use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use glass_core::eval::{compare_models, evaluate_all, EvalReport, Gallery, ReportMeta};
use glass_core::forge::provider::{CachedProvider, HttpConfig, HttpProvider, RuleProvider};
use glass_core::forge::{
    dag_from_json, forge, load_dag, save_dag, synth_taxonomy, AbstractionProvider, ConceptDag, Corpus, ForgeConfig,
    ForgeOutput, HashedTrigramEmbedder, SynthSpec,
};
use glass_core::gradcheck::{random_trials, TrialShape};
use glass_core::loss::{LossConfig, LossId};
use glass_core::numerics::Rng;
use glass_core::trainer::{
    load_checkpoint, pretrain_text_alignment, resume, save_checkpoint, train_from, Checkpoint, LossKind, Split,
    TrainConfig, TrainRun,
};

use crate::args::{
    CompareArgs, EvalArgs, ForgeArgs, ForgeKnobs, GalleryArg, GradcheckArgs, InspectArgs, ProviderKind, SynthArgs,
    TrainArgs,
};
use crate::manifest::Manifest;

/// Bad flag combinations or values clap cannot see; exits 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

const DAG: &str = "dag.json";
const CHECKPOINT: &str = "checkpoint.json";
const SPLIT: &str = "split.json";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(dir: &Path, name: &str, body: impl AsRef<[u8]>) -> Result<String> {
    let path = dir.join(name);
    std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(name.to_string())
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into())
}

/// Forge settings: defaults, then the overrides present.
fn forge_config(base: ForgeConfig, knobs: &ForgeOverrides) -> ForgeConfig {
    ForgeConfig {
        l_max: knobs.l_max.unwrap_or(base.l_max),
        size_min: knobs.size_min.unwrap_or(base.size_min),
        sim_min: knobs.sim_min.unwrap_or(base.sim_min),
        hard_neg_threshold: knobs.hard_neg_threshold.unwrap_or(base.hard_neg_threshold),
        parallelism: base.parallelism,
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct ForgeOverrides {
    l_max: Option<usize>,
    size_min: Option<usize>,
    sim_min: Option<f64>,
    hard_neg_threshold: Option<f64>,
}

impl From<&ForgeKnobs> for ForgeOverrides {
    fn from(k: &ForgeKnobs) -> Self {
        Self {
            l_max: k.l_max,
            size_min: k.size_min,
            sim_min: k.sim_min,
            hard_neg_threshold: k.hard_neg_threshold,
        }
    }
}

/// Synthetic spec file: the generator fields at the top level and an
/// optional `[forge]` table.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpecFile {
    #[serde(flatten)]
    synth: SynthSpec,
    #[serde(default)]
    forge: ForgeOverrides,
}

fn write_forged(out: &Path, forged: &ForgeOutput, cfg: &ForgeConfig) -> Result<Vec<String>> {
    save_dag(&forged.dag, cfg, &out.join(DAG))?;
    Ok(vec![
        DAG.to_string(),
        write(out, "forge_stats.json", pretty(&forged.stats))?,
        write(out, "merges.json", pretty(&forged.merges))?,
    ])
}

pub fn synth(args: &SynthArgs) -> Result<u8> {
    let text = std::fs::read_to_string(&args.spec).with_context(|| format!("reading {}", args.spec.display()))?;
    let spec: SpecFile = toml::from_str(&text).with_context(|| format!("parsing {}", args.spec.display()))?;
    let cfg = forge_config(
        ForgeConfig {
            l_max: spec.synth.l_max(),
            ..ForgeConfig::default()
        },
        &spec.forge,
    );
    let s = synth_taxonomy(&spec.synth, &mut Rng::derive(args.seed, "synth"))?;
    let forged = forge(&s.corpus, &cfg, &s.rules, &HashedTrigramEmbedder::default())?;

    create_dir(&args.out)?;
    s.corpus.write_jsonl(&args.out.join("corpus.jsonl"))?;
    let mut outputs = vec![
        "corpus.jsonl".to_string(),
        write(&args.out, "rules.json", pretty(&s.rules))?,
        write(&args.out, "truth.json", pretty(&s.truth))?,
    ];
    outputs.extend(write_forged(&args.out, &forged, &cfg)?);

    let mut m = Manifest::new(
        "synth",
        args.seed,
        serde_json::json!({ "spec": spec.synth, "forge": cfg }),
    )
    .input("spec", &args.spec);
    m.dataset_id = Some(format!("synth-{}-seed{}", stem(&args.spec), args.seed));
    m.outputs = outputs;
    m.write(&args.out)?;
    println!(
        "{} leaves in {} groups, {} hard-negative links -> {}",
        forged.stats.total_pairs,
        forged.dag.group_nodes().len(),
        hard_negative_links(&forged.dag),
        args.out.display()
    );
    Ok(0)
}

pub fn forge_cmd(args: &ForgeArgs) -> Result<u8> {
    let corpus = Corpus::load_jsonl(&args.corpus)?;
    let cfg = forge_config(ForgeConfig::default(), &ForgeOverrides::from(&args.knobs));
    let cache_dir = args.cache_dir.clone().unwrap_or_else(|| args.out.join("cache"));
    let provider: Box<dyn AbstractionProvider> = match args.provider {
        ProviderKind::Rules => {
            let Some(path) = &args.rules else {
                return usage("--provider rules needs --rules");
            };
            Box::new(RuleProvider::load(path)?)
        }
        ProviderKind::Http => {
            let Some(url) = &args.provider_url else {
                return usage("--provider http needs --provider-url or GLASS_PROVIDER_URL");
            };
            let mut http = HttpConfig::new(url.clone());
            http.api_key = args.provider_key.clone();
            http.max_retries = args.provider_retries;
            Box::new(CachedProvider::new(HttpProvider::new(http), Some(cache_dir.clone())))
        }
    };
    create_dir(&args.out)?;
    let forged = forge(&corpus, &cfg, &provider, &HashedTrigramEmbedder::default())?;
    let outputs = write_forged(&args.out, &forged, &cfg)?;

    let mut config = serde_json::json!({ "forge": cfg, "provider": format!("{:?}", args.provider).to_lowercase() });
    if args.provider == ProviderKind::Http {
        config["provider_id"] = provider.id().into();
        config["cache_dir"] = cache_dir.display().to_string().into();
    }
    let mut m = Manifest::new("forge", args.seed, config).input("corpus", &args.corpus);
    if let Some(r) = &args.rules {
        m = m.input("rules", r);
    }
    m.dataset_id = Some(format!("corpus-{}", stem(&args.corpus)));
    m.outputs = outputs;
    m.write(&args.out)?;
    println!(
        "{} leaves in {} groups ({} merge decisions) -> {}",
        forged.stats.total_pairs,
        forged.dag.group_nodes().len(),
        forged.merges.len(),
        args.out.display()
    );
    Ok(0)
}

fn hard_negative_links(dag: &ConceptDag) -> usize {
    dag.nodes.values().map(|n| n.hard_negatives.len()).sum::<usize>() / 2
}

fn load_data(dir: &Path) -> Result<ConceptDag> {
    let (dag, _) = load_dag(&dir.join(DAG))?;
    Ok(dag)
}

fn dataset_id(data: &Path) -> String {
    Manifest::read(data)
        .ok()
        .and_then(|m| m.dataset_id)
        .unwrap_or_else(|| stem(data))
}

fn train_config(args: &TrainArgs, seed: u64) -> Result<TrainConfig> {
    let Some(mut cfg) = TrainConfig::preset(&args.preset) else {
        return usage(format!(
            "unknown preset {:?}; choose one of {:?}",
            args.preset,
            glass_core::trainer::PRESETS
        ));
    };
    if let Some(name) = &args.loss {
        match LossKind::parse(name) {
            Some(k) if k != LossKind::TextText => cfg.loss_kind = k,
            _ => return usage(format!("unknown loss {name:?}; choose pairwise, centroid or infonce")),
        }
    }
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.epochs, args.epochs);
    set(&mut cfg.groups_per_batch, args.groups_per_batch);
    set(&mut cfg.pairs_per_group, args.pairs_per_group);
    set(&mut cfg.embed_dim, args.embed_dim);
    set(&mut cfg.buckets, args.buckets);
    for (slot, v) in [
        (&mut cfg.learning_rate, args.lr),
        (&mut cfg.tau, args.tau),
        (&mut cfg.tau_inner, args.tau_inner),
        (&mut cfg.alpha, args.alpha),
        (&mut cfg.momentum, args.momentum),
        (&mut cfg.split_fraction, args.split_fraction),
    ] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if args.hidden.is_some() {
        cfg.hidden = args.hidden;
    }
    cfg.stop_gradient_centroids |= args.stop_gradient;
    cfg.seed = seed;
    if let Err(e) = cfg.validate() {
        return usage(e.to_string());
    }
    Ok(cfg)
}

fn checkpoint_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT)
    } else {
        path.to_path_buf()
    }
}

fn write_run(out: &Path, run: &TrainRun) -> Result<Vec<String>> {
    create_dir(out)?;
    save_checkpoint(&run.checkpoint(), &out.join(CHECKPOINT))?;
    Ok(vec![
        CHECKPOINT.to_string(),
        write(out, "history.csv", run.history.to_csv())?,
        write(out, SPLIT, pretty(&run.split))?,
    ])
}

/// `train` and `pretrain-text`.
pub fn train_cmd(args: &TrainArgs, pretrain: bool) -> Result<u8> {
    let command = if pretrain { "pretrain-text" } else { "train" };
    if pretrain && (args.init.is_some() || args.resume.is_some()) {
        return usage("pretrain-text starts from fresh parameters; --init and --resume do not apply");
    }
    let dag = load_data(&args.data)?;
    let seed = match args.seed {
        Some(s) => s,
        None => Manifest::read(&args.data).map(|m| m.seed).unwrap_or(0),
    };
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.data.join(if pretrain { "ckpt-text" } else { "ckpt" }));

    let run = if let Some(from) = &args.resume {
        let ckpt = load_checkpoint(&checkpoint_path(from))?;
        let mut cfg = ckpt.config.clone();
        if let Some(e) = args.epochs {
            cfg.epochs = e;
        }
        resume(&dag, &cfg, ckpt)?
    } else {
        let cfg = train_config(args, seed)?;
        if pretrain {
            pretrain_text_alignment(&dag, &cfg)?
        } else {
            let init = match &args.init {
                Some(p) => Some(load_checkpoint(&checkpoint_path(p))?.params),
                None => None,
            };
            train_from(&dag, &cfg, init)?
        }
    };
    let outputs = write_run(&out, &run)?;

    let mut m = Manifest::new(command, run.config.seed, serde_json::to_value(&run.config)?)
        .input("data", &args.data);
    if let Some(p) = &args.init {
        m = m.input("init", p);
    }
    if let Some(p) = &args.resume {
        m = m.input("resume", p);
    }
    m.dataset_id = Some(dataset_id(&args.data));
    m.outputs = outputs;
    m.write(&out)?;
    let losses = run.history.epoch_losses();
    println!(
        "{command}: {} epochs, {} steps, loss {:.4} -> {:.4} -> {}",
        run.state.epoch,
        run.state.step,
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(0)
}

pub fn eval_cmd(args: &EvalArgs) -> Result<u8> {
    let dag = load_data(&args.data)?;
    let ckpt_file = checkpoint_path(&args.ckpt);
    let ckpt_dir = ckpt_file.parent().map(Path::to_path_buf).unwrap_or_default();
    let ckpt = load_checkpoint(&ckpt_file)?;
    let split_path = ckpt_dir.join(SPLIT);
    let split: Split = serde_json::from_str(
        &std::fs::read_to_string(&split_path).with_context(|| format!("reading {}", split_path.display()))?,
    )
    .with_context(|| format!("parsing {}", split_path.display()))?;

    let gallery = match args.gallery {
        GalleryArg::Full => Gallery::Full,
        GalleryArg::Restricted => Gallery::Restricted,
    };
    let mut tags = BTreeMap::from([("loss".to_string(), ckpt.config.loss_kind.name().to_string())]);
    let pretrained = Manifest::read(&ckpt_dir).is_ok_and(|m| m.inputs.contains_key("init"));
    tags.insert("pretraining".into(), if pretrained { "yes" } else { "no" }.into());
    tags.extend(args.tags.iter().cloned());
    let meta = ReportMeta {
        model_id: args.model_id.clone().unwrap_or_else(|| stem(&ckpt_dir)),
        dataset_id: dataset_id(&args.data),
        seed: args.seed.unwrap_or(ckpt.config.seed),
        config_hash: ckpt.training_config_hash.clone(),
        tags,
    };
    let report = evaluate_all(&ckpt.params, &dag, &split.test, gallery, &meta)?;

    let out = args.out.clone().unwrap_or_else(|| {
        ckpt_dir.join(match gallery {
            Gallery::Full => "eval",
            Gallery::Restricted => "eval-restricted",
        })
    });
    create_dir(&out)?;
    report.write(&out.join("report"))?;
    let mut m = Manifest::new(
        "eval",
        meta.seed,
        serde_json::json!({ "gallery": gallery, "model_id": meta.model_id, "tags": meta.tags }),
    )
    .input("ckpt", &args.ckpt)
    .input("data", &args.data);
    m.dataset_id = Some(meta.dataset_id.clone());
    m.outputs = vec!["report.json".into(), "report.csv".into()];
    m.write(&out)?;
    print_report(&report);
    Ok(0)
}

fn print_report(r: &EvalReport) {
    println!("{} on {} ({:?} gallery)", r.model_id, r.dataset_id, r.gallery);
    for l in &r.levels {
        println!("  {:<9} R@1 {:.4}  ({}/{}, {} skipped)", l.level, l.r_at_1, l.hits, l.n_queries, l.skipped);
    }
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn compare(args: &CompareArgs) -> Result<u8> {
    let reports = args.reports.iter().map(|p| read_report(p)).collect::<Result<Vec<_>>>()?;
    let c = compare_models(&reports)?;
    create_dir(&args.out)?;
    let outputs = vec![
        write(&args.out, "comparison.csv", c.to_csv())?,
        write(&args.out, "comparison.json", c.to_json())?,
    ];
    let mut m = Manifest::new("compare", args.seed, serde_json::json!({ "baseline": c.baseline }));
    for (k, p) in args.reports.iter().enumerate() {
        m = m.input(&format!("report{k}"), p);
    }
    m.dataset_id = reports.first().map(|r| r.dataset_id.clone());
    m.outputs = outputs;
    m.write(&args.out)?;
    for g in &c.gains {
        println!(
            "{}: {} -> {} over {} pair(s), average gain {:+.4}",
            g.factor, g.from, g.to, g.pairs, g.average
        );
    }
    println!("-> {}", args.out.display());
    Ok(0)
}

#[derive(Serialize)]
struct GradcheckRow {
    loss: &'static str,
    trials: usize,
    max_relative_error: f64,
    max_abs_error: f64,
    pass: bool,
}

/// Plain f64 central differences; near-zero gradient entries can push the
/// relative error past small tolerances through roundoff alone.
pub fn gradcheck(args: &GradcheckArgs) -> Result<u8> {
    let ids: Vec<LossId> = if args.loss == "all" {
        LossId::ALL.to_vec()
    } else {
        match LossId::parse(&args.loss) {
            Some(id) => vec![id],
            None => {
                let names: Vec<&str> = LossId::ALL.iter().map(|id| id.name()).collect();
                return usage(format!("unknown loss {:?}; choose all or one of {names:?}", args.loss));
            }
        }
    };
    if args.trials == 0 {
        return usage("--trials must be positive");
    }
    let cfg = LossConfig {
        tau: args.tau,
        tau_inner: args.tau_inner.unwrap_or(args.tau),
        alpha: args.alpha,
        stop_gradient_centroids: args.stop_gradient,
    };
    if let Err(e) = cfg.validate() {
        return usage(e.to_string());
    }
    let mut rows = Vec::new();
    for id in ids {
        let checks = random_trials(id, &cfg, args.trials, args.seed, TrialShape::default(), args.h)?;
        let rel = checks.iter().map(|c| c.max_relative_error).fold(0.0, f64::max);
        let abs = checks.iter().map(|c| c.max_abs_error).fold(0.0, f64::max);
        println!(
            "{:<15} max relative error {rel:.3e}  max abs error {abs:.3e}  {}",
            id.name(),
            if rel < args.tolerance { "ok" } else { "FAIL" }
        );
        rows.push(GradcheckRow {
            loss: id.name(),
            trials: args.trials,
            max_relative_error: rel,
            max_abs_error: abs,
            pass: rel < args.tolerance,
        });
    }
    let worst = rows.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    println!("max relative error {worst:.3e} (tolerance {:.0e})", args.tolerance);
    if let Some(out) = &args.out {
        create_dir(out)?;
        let mut m = Manifest::new(
            "gradcheck",
            args.seed,
            serde_json::json!({ "loss": args.loss, "trials": args.trials, "h": args.h, "tolerance": args.tolerance, "loss_config": cfg }),
        );
        m.outputs = vec![write(out, "gradcheck.json", pretty(&rows))?];
        m.write(out)?;
    }
    Ok(if worst < args.tolerance { 0 } else { 1 })
}

pub fn inspect(args: &InspectArgs) -> Result<u8> {
    let path = if args.path.is_dir() {
        [CHECKPOINT, DAG, "report.json"]
            .iter()
            .map(|f| args.path.join(f))
            .find(|p| p.exists())
            .with_context(|| format!("{} holds no checkpoint, dag or report", args.path.display()))?
    } else {
        args.path.clone()
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("{} is not JSON", path.display()))?;
    if value.get("levels").is_some() {
        print_report(&serde_json::from_value(value)?);
    } else if value.get("params").is_some() {
        inspect_checkpoint(&Checkpoint::from_json(&text)?);
    } else if value.get("nodes").is_some() {
        let (dag, cfg) = dag_from_json(&text)?;
        let stats = dag.stats();
        println!("dag: l_max {}, forge config {}", dag.l_max, serde_json::to_string(&cfg)?);
        println!("  pairs {}", stats.total_pairs);
        for (k, n) in stats.nodes_per_level.iter().enumerate() {
            println!("  tier {} nodes {n}", k + 1);
        }
        println!("  avg images per group {:.2}", stats.avg_images_per_node);
        println!("  hard-negative links {}", hard_negative_links(&dag));
    } else {
        bail!("{}: not a dag, checkpoint or report", path.display());
    }
    Ok(0)
}

fn inspect_checkpoint(c: &Checkpoint) {
    println!("checkpoint format {}, config hash {}", c.format_version, c.training_config_hash);
    println!("  config {}", serde_json::to_string(&c.config).expect("config serializes"));
    println!(
        "  params B={} D={} L={} hidden={:?}",
        c.params.buckets, c.params.image_dim, c.params.embed_dim, c.config.hidden
    );
    let losses = c.history.epoch_losses();
    println!("  epochs {} steps {}", c.state.epoch, c.state.step);
    if let (Some(a), Some(b)) = (losses.first(), losses.last()) {
        println!("  epoch loss {a:.4} -> {b:.4}");
    }
}
