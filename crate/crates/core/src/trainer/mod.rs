//! Training the toy encoders on a forged DAG.
//!
//! Each step samples a [`BatchPlan`] (a target group, its hard negatives,
//! `pairs_per_group` leaves from each), encodes it, evaluates the configured
//! loss and backpropagates through both towers. Parameters move by plain
//! gradient descent, optionally with heavy-ball momentum. An epoch is
//! `ceil(train_leaves / (groups_per_batch · pairs_per_group))` steps.
//!
//! Randomness comes from three streams derived from `seed`: `split`, `init`
//! and the batch sampler. The sampler's position is stored in checkpoints so
//! a resumed run continues exactly like an unbroken one.

mod checkpoint;
mod data;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoder::{init_params, EncoderDims, EncoderError, EncoderParams, Input, DEFAULT_BUCKETS};
use crate::forge::ConceptDag;
use crate::loss::{Group, GroupBatch, LossConfig, LossError, LossId};
use crate::numerics::{Rng, RngState};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use data::{group_members, sample_batch, split_dataset, BatchPlan, LeafInputs, Split, TrainData};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("group {group} has {leaves} leaf/leaves; at least 2 are needed to split")]
    GroupTooSmall { group: String, leaves: usize },
    #[error("need {needed} groups with training leaves, have {available}")]
    NoGroups { needed: usize, available: usize },
    #[error("leaf {0} has no image features")]
    MissingImageFeatures(String),
    #[error("non-finite loss at step {step} (epoch {epoch}), groups {groups:?}, last finite loss {last_loss:?}")]
    NonFiniteLoss {
        step: u64,
        epoch: usize,
        groups: Vec<String>,
        last_loss: Option<f64>,
    },
    #[error("checkpoint does not match the run: {0}")]
    IncompatibleCheckpoint(String),
    #[error("schema version mismatch: {0}")]
    SchemaVersionMismatch(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Pairwise,
    Centroid,
    #[serde(rename = "infonce")]
    InfoNce,
    /// Text tower only: captions in the text slot, the group's concept text
    /// in the image slot, scored with [`TrainConfig::pretrain_loss`].
    TextText,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Pairwise, LossKind::Centroid, LossKind::InfoNce, LossKind::TextText];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Pairwise => "pairwise",
            LossKind::Centroid => "centroid",
            LossKind::InfoNce => "infonce",
            LossKind::TextText => "text_text",
        }
    }

    pub fn parse(s: &str) -> Option<LossKind> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    fn is_grouped(self) -> bool {
        matches!(self, LossKind::Pairwise | LossKind::Centroid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub groups_per_batch: usize,
    pub pairs_per_group: usize,
    pub learning_rate: f64,
    pub tau: f64,
    pub tau_inner: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default = "default_split")]
    pub split_fraction: f64,
    #[serde(default)]
    pub stop_gradient_centroids: bool,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_buckets")]
    pub buckets: usize,
    pub embed_dim: usize,
    #[serde(default)]
    pub hidden: Option<usize>,
    /// Grouped loss used by `text_text`: `pairwise` or `centroid`.
    #[serde(default = "default_pretrain_loss")]
    pub pretrain_loss: LossKind,
}

fn default_pretrain_loss() -> LossKind {
    LossKind::Pairwise
}

fn default_split() -> f64 {
    0.8
}

fn default_buckets() -> usize {
    DEFAULT_BUCKETS
}

pub const PRESETS: [&str; 2] = ["toy", "paper-table2"];

impl TrainConfig {
    /// `paper-table2`: 2 groups of 10 pairs, lr 1e-8, τ 0.1, α 0.7, five
    /// epochs. `toy`: the same batch shape with lr 1e-2 and 200 epochs.
    pub fn preset(name: &str) -> Option<Self> {
        let toy = Self {
            loss_kind: LossKind::Pairwise,
            groups_per_batch: 2,
            pairs_per_group: 10,
            learning_rate: 1e-2,
            tau: 0.1,
            tau_inner: 0.1,
            alpha: 0.7,
            epochs: 200,
            seed: 0,
            split_fraction: default_split(),
            stop_gradient_centroids: false,
            momentum: 0.0,
            buckets: DEFAULT_BUCKETS,
            embed_dim: 32,
            hidden: None,
            pretrain_loss: LossKind::Pairwise,
        };
        match name {
            "toy" => Some(toy),
            "paper-table2" => Some(Self {
                learning_rate: 1e-8,
                epochs: 5,
                ..toy
            }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        let min_groups = if self.loss_kind == LossKind::InfoNce { 1 } else { 2 };
        if self.groups_per_batch < min_groups {
            return bad(format!("groups_per_batch {} < {min_groups}", self.groups_per_batch));
        }
        if self.pairs_per_group == 0 || self.epochs == 0 || self.buckets == 0 || self.embed_dim == 0 {
            return bad(format!("{self:?}"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!("split_fraction {}", self.split_fraction));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return bad(format!("momentum {}", self.momentum));
        }
        if !self.pretrain_loss.is_grouped() {
            return bad(format!("pretrain_loss {} is not a grouped loss", self.pretrain_loss.name()));
        }
        self.loss_config().validate()?;
        Ok(())
    }

    pub fn loss_id(&self) -> LossId {
        match self.loss_kind {
            LossKind::Pairwise => LossId::Pairwise,
            LossKind::Centroid => LossId::Centroid,
            LossKind::InfoNce => LossId::InfoNce,
            LossKind::TextText if self.pretrain_loss == LossKind::Centroid => LossId::Centroid,
            LossKind::TextText => LossId::Pairwise,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            tau_inner: self.tau_inner,
            alpha: self.alpha,
            stop_gradient_centroids: self.stop_gradient_centroids,
        }
    }

    pub fn dims(&self, image_dim: usize) -> EncoderDims {
        EncoderDims {
            buckets: self.buckets,
            image_dim,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn steps_per_epoch(&self, train_leaves: usize) -> usize {
        train_leaves.div_ceil(self.groups_per_batch * self.pairs_per_group).max(1)
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    /// Norm of the parameter gradient.
    pub grad_norm: f64,
}

/// Per-step records. Wall-clock times are kept beside them but never
/// serialized into checkpoints, so checkpoints stay reproducible. Steps
/// restored from a checkpoint have a NaN time. Equality ignores the times.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
    #[serde(skip)]
    pub wall_ms: Vec<f64>,
}

impl PartialEq for TrainHistory {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
    }
}

impl TrainHistory {
    /// Mean loss of each epoch, in order.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some((e, sum, n)) if *e == r.epoch => {
                    *sum += r.loss;
                    *n += 1;
                }
                _ => out.push((r.epoch, r.loss, 1)),
            }
        }
        out.into_iter().map(|(_, s, n)| s / n as f64).collect()
    }

    /// CSV with columns `step, epoch, loss, grad_norm, wall_ms`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "epoch", "loss", "grad_norm", "wall_ms"]).expect("in-memory csv");
        for (k, r) in self.records.iter().enumerate() {
            let wall = match self.wall_ms.get(k) {
                Some(v) if v.is_finite() => format!("{v:.3}"),
                _ => String::new(),
            };
            w.write_record([
                r.step.to_string(),
                r.epoch.to_string(),
                r.loss.to_string(),
                r.grad_norm.to_string(),
                wall,
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }
}

/// Resumable optimizer position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub sampler: RngState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<EncoderParams>,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub params: EncoderParams,
    pub history: TrainHistory,
    pub state: TrainState,
    pub split: Split,
}

impl TrainRun {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.config, &self.params, &self.history, &self.state)
    }
}

/// Loss and parameter gradient for one planned batch.
pub fn batch_loss_and_grad(
    params: &EncoderParams,
    data: &TrainData,
    plan: &BatchPlan,
    cfg: &TrainConfig,
) -> Result<(f64, EncoderParams)> {
    let mut grads = params.zeros_like();
    let loss_cfg = cfg.loss_config();
    match cfg.loss_kind {
        LossKind::TextText => {
            let mut concepts = Vec::new();
            let mut captions = Vec::new();
            let mut groups = Vec::new();
            for (g, leaves) in &plan.groups {
                let concept = params.forward(Input::Text(&data.concepts[g]))?;
                let caps = leaves
                    .iter()
                    .map(|l| params.forward(Input::Text(&data.leaves[l].caption)))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                groups.push(Group::new(
                    g.clone(),
                    vec![concept.embedding().clone(); leaves.len()],
                    caps.iter().map(|c| c.embedding().clone()).collect(),
                ));
                concepts.push(concept);
                captions.push(caps);
            }
            let out = cfg.loss_id().evaluate(&GroupBatch::new(groups)?, &loss_cfg)?;
            for (gi, (g, leaves)) in plan.groups.iter().enumerate() {
                let mut d_concept = vec![0.0; cfg.embed_dim];
                for (pi, l) in leaves.iter().enumerate() {
                    for (d, v) in d_concept.iter_mut().zip(&out.grad_images[gi][pi]) {
                        *d += v;
                    }
                    params.backward(
                        Input::Text(&data.leaves[l].caption),
                        &captions[gi][pi],
                        &out.grad_texts[gi][pi],
                        &mut grads,
                    );
                }
                params.backward(Input::Text(&data.concepts[g]), &concepts[gi], &d_concept, &mut grads);
            }
            Ok((out.value, grads))
        }
        _ => {
            let mut caches = Vec::new();
            let mut groups = Vec::new();
            for (g, leaves) in &plan.groups {
                let mut pairs = Vec::new();
                for l in leaves {
                    let inputs = &data.leaves[l];
                    let image = params.forward(Input::Image(&inputs.image))?;
                    let text = params.forward(Input::Text(&inputs.caption))?;
                    pairs.push((image, text));
                }
                groups.push(Group::new(
                    g.clone(),
                    pairs.iter().map(|(i, _)| i.embedding().clone()).collect(),
                    pairs.iter().map(|(_, t)| t.embedding().clone()).collect(),
                ));
                caches.push(pairs);
            }
            let out = cfg.loss_id().evaluate(&GroupBatch::new(groups)?, &loss_cfg)?;
            for (gi, (_, leaves)) in plan.groups.iter().enumerate() {
                for (pi, l) in leaves.iter().enumerate() {
                    let inputs = &data.leaves[l];
                    let (image, text) = &caches[gi][pi];
                    params.backward(Input::Image(&inputs.image), image, &out.grad_images[gi][pi], &mut grads);
                    params.backward(Input::Text(&inputs.caption), text, &out.grad_texts[gi][pi], &mut grads);
                }
            }
            Ok((out.value, grads))
        }
    }
}

struct Trainer {
    cfg: TrainConfig,
    data: TrainData,
    split: Split,
    params: EncoderParams,
    state: TrainState,
    sampler: Rng,
    history: TrainHistory,
}

impl Trainer {
    fn prepare(dag: &ConceptDag, cfg: &TrainConfig) -> Result<(Split, TrainData)> {
        cfg.validate()?;
        let split = split_dataset(dag, cfg.split_fraction, &mut Rng::derive(cfg.seed, "split"))?;
        let data = TrainData::new(dag, &split.train, cfg.buckets)?;
        let needed = cfg.groups_per_batch.max(1);
        if data.groups.len() < needed {
            return Err(TrainError::NoGroups {
                needed,
                available: data.groups.len(),
            });
        }
        Ok((split, data))
    }

    fn sampler_label(cfg: &TrainConfig) -> &'static str {
        if cfg.loss_kind == LossKind::TextText {
            "pretrain-batches"
        } else {
            "batches"
        }
    }

    fn start(dag: &ConceptDag, cfg: &TrainConfig, init: Option<EncoderParams>) -> Result<Self> {
        let (split, data) = Self::prepare(dag, cfg)?;
        let dims = cfg.dims(data.image_dim);
        let params = match init {
            Some(p) => {
                if p.dims() != dims {
                    return Err(TrainError::IncompatibleCheckpoint(format!(
                        "initial params {:?}, config wants {dims:?}",
                        p.dims()
                    )));
                }
                p
            }
            None => init_params(dims, &mut Rng::derive(cfg.seed, "init"))?,
        };
        let sampler = Rng::derive(cfg.seed, Self::sampler_label(cfg));
        Ok(Self {
            cfg: cfg.clone(),
            data,
            split,
            params,
            state: TrainState {
                step: 0,
                epoch: 0,
                sampler: sampler.state(),
                velocity: None,
            },
            sampler,
            history: TrainHistory::default(),
        })
    }

    fn resume(dag: &ConceptDag, cfg: &TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        let mut same = ckpt.config.clone();
        same.epochs = cfg.epochs;
        if &same != cfg {
            return Err(TrainError::IncompatibleCheckpoint(
                "configs differ in more than the epoch count".into(),
            ));
        }
        let (split, data) = Self::prepare(dag, cfg)?;
        if ckpt.params.dims() != cfg.dims(data.image_dim) {
            return Err(TrainError::IncompatibleCheckpoint("parameter shapes differ".into()));
        }
        Ok(Self {
            cfg: cfg.clone(),
            data,
            split,
            params: ckpt.params,
            sampler: Rng::from_state(ckpt.state.sampler),
            state: ckpt.state,
            history: TrainHistory {
                wall_ms: vec![f64::NAN; ckpt.history.records.len()],
                records: ckpt.history.records,
            },
        })
    }

    fn run(mut self) -> Result<TrainRun> {
        let steps = self.cfg.steps_per_epoch(self.data.num_leaves());
        let clock = Instant::now();
        while self.state.epoch < self.cfg.epochs {
            for _ in 0..steps {
                self.step(self.state.epoch)?;
                self.history.wall_ms.push(clock.elapsed().as_secs_f64() * 1e3);
            }
            self.state.epoch += 1;
            log::debug!(
                "epoch {} mean loss {:.6}",
                self.state.epoch,
                self.history.epoch_losses().last().copied().unwrap_or(f64::NAN)
            );
        }
        self.state.sampler = self.sampler.state();
        Ok(TrainRun {
            config: self.cfg,
            params: self.params,
            history: self.history,
            state: self.state,
            split: self.split,
        })
    }

    fn step(&mut self, epoch: usize) -> Result<()> {
        let plan = sample_batch(&self.data, &self.cfg, &mut self.sampler)?;
        let (loss, mut grads) = batch_loss_and_grad(&self.params, &self.data, &plan, &self.cfg)?;
        let grad_norm = grads.norm();
        let non_finite = || TrainError::NonFiniteLoss {
            step: self.state.step,
            epoch,
            groups: plan.group_ids().into_iter().map(String::from).collect(),
            last_loss: self.history.records.last().map(|r| r.loss),
        };
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(non_finite());
        }
        if self.cfg.loss_kind == LossKind::TextText {
            // Only the text tower trains during alignment.
            grads.image_projection.data.iter_mut().for_each(|v| *v = 0.0);
            grads.image_bias.iter_mut().for_each(|v| *v = 0.0);
            if let Some(h) = &mut grads.image_hidden {
                h.weight.data.iter_mut().for_each(|v| *v = 0.0);
                h.bias.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        if self.cfg.momentum > 0.0 {
            let v = self.state.velocity.get_or_insert_with(|| grads.zeros_like());
            v.for_each_mut(|x| *x *= self.cfg.momentum);
            v.axpy(1.0, &grads);
            self.params.axpy(-self.cfg.learning_rate, v);
        } else {
            self.params.axpy(-self.cfg.learning_rate, &grads);
        }
        if !self.params.is_finite() {
            return Err(non_finite());
        }
        self.history.records.push(StepRecord {
            step: self.state.step,
            epoch,
            loss,
            grad_norm,
        });
        self.state.step += 1;
        Ok(())
    }
}

/// Trains from freshly initialized parameters for `cfg.epochs` epochs.
pub fn train(dag: &ConceptDag, cfg: &TrainConfig) -> Result<TrainRun> {
    train_from(dag, cfg, None)
}

/// Like [`train`], starting from `init` when given (e.g. pretrained params).
pub fn train_from(dag: &ConceptDag, cfg: &TrainConfig, init: Option<EncoderParams>) -> Result<TrainRun> {
    Trainer::start(dag, cfg, init)?.run()
}

/// Continues a checkpointed run up to `cfg.epochs`. `cfg` must equal the
/// checkpoint's config apart from the epoch count.
pub fn resume(dag: &ConceptDag, cfg: &TrainConfig, ckpt: Checkpoint) -> Result<TrainRun> {
    Trainer::resume(dag, cfg, ckpt)?.run()
}

/// Text-text alignment: trains only the text tower so captions move toward
/// their group's concept text. The grouped loss is `cfg.loss_kind` when that
/// is pairwise or centroid, else `cfg.pretrain_loss`.
pub fn pretrain_text_alignment(dag: &ConceptDag, cfg: &TrainConfig) -> Result<TrainRun> {
    let mut cfg = cfg.clone();
    if cfg.loss_kind.is_grouped() {
        cfg.pretrain_loss = cfg.loss_kind;
    }
    cfg.loss_kind = LossKind::TextText;
    train(dag, &cfg)
}
