//! Grouped contrastive losses with analytic gradients.
//!
//! A [`GroupBatch`] holds `M` groups of `N` image/text pairs. Two loss
//! families operate on it:
//!
//! * pairwise-oriented: an outer term where every image must prefer the texts
//!   of its own group over texts of other groups (and vice versa), and an
//!   inner term classifying each combined vector `I_{g,i} ⊙ T_{g,j}` against
//!   the per-group joint centroids;
//! * centroid-oriented: the same split, but computed on per-modality group
//!   means.
//!
//! The instance-level symmetric InfoNCE loss is provided as a baseline.
//!
//! Every loss returns its value together with `∂loss/∂I` and `∂loss/∂T` for
//! every input embedding. Centroids are functions of the batch, so by default
//! gradients flow through them into every member embedding.
//! [`LossConfig::stop_gradient_centroids`] treats the centroids that act as
//! class targets in the inner terms as constants instead.

mod centroid;
mod infonce;
mod pairwise;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, Embedding, NumericsError, Rng};

pub use centroid::{centroid_inner_loss, centroid_inner_loss_with, centroid_loss, centroid_outer_loss, modality_centroids};
pub use infonce::infonce_loss;
pub use pairwise::{joint_group_centroid, pairwise_inner_loss, pairwise_inner_loss_with, pairwise_loss, pairwise_outer_loss};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("group has no pairs")]
    EmptyGroup,
    #[error("batch has no groups")]
    EmptyBatch,
    #[error("ragged batch: {0}")]
    RaggedBatch(String),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Gradient array shaped `[group][pair][coordinate]`.
pub type PairGrads = Vec<Vec<Vec<f64>>>;

/// One group of `N` image/text pairs; `images[i]` and `texts[i]` are a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub group_id: String,
    pub images: Vec<Embedding>,
    pub texts: Vec<Embedding>,
}

impl Group {
    pub fn new(group_id: impl Into<String>, images: Vec<Embedding>, texts: Vec<Embedding>) -> Self {
        Self {
            group_id: group_id.into(),
            images,
            texts,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// `M` groups with a common pair count `N` and embedding dimension `L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    groups: Vec<Group>,
}

impl GroupBatch {
    pub fn new(groups: Vec<Group>) -> Result<Self> {
        let first = groups.first().ok_or(LossError::EmptyBatch)?;
        let n = first.images.len();
        if n == 0 {
            return Err(LossError::EmptyGroup);
        }
        let l = first.images[0].dim();
        for g in &groups {
            if g.images.is_empty() || g.texts.is_empty() {
                return Err(LossError::EmptyGroup);
            }
            if g.images.len() != n || g.texts.len() != n {
                return Err(LossError::RaggedBatch(format!(
                    "group {} has {} images and {} texts, expected {n} of each",
                    g.group_id,
                    g.images.len(),
                    g.texts.len()
                )));
            }
            if let Some(bad) = g.images.iter().chain(&g.texts).find(|e| e.dim() != l) {
                return Err(LossError::Numerics(NumericsError::DimMismatch {
                    left: l,
                    right: bad.dim(),
                }));
            }
        }
        Ok(Self { groups })
    }

    /// `M` groups of `N` pairs with independent random unit embeddings.
    pub fn random_unit(rng: &mut Rng, m: usize, n: usize, dim: usize) -> Result<Self> {
        let groups = (0..m)
            .map(|g| {
                let images = (0..n).map(|_| rng.unit_vector(dim)).collect();
                let texts = (0..n).map(|_| rng.unit_vector(dim)).collect();
                Group::new(format!("g{g}"), images, texts)
            })
            .collect();
        Self::new(groups)
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn into_groups(self) -> Vec<Group> {
        self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn pairs_per_group(&self) -> usize {
        self.groups[0].images.len()
    }

    pub fn dim(&self) -> usize {
        self.groups[0].images[0].dim()
    }

    /// Applies `f` to every image and `g` to every text, keeping the shape.
    pub fn map(&self, f: impl Fn(&Embedding) -> Embedding, g: impl Fn(&Embedding) -> Embedding) -> Self {
        let groups = self
            .groups
            .iter()
            .map(|grp| Group {
                group_id: grp.group_id.clone(),
                images: grp.images.iter().map(&f).collect(),
                texts: grp.texts.iter().map(&g).collect(),
            })
            .collect();
        Self { groups }
    }

    pub(crate) fn zero_grads(&self) -> PairGrads {
        vec![vec![vec![0.0; self.dim()]; self.pairs_per_group()]; self.num_groups()]
    }
}

/// Temperatures and mixing weight for the combined losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Outer temperature.
    pub tau: f64,
    /// Inner temperature. Defaults to `tau`.
    pub tau_inner: f64,
    /// Weight of the inner term; the outer term gets `1 - alpha`.
    pub alpha: f64,
    #[serde(default)]
    pub stop_gradient_centroids: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            tau_inner: 0.1,
            alpha: 0.7,
            stop_gradient_centroids: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.tau)?;
        check_temperature(self.tau_inner)?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if !(t.is_finite() && t > 0.0) {
        return Err(LossError::InvalidConfig(format!("temperature {t} must be positive")));
    }
    Ok(())
}

/// Loss value with gradients shaped like the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_images: PairGrads,
    pub grad_texts: PairGrads,
}

impl LossOutput {
    /// `a·self + b·other`, value and gradients alike.
    pub fn combine(&self, a: f64, other: &LossOutput, b: f64) -> LossOutput {
        let mix = |x: &PairGrads, y: &PairGrads| -> PairGrads {
            x.iter()
                .zip(y)
                .map(|(gx, gy)| {
                    gx.iter()
                        .zip(gy)
                        .map(|(vx, vy)| vx.iter().zip(vy).map(|(p, q)| a * p + b * q).collect())
                        .collect()
                })
                .collect()
        };
        LossOutput {
            value: a * self.value + b * other.value,
            grad_images: mix(&self.grad_images, &other.grad_images),
            grad_texts: mix(&self.grad_texts, &other.grad_texts),
        }
    }

    /// Euclidean norm over every gradient entry.
    pub fn grad_norm(&self) -> f64 {
        self.grad_images
            .iter()
            .chain(&self.grad_texts)
            .flatten()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Selects one of the implemented losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossId {
    PairwiseOuter,
    PairwiseInner,
    Pairwise,
    CentroidOuter,
    CentroidInner,
    Centroid,
    /// Symmetric InfoNCE over the batch flattened to `M·N` pairs.
    #[serde(rename = "infonce")]
    InfoNce,
}

impl LossId {
    pub const ALL: [LossId; 7] = [
        LossId::PairwiseOuter,
        LossId::PairwiseInner,
        LossId::CentroidOuter,
        LossId::CentroidInner,
        LossId::Pairwise,
        LossId::Centroid,
        LossId::InfoNce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossId::PairwiseOuter => "pairwise_outer",
            LossId::PairwiseInner => "pairwise_inner",
            LossId::Pairwise => "pairwise",
            LossId::CentroidOuter => "centroid_outer",
            LossId::CentroidInner => "centroid_inner",
            LossId::Centroid => "centroid",
            LossId::InfoNce => "infonce",
        }
    }

    pub fn parse(s: &str) -> Option<LossId> {
        LossId::ALL.into_iter().find(|id| id.name() == s)
    }

    pub fn evaluate(self, batch: &GroupBatch, cfg: &LossConfig) -> Result<LossOutput> {
        cfg.validate()?;
        match self {
            LossId::PairwiseOuter => pairwise_outer_loss(batch, cfg.tau),
            LossId::PairwiseInner => {
                pairwise_inner_loss_with(batch, cfg.tau_inner, cfg.stop_gradient_centroids)
            }
            LossId::Pairwise => pairwise_loss(batch, cfg),
            LossId::CentroidOuter => centroid_outer_loss(batch, cfg.tau),
            LossId::CentroidInner => {
                centroid_inner_loss_with(batch, cfg.tau_inner, cfg.stop_gradient_centroids)
            }
            LossId::Centroid => centroid_loss(batch, cfg),
            LossId::InfoNce => infonce_on_batch(batch, cfg.tau),
        }
    }
}

/// InfoNCE over every pair of the batch, gradients reshaped to the batch.
fn infonce_on_batch(batch: &GroupBatch, tau: f64) -> Result<LossOutput> {
    let n = batch.pairs_per_group();
    let images: Vec<Embedding> = batch.groups().iter().flat_map(|g| g.images.iter().cloned()).collect();
    let texts: Vec<Embedding> = batch.groups().iter().flat_map(|g| g.texts.iter().cloned()).collect();
    let flat = infonce_loss(&images, &texts, tau)?;
    let reshape = |v: Vec<Vec<f64>>| -> PairGrads { v.chunks(n).map(|c| c.to_vec()).collect() };
    Ok(LossOutput {
        value: flat.value,
        grad_images: reshape(flat.grad_images.into_iter().flatten().collect()),
        grad_texts: reshape(flat.grad_texts.into_iter().flatten().collect()),
    })
}

/// Adds `scale · v` into `acc`.
pub(crate) fn axpy(acc: &mut [f64], scale: f64, v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += scale * x;
    }
}

/// Per-group modality means, `(μ^I, μ^T)`.
pub(crate) fn group_means(batch: &GroupBatch) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    batch
        .groups()
        .iter()
        .map(|g| Ok((numerics::mean(&g.images)?, numerics::mean(&g.texts)?)))
        .collect()
}

/// Softmax cross-entropy of `logits` against class `target`, returning the
/// loss and `∂loss/∂logits`.
///
/// Evaluated as `log1p(Σ_{k≠t} exp(z_k − z_t))` so that near-zero losses keep
/// full relative precision.
pub(crate) fn cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    let lse = numerics::logsumexp(logits)?;
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    grad[target] -= 1.0;
    let others: Vec<f64> = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != target)
        .map(|(_, z)| z - logits[target])
        .collect();
    Ok((log1p_exp_lse(&others)?, grad))
}

/// `log(1 + Σ exp(d_k))`, zero for an empty slice.
pub(crate) fn log1p_exp_lse(d: &[f64]) -> Result<f64> {
    if d.is_empty() {
        return Ok(0.0);
    }
    let lse = numerics::logsumexp(d)?;
    Ok(if lse > 0.0 { lse + (-lse).exp().ln_1p() } else { lse.exp().ln_1p() })
}
