//! Central-difference gradients for verifying the analytic ones.

use crate::loss::{self, GroupBatch, LossConfig, LossError, LossId, LossOutput, PairGrads};
use crate::numerics::{Embedding, Rng};

/// Step sizes outside this range are rejected.
pub const STEP_RANGE: (f64, f64) = (1e-7, 1e-3);

/// Floor on the denominator of [`relative_error`].
pub const RELATIVE_FLOOR: f64 = 1e-8;

/// `(f(x+h·e_k) − f(x−h·e_k)) / 2h` for every coordinate `k`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let plus = f(&probe);
            probe[k] = x[k] - h;
            let minus = f(&probe);
            probe[k] = x[k];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

fn check_step(h: f64) -> loss::Result<()> {
    if !(STEP_RANGE.0..=STEP_RANGE.1).contains(&h) {
        return Err(LossError::InvalidConfig(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

/// Central-difference estimate of `∂loss/∂I` and `∂loss/∂T` for every
/// coordinate of every embedding in the batch.
pub fn finite_difference_grad(
    id: LossId,
    batch: &GroupBatch,
    cfg: &LossConfig,
    h: f64,
) -> loss::Result<(PairGrads, PairGrads)> {
    check_step(h)?;
    let mut groups = batch.groups().to_vec();
    let mut grad_images = batch.zero_grads();
    let mut grad_texts = batch.zero_grads();

    let eval = |groups: &[loss::Group]| -> loss::Result<f64> {
        let b = GroupBatch::new(groups.to_vec())?;
        Ok(id.evaluate(&b, cfg)?.value)
    };

    for g in 0..groups.len() {
        for i in 0..groups[g].len() {
            for modality in 0..2 {
                let original = embedding_at(&groups, g, i, modality).clone();
                for k in 0..original.dim() {
                    let mut plus = original.clone().into_vec();
                    plus[k] += h;
                    *embedding_at_mut(&mut groups, g, i, modality) = Embedding::new(plus)?;
                    let f_plus = eval(&groups)?;
                    let mut minus = original.clone().into_vec();
                    minus[k] -= h;
                    *embedding_at_mut(&mut groups, g, i, modality) = Embedding::new(minus)?;
                    let f_minus = eval(&groups)?;
                    let slot = if modality == 0 { &mut grad_images } else { &mut grad_texts };
                    slot[g][i][k] = (f_plus - f_minus) / (2.0 * h);
                }
                *embedding_at_mut(&mut groups, g, i, modality) = original;
            }
        }
    }
    Ok((grad_images, grad_texts))
}

fn embedding_at(groups: &[loss::Group], g: usize, i: usize, modality: usize) -> &Embedding {
    if modality == 0 {
        &groups[g].images[i]
    } else {
        &groups[g].texts[i]
    }
}

fn embedding_at_mut(groups: &mut [loss::Group], g: usize, i: usize, modality: usize) -> &mut Embedding {
    if modality == 0 {
        &mut groups[g].images[i]
    } else {
        &mut groups[g].texts[i]
    }
}

fn flatten(grads: &PairGrads) -> impl Iterator<Item = f64> + '_ {
    grads.iter().flatten().flatten().copied()
}

/// Outcome of comparing analytic and numeric gradients on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub loss: LossId,
    pub value: f64,
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

pub fn check_loss(id: LossId, batch: &GroupBatch, cfg: &LossConfig, h: f64) -> loss::Result<GradCheck> {
    let numeric = finite_difference_grad(id, batch, cfg, h)?;
    compare_with(id, batch, cfg, &numeric)
}

/// Compares the analytic gradients against externally computed numeric ones
/// of the same shape.
pub fn compare_with(
    id: LossId,
    batch: &GroupBatch,
    cfg: &LossConfig,
    numeric: &(PairGrads, PairGrads),
) -> loss::Result<GradCheck> {
    let analytic: LossOutput = id.evaluate(batch, cfg)?;
    let a: Vec<f64> = flatten(&analytic.grad_images).chain(flatten(&analytic.grad_texts)).collect();
    let n: Vec<f64> = flatten(&numeric.0).chain(flatten(&numeric.1)).collect();
    if a.len() != n.len() {
        return Err(LossError::RaggedBatch(format!(
            "numeric gradient has {} entries, expected {}",
            n.len(),
            a.len()
        )));
    }
    let max_abs_error = a.iter().zip(&n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok(GradCheck {
        loss: id,
        value: analytic.value,
        max_relative_error: max_relative_error(&a, &n),
        max_abs_error,
        entries: a.len(),
    })
}

/// Shape of the random batches drawn by [`random_trials`].
#[derive(Debug, Clone, Copy)]
pub struct TrialShape {
    pub max_groups: usize,
    pub max_pairs: usize,
    pub max_dim: usize,
}

impl Default for TrialShape {
    fn default() -> Self {
        Self {
            max_groups: 4,
            max_pairs: 5,
            max_dim: 16,
        }
    }
}

/// Random unit-norm batches with `2 ≤ M ≤ max_groups`, `1 ≤ N ≤ max_pairs`
/// and `2 ≤ L ≤ max_dim`, drawn from a stream specific to `id`.
pub fn trial_batches(id: LossId, trials: usize, seed: u64, shape: TrialShape) -> loss::Result<Vec<GroupBatch>> {
    let mut rng = Rng::derive(seed, &format!("gradcheck/{}", id.name()));
    (0..trials)
        .map(|_| {
            let m = 2 + rng.below(shape.max_groups.max(2) - 1);
            let n = 1 + rng.below(shape.max_pairs.max(1));
            let l = 2 + rng.below(shape.max_dim.max(2) - 1);
            GroupBatch::random_unit(&mut rng, m, n, l)
        })
        .collect()
}

/// [`check_loss`] on every batch of [`trial_batches`].
pub fn random_trials(
    id: LossId,
    cfg: &LossConfig,
    trials: usize,
    seed: u64,
    shape: TrialShape,
    h: f64,
) -> loss::Result<Vec<GradCheck>> {
    trial_batches(id, trials, seed, shape)?
        .iter()
        .map(|batch| check_loss(id, batch, cfg, h))
        .collect()
}
