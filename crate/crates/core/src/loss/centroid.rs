//! Centroid-oriented grouped loss.

use super::{axpy, check_temperature, cross_entropy, group_means, Group, GroupBatch, LossConfig, LossError, LossOutput, Result};
use crate::numerics::{self, cosine_similarity_with_grad, Embedding};

/// Per-modality means `(μ^I, μ^T)` of one group. Not renormalized.
pub fn modality_centroids(group: &Group) -> Result<(Embedding, Embedding)> {
    if group.is_empty() || group.texts.is_empty() {
        return Err(LossError::EmptyGroup);
    }
    Ok((
        Embedding::new(numerics::mean(&group.images)?)?,
        Embedding::new(numerics::mean(&group.texts)?)?,
    ))
}

/// Spreads a gradient on a group mean evenly over the group's members.
fn distribute(grads: &mut [Vec<f64>], d_mean: &[f64]) {
    let inv_n = 1.0 / grads.len() as f64;
    for g in grads {
        axpy(g, inv_n, d_mean);
    }
}

/// Outer centroid term: symmetric cross-entropy over the `M×M` similarity
/// matrix between image centroids and text centroids, averaged over `2M`.
pub fn centroid_outer_loss(batch: &GroupBatch, tau: f64) -> Result<LossOutput> {
    check_temperature(tau)?;
    let m = batch.num_groups();
    let dim = batch.dim();
    let means = group_means(batch)?;

    let mut sim = vec![vec![0.0; m]; m];
    for (g, row) in sim.iter_mut().enumerate() {
        for (h, s) in row.iter_mut().enumerate() {
            *s = numerics::cosine_similarity(&means[g].0, &means[h].1)? / tau;
        }
    }

    let weight = 1.0 / (2 * m) as f64;
    let mut coef = vec![vec![0.0; m]; m];
    let mut value = 0.0;
    for g in 0..m {
        let (v, d) = cross_entropy(&sim[g], g)?;
        value += v;
        for h in 0..m {
            coef[g][h] += d[h];
        }
    }
    let mut column = vec![0.0; m];
    for h in 0..m {
        for (g, c) in column.iter_mut().enumerate() {
            *c = sim[g][h];
        }
        let (v, d) = cross_entropy(&column, h)?;
        value += v;
        for g in 0..m {
            coef[g][h] += d[g];
        }
    }

    let mut d_img_means = vec![vec![0.0; dim]; m];
    let mut d_txt_means = vec![vec![0.0; dim]; m];
    for g in 0..m {
        for h in 0..m {
            let cg = cosine_similarity_with_grad(&means[g].0, &means[h].1)?;
            let scale = coef[g][h] * weight / tau;
            axpy(&mut d_img_means[g], scale, &cg.d_x);
            axpy(&mut d_txt_means[h], scale, &cg.d_y);
        }
    }

    let mut out = LossOutput {
        value: value * weight,
        grad_images: batch.zero_grads(),
        grad_texts: batch.zero_grads(),
    };
    for g in 0..m {
        distribute(&mut out.grad_images[g], &d_img_means[g]);
        distribute(&mut out.grad_texts[g], &d_txt_means[g]);
    }
    Ok(out)
}

pub fn centroid_inner_loss(batch: &GroupBatch, tau_inner: f64) -> Result<LossOutput> {
    centroid_inner_loss_with(batch, tau_inner, false)
}

/// Inner centroid term: each image is classified among the `M` image
/// centroids and each text among the `M` text centroids, averaged over `2MN`.
pub fn centroid_inner_loss_with(batch: &GroupBatch, tau_inner: f64, stop_gradient: bool) -> Result<LossOutput> {
    check_temperature(tau_inner)?;
    let m = batch.num_groups();
    let n = batch.pairs_per_group();
    let dim = batch.dim();
    let means = group_means(batch)?;
    let img_means: Vec<&[f64]> = means.iter().map(|(i, _)| i.as_slice()).collect();
    let txt_means: Vec<&[f64]> = means.iter().map(|(_, t)| t.as_slice()).collect();

    let weight = 1.0 / (2 * m * n) as f64;
    let mut out = LossOutput {
        value: 0.0,
        grad_images: batch.zero_grads(),
        grad_texts: batch.zero_grads(),
    };
    let mut d_img_means = vec![vec![0.0; dim]; m];
    let mut d_txt_means = vec![vec![0.0; dim]; m];

    for (g, group) in batch.groups().iter().enumerate() {
        for i in 0..n {
            out.value += classify_against(
                &group.images[i],
                &img_means,
                g,
                weight / tau_inner,
                tau_inner,
                &mut out.grad_images[g][i],
                (!stop_gradient).then_some(&mut d_img_means),
            )?;
            out.value += classify_against(
                &group.texts[i],
                &txt_means,
                g,
                weight / tau_inner,
                tau_inner,
                &mut out.grad_texts[g][i],
                (!stop_gradient).then_some(&mut d_txt_means),
            )?;
        }
    }
    out.value *= weight;

    if !stop_gradient {
        for g in 0..m {
            distribute(&mut out.grad_images[g], &d_img_means[g]);
            distribute(&mut out.grad_texts[g], &d_txt_means[g]);
        }
    }
    Ok(out)
}

/// Cross-entropy of `x` against `centroids` with true class `target`.
/// Accumulates `scale`-weighted gradients into `d_x` and, when given, into
/// `d_centroids`. Returns the unweighted loss term.
fn classify_against(
    x: &[f64],
    centroids: &[&[f64]],
    target: usize,
    scale: f64,
    tau: f64,
    d_x: &mut [f64],
    d_centroids: Option<&mut Vec<Vec<f64>>>,
) -> Result<f64> {
    let sims = centroids
        .iter()
        .map(|c| cosine_similarity_with_grad(x, c))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let logits: Vec<f64> = sims.iter().map(|s| s.value / tau).collect();
    let (v, d_logits) = cross_entropy(&logits, target)?;
    for (k, cg) in sims.iter().enumerate() {
        axpy(d_x, d_logits[k] * scale, &cg.d_x);
    }
    if let Some(dc) = d_centroids {
        for (k, cg) in sims.iter().enumerate() {
            axpy(&mut dc[k], d_logits[k] * scale, &cg.d_y);
        }
    }
    Ok(v)
}

/// `α·inner + (1−α)·outer`.
pub fn centroid_loss(batch: &GroupBatch, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let inner = centroid_inner_loss_with(batch, cfg.tau_inner, cfg.stop_gradient_centroids)?;
    let outer = centroid_outer_loss(batch, cfg.tau)?;
    Ok(inner.combine(cfg.alpha, &outer, 1.0 - cfg.alpha))
}
