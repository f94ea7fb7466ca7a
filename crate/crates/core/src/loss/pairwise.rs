//! Pairwise-oriented grouped loss.

use super::{axpy, check_temperature, cross_entropy, group_means, log1p_exp_lse, GroupBatch, LossConfig, LossError, LossOutput, Result};
use crate::numerics::{self, cosine_similarity_with_grad, Embedding};

/// Mean of all `N²` element-wise products `images[i] ⊙ texts[j]`.
///
/// Evaluated as the literal double sum; it equals `mean(images) ⊙ mean(texts)`.
pub fn joint_group_centroid(images: &[Embedding], texts: &[Embedding]) -> Result<Embedding> {
    if images.is_empty() || texts.is_empty() {
        return Err(LossError::EmptyGroup);
    }
    let dim = images[0].dim();
    let mut acc = vec![0.0; dim];
    for img in images {
        for txt in texts {
            let prod = numerics::elementwise_product(img, txt)?;
            axpy(&mut acc, 1.0, &prod);
        }
    }
    let inv = 1.0 / (images.len() * texts.len()) as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    Ok(Embedding::new(acc)?)
}

/// Outer pairwise term: each image is scored against every text in the batch,
/// with all texts of its own group as positives, and symmetrically for texts.
/// Averaged over the `2MN` anchors.
pub fn pairwise_outer_loss(batch: &GroupBatch, tau: f64) -> Result<LossOutput> {
    check_temperature(tau)?;
    let m = batch.num_groups();
    let n = batch.pairs_per_group();
    let total = m * n;
    let img = |a: usize| &batch.groups()[a / n].images[a % n];
    let txt = |b: usize| &batch.groups()[b / n].texts[b % n];

    let mut sim = vec![vec![0.0; total]; total];
    for (a, row) in sim.iter_mut().enumerate() {
        for (b, s) in row.iter_mut().enumerate() {
            *s = numerics::cosine_similarity(img(a), txt(b))? / tau;
        }
    }

    // coef[a][b] = ∂loss/∂s(I_a, T_b), before the 1/τ chain factor is folded in.
    let mut coef = vec![vec![0.0; total]; total];
    let mut value = 0.0;
    let weight = 1.0 / (2 * total) as f64;

    for a in 0..total {
        let g = a / n;
        let (v, d_all, d_pos) = positive_set_term(&sim[a], g * n..(g + 1) * n)?;
        value += v;
        for b in 0..total {
            coef[a][b] += d_all[b] - d_pos[b];
        }
    }
    let mut column = vec![0.0; total];
    for b in 0..total {
        let g = b / n;
        for (a, c) in column.iter_mut().enumerate() {
            *c = sim[a][b];
        }
        let (v, d_all, d_pos) = positive_set_term(&column, g * n..(g + 1) * n)?;
        value += v;
        for a in 0..total {
            coef[a][b] += d_all[a] - d_pos[a];
        }
    }

    let mut out = LossOutput {
        value: value * weight,
        grad_images: batch.zero_grads(),
        grad_texts: batch.zero_grads(),
    };
    for (a, row) in coef.iter().enumerate() {
        for (b, &c) in row.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let cg = cosine_similarity_with_grad(img(a), txt(b))?;
            let scale = c * weight / tau;
            axpy(&mut out.grad_images[a / n][a % n], scale, &cg.d_x);
            axpy(&mut out.grad_texts[b / n][b % n], scale, &cg.d_y);
        }
    }
    Ok(out)
}

/// `lse(logits) − lse(logits[positives])` and the two softmax vectors (the
/// positive one zero outside `positives`).
fn positive_set_term(logits: &[f64], positives: std::ops::Range<usize>) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let lse_all = numerics::logsumexp(logits)?;
    let lse_pos = numerics::logsumexp(&logits[positives.clone()])?;
    let d_all = logits.iter().map(|z| (z - lse_all).exp()).collect();
    let mut d_pos = vec![0.0; logits.len()];
    for k in positives.clone() {
        d_pos[k] = (logits[k] - lse_pos).exp();
    }
    // lse_all − lse_pos = log(1 + exp(lse_neg − lse_pos)).
    let negatives: Vec<f64> = logits
        .iter()
        .enumerate()
        .filter(|(k, _)| !positives.contains(k))
        .map(|(_, z)| z - lse_pos)
        .collect();
    Ok((log1p_exp_lse(&negatives)?, d_all, d_pos))
}

/// Inner pairwise term with gradients through the joint centroids.
pub fn pairwise_inner_loss(batch: &GroupBatch, tau_inner: f64) -> Result<LossOutput> {
    pairwise_inner_loss_with(batch, tau_inner, false)
}

/// Inner pairwise term: every combined vector `I_{g,i} ⊙ T_{g,j}` is
/// classified among the `M` joint centroids, averaged over `MN²` vectors.
pub fn pairwise_inner_loss_with(batch: &GroupBatch, tau_inner: f64, stop_gradient: bool) -> Result<LossOutput> {
    check_temperature(tau_inner)?;
    let m = batch.num_groups();
    let n = batch.pairs_per_group();
    let dim = batch.dim();
    let means = group_means(batch)?;
    let centroids: Vec<Vec<f64>> = means
        .iter()
        .map(|(mi, mt)| numerics::elementwise_product(mi, mt))
        .collect::<std::result::Result<_, _>>()?;

    let weight = 1.0 / (m * n * n) as f64;
    let mut out = LossOutput {
        value: 0.0,
        grad_images: batch.zero_grads(),
        grad_texts: batch.zero_grads(),
    };
    let mut d_centroids = vec![vec![0.0; dim]; m];
    let mut logits = vec![0.0; m];
    let mut sims = Vec::with_capacity(m);

    for (g, group) in batch.groups().iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                let combined = numerics::elementwise_product(&group.images[i], &group.texts[j])?;
                sims.clear();
                for (k, mu) in centroids.iter().enumerate() {
                    let cg = cosine_similarity_with_grad(&combined, mu)?;
                    logits[k] = cg.value / tau_inner;
                    sims.push(cg);
                }
                let (v, d_logits) = cross_entropy(&logits, g)?;
                out.value += v;

                let mut d_combined = vec![0.0; dim];
                for (k, cg) in sims.iter().enumerate() {
                    let scale = d_logits[k] * weight / tau_inner;
                    axpy(&mut d_combined, scale, &cg.d_x);
                    if !stop_gradient {
                        axpy(&mut d_centroids[k], scale, &cg.d_y);
                    }
                }
                let d_img = numerics::elementwise_product(&d_combined, &group.texts[j])?;
                let d_txt = numerics::elementwise_product(&d_combined, &group.images[i])?;
                axpy(&mut out.grad_images[g][i], 1.0, &d_img);
                axpy(&mut out.grad_texts[g][j], 1.0, &d_txt);
            }
        }
    }
    out.value *= weight;

    if !stop_gradient {
        // μ_g = μ^I_g ⊙ μ^T_g and each mean is linear in its members.
        let inv_n = 1.0 / n as f64;
        for (g, d_mu) in d_centroids.iter().enumerate() {
            let (mean_img, mean_txt) = &means[g];
            let d_mean_img = numerics::elementwise_product(d_mu, mean_txt)?;
            let d_mean_txt = numerics::elementwise_product(d_mu, mean_img)?;
            for i in 0..n {
                axpy(&mut out.grad_images[g][i], inv_n, &d_mean_img);
                axpy(&mut out.grad_texts[g][i], inv_n, &d_mean_txt);
            }
        }
    }
    Ok(out)
}

/// `α·inner + (1−α)·outer`.
pub fn pairwise_loss(batch: &GroupBatch, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let inner = pairwise_inner_loss_with(batch, cfg.tau_inner, cfg.stop_gradient_centroids)?;
    let outer = pairwise_outer_loss(batch, cfg.tau)?;
    Ok(inner.combine(cfg.alpha, &outer, 1.0 - cfg.alpha))
}
