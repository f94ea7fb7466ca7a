//! Instance-level symmetric InfoNCE baseline.

use super::{axpy, check_temperature, cross_entropy, LossError, LossOutput, Result};
use crate::numerics::{self, cosine_similarity_with_grad, Embedding};

/// Symmetric InfoNCE over `K` pairs: pair `i` is the only positive for
/// image `i` and for text `i`. Averaged over both directions (`2K` terms).
///
/// Gradients come back with shape `[1][K][L]`.
pub fn infonce_loss(images: &[Embedding], texts: &[Embedding], tau: f64) -> Result<LossOutput> {
    check_temperature(tau)?;
    let k = images.len();
    if k == 0 {
        return Err(LossError::EmptyGroup);
    }
    if texts.len() != k {
        return Err(LossError::RaggedBatch(format!("{k} images but {} texts", texts.len())));
    }
    let dim = images[0].dim();

    let mut sim = vec![vec![0.0; k]; k];
    for (i, row) in sim.iter_mut().enumerate() {
        for (j, s) in row.iter_mut().enumerate() {
            *s = numerics::cosine_similarity(&images[i], &texts[j])? / tau;
        }
    }

    let weight = 1.0 / (2 * k) as f64;
    let mut coef = vec![vec![0.0; k]; k];
    let mut value = 0.0;
    for i in 0..k {
        let (v, d) = cross_entropy(&sim[i], i)?;
        value += v;
        for j in 0..k {
            coef[i][j] += d[j];
        }
    }
    let mut column = vec![0.0; k];
    for j in 0..k {
        for (i, c) in column.iter_mut().enumerate() {
            *c = sim[i][j];
        }
        let (v, d) = cross_entropy(&column, j)?;
        value += v;
        for i in 0..k {
            coef[i][j] += d[i];
        }
    }

    let mut grad_images = vec![vec![0.0; dim]; k];
    let mut grad_texts = vec![vec![0.0; dim]; k];
    for i in 0..k {
        for j in 0..k {
            let cg = cosine_similarity_with_grad(&images[i], &texts[j])?;
            let scale = coef[i][j] * weight / tau;
            axpy(&mut grad_images[i], scale, &cg.d_x);
            axpy(&mut grad_texts[j], scale, &cg.d_y);
        }
    }
    Ok(LossOutput {
        value: value * weight,
        grad_images: vec![grad_images],
        grad_texts: vec![grad_texts],
    })
}
