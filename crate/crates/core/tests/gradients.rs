//! Analytic gradients against central differences.

mod common;

use glass_core::gradcheck::{self, TrialShape};
use glass_core::loss::{LossConfig, LossId};

#[test]
fn analytic_gradients_match_high_precision_differences() {
    let cfg = LossConfig::default();
    for id in LossId::ALL {
        for batch in gradcheck::trial_batches(id, 5, 7, TrialShape::default()).unwrap() {
            let (i, t) = common::nested(&batch);
            let numeric = glass_oracle::central_difference(common::oracle_loss(id), &i, &t, common::params(&cfg), 1e-5);
            let r = gradcheck::compare_with(id, &batch, &cfg, &numeric).unwrap();
            assert!(r.max_relative_error < 1e-4, "{}: {r:?}", id.name());
            assert!(r.max_abs_error < 1e-8, "{}: {r:?}", id.name());
        }
    }
}

#[test]
fn plain_differences_agree_at_moderate_temperature() {
    // Softmaxes are far from saturation at τ = 0.5, so f64 differences are
    // accurate enough for the relative metric.
    let cfg = LossConfig {
        tau: 0.5,
        tau_inner: 0.5,
        ..LossConfig::default()
    };
    let shape = TrialShape {
        max_groups: 3,
        max_pairs: 3,
        max_dim: 6,
    };
    for id in LossId::ALL {
        for r in gradcheck::random_trials(id, &cfg, 5, 3, shape, 1e-5).unwrap() {
            assert!(r.max_relative_error < 1e-4, "{}: {r:?}", id.name());
        }
    }
}

fn cos(x: &[f64], y: &[f64]) -> f64 {
    let d: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny: f64 = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    d / (nx * ny)
}

fn neg_log_softmax(x: &[f64], targets: &[Vec<f64>], own: usize, tau: f64) -> f64 {
    let z: Vec<f64> = targets.iter().map(|mu| cos(x, mu) / tau).collect();
    z.iter().map(|v| v.exp()).sum::<f64>().ln() - z[own]
}

fn mean(vs: &[Vec<f64>]) -> Vec<f64> {
    (0..vs[0].len()).map(|k| vs.iter().map(|v| v[k]).sum::<f64>() / vs.len() as f64).collect()
}

#[test]
fn stop_gradient_matches_differences_with_frozen_targets() {
    use glass_core::loss::{centroid_inner_loss_with, pairwise_inner_loss_with, GroupBatch};
    use glass_core::numerics::Rng;
    let (m, n, tau, h) = (3, 2, 0.5, 1e-5);
    let batch = GroupBatch::random_unit(&mut Rng::new(4), m, n, 5).unwrap();
    let (img, txt) = common::nested(&batch);
    let mi: Vec<Vec<f64>> = img.iter().map(|g| mean(g)).collect();
    let mt: Vec<Vec<f64>> = txt.iter().map(|g| mean(g)).collect();
    let joint: Vec<Vec<f64>> = mi.iter().zip(&mt).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).collect()).collect();

    // Targets are constants, so every member's term can be differenced alone.
    let centroid = centroid_inner_loss_with(&batch, tau, true).unwrap();
    let pairwise = pairwise_inner_loss_with(&batch, tau, true).unwrap();
    for g in 0..m {
        for i in 0..n {
            let x = &img[g][i];
            let fd = gradcheck::central_difference(|v| neg_log_softmax(v, &mi, g, tau) / (2 * m * n) as f64, x, h);
            for (a, b) in centroid.grad_images[g][i].iter().zip(&fd) {
                assert!((a - b).abs() < 1e-9, "centroid {a} {b}");
            }
            let pair_term = |v: &[f64]| {
                (0..n)
                    .map(|j| {
                        let c: Vec<f64> = v.iter().zip(&txt[g][j]).map(|(p, q)| p * q).collect();
                        neg_log_softmax(&c, &joint, g, tau)
                    })
                    .sum::<f64>()
                    / (m * n * n) as f64
            };
            let fd = gradcheck::central_difference(pair_term, x, h);
            for (a, b) in pairwise.grad_images[g][i].iter().zip(&fd) {
                assert!((a - b).abs() < 1e-9, "pairwise {a} {b}");
            }
        }
    }
}
