//! Brute-force R@1: the full query × gallery similarity matrix, then an
//! argmax per row.

use std::collections::BTreeSet;

/// Row-major `queries.len() × gallery.len()` dot products.
pub fn similarity_matrix(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Vec<Vec<f64>> {
    queries
        .iter()
        .map(|q| gallery.iter().map(|g| q.iter().zip(g).map(|(a, b)| a * b).sum()).collect())
        .collect()
}

/// Column of the row maximum; the first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

/// Hits: queries whose argmax column is in their relevant set.
pub fn hits(queries: &[Vec<f64>], gallery: &[Vec<f64>], relevant: &[BTreeSet<usize>]) -> usize {
    similarity_matrix(queries, gallery)
        .iter()
        .zip(relevant)
        .filter(|(row, rel)| rel.contains(&argmax(row)))
        .count()
}
