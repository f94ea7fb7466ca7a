//! Straightforward re-implementations of the group merge and the
//! hard-negative scan over plain maps.

use std::collections::{BTreeMap, BTreeSet};

pub type Leaves = BTreeSet<String>;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Surviving groups and their leaves after merging every group smaller than
/// `size_min`: smallest first (ties by id), into the most similar other
/// group (ties by id) when cosine ≥ `sim_min`, smaller into larger, the
/// undersized one on equal sizes; otherwise the group is dropped.
pub fn merge_groups(
    embeddings: &BTreeMap<String, Vec<f64>>,
    leaves: &BTreeMap<String, Leaves>,
    size_min: usize,
    sim_min: f64,
) -> BTreeMap<String, Leaves> {
    let mut groups: Vec<(String, Leaves)> = leaves.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    loop {
        let mut small: Vec<(usize, String)> = groups
            .iter()
            .filter(|(_, l)| l.len() < size_min)
            .map(|(id, l)| (l.len(), id.clone()))
            .collect();
        small.sort();
        let Some((_, target)) = small.into_iter().next() else { break };
        let ti = groups.iter().position(|(id, _)| *id == target).unwrap();

        let mut best: Option<(usize, f64)> = None;
        for (oi, (id, _)) in groups.iter().enumerate() {
            if oi == ti {
                continue;
            }
            let c = cosine(&embeddings[&target], &embeddings[id]);
            let better = match best {
                None => true,
                Some((bi, bc)) => c > bc || (c == bc && *id < groups[bi].0),
            };
            if better {
                best = Some((oi, c));
            }
        }
        match best {
            Some((oi, c)) if c >= sim_min => {
                let (from, to) = if groups[oi].1.len() < groups[ti].1.len() { (oi, ti) } else { (ti, oi) };
                let moved = groups[from].1.clone();
                groups[to].1.extend(moved);
                groups.remove(from);
            }
            _ => {
                groups.remove(ti);
            }
        }
    }
    groups.into_iter().collect()
}

/// For every id, all other ids at cosine strictly above `threshold`.
pub fn hard_negatives(embeddings: &BTreeMap<String, Vec<f64>>, threshold: f64) -> BTreeMap<String, BTreeSet<String>> {
    embeddings
        .iter()
        .map(|(a, ea)| {
            let set = embeddings
                .iter()
                .filter(|(b, eb)| a != *b && cosine(ea, eb) > threshold)
                .map(|(b, _)| b.clone())
                .collect();
            (a.clone(), set)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[&str]) -> Leaves {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn merge_and_drop() {
        let emb: BTreeMap<String, Vec<f64>> = [
            ("a".to_string(), vec![1.0, 0.0]),
            ("b".to_string(), vec![0.95, (1.0f64 - 0.95 * 0.95).sqrt()]),
            ("c".to_string(), vec![0.0, 1.0]),
        ]
        .into_iter()
        .collect();
        let leaves: BTreeMap<String, Leaves> = [
            ("a".to_string(), set(&["1", "2"])),
            ("b".to_string(), set(&["3", "4", "5", "6", "7"])),
            ("c".to_string(), set(&["8"])),
        ]
        .into_iter()
        .collect();
        let out = merge_groups(&emb, &leaves, 5, 0.9);
        assert_eq!(out.len(), 1);
        assert_eq!(out["b"], set(&["1", "2", "3", "4", "5", "6", "7"]));

        let hn = hard_negatives(&emb, 0.85);
        assert_eq!(hn["a"], set(&["b"]));
        assert_eq!(hn["b"], set(&["a"]));
        assert!(hn["c"].is_empty());
    }
}
