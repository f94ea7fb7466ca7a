//! Seeded synthetic taxonomies with known ground truth.
//!
//! A balanced concept tree is grown top-down. Each concept gets a fresh
//! pseudo-word (two syllables for groups, three above) and its text is that
//! word followed by its parent's text, so siblings share most of their
//! characters. Every group (tier-1 concept) owns `leaves_per_group` leaves
//! whose captions carry the group key as a `leaf:<key>` token plus the full
//! ancestry, and whose image features are the group prototype plus isotropic
//! Gaussian noise. Prototypes are the normalized sum of one random direction
//! per ancestor, so related groups have related images.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, CorpusRecord};
use super::dag::{concept_node_id, NodeId};
use super::provider::RuleProvider;
use super::{ForgeError, Result};
use crate::numerics::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Number of top-tier concepts.
    #[serde(default = "one")]
    pub roots: usize,
    /// Children per concept, from the top tier down to tier 1. The tree has
    /// `branching.len() + 1` concept tiers.
    pub branching: Vec<usize>,
    pub leaves_per_group: usize,
    pub feature_dim: usize,
    /// Standard deviation of the per-coordinate image noise.
    pub noise: f64,
}

fn one() -> usize {
    1
}

impl SynthSpec {
    pub fn l_max(&self) -> usize {
        self.branching.len() + 1
    }

    pub fn num_groups(&self) -> usize {
        self.roots * self.branching.iter().product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.roots == 0 || self.branching.contains(&0) || self.leaves_per_group == 0 || self.feature_dim == 0 {
            return Err(ForgeError::InvalidSpec(format!("{self:?}")));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(ForgeError::InvalidSpec(format!("noise {} must be finite and nonnegative", self.noise)));
        }
        Ok(())
    }
}

/// The generator's tree: every concept node's parent and every leaf's group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub l_max: usize,
    pub parents: BTreeMap<NodeId, Option<NodeId>>,
    pub leaf_group: BTreeMap<String, NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub corpus: Corpus,
    pub truth: GroundTruth,
    pub rules: RuleProvider,
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn pseudo_word(rng: &mut Rng, used: &mut BTreeSet<String>, syllables: usize) -> String {
    loop {
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS[rng.below(ONSETS.len())], VOWELS[rng.below(VOWELS.len())]))
            .collect();
        if used.insert(w.clone()) {
            return w;
        }
    }
}

struct Concept {
    text: String,
    level: usize,
    parent: Option<usize>,
    direction: Vec<f64>,
}

pub fn synth_taxonomy(spec: &SynthSpec, rng: &mut Rng) -> Result<Synthetic> {
    spec.validate()?;
    let l_max = spec.l_max();
    let mut used = BTreeSet::new();
    let mut concepts: Vec<Concept> = Vec::new();
    let mut frontier: Vec<usize> = Vec::new();
    for _ in 0..spec.roots {
        let text = pseudo_word(rng, &mut used, 3);
        concepts.push(Concept {
            text,
            level: l_max,
            parent: None,
            direction: rng.unit_vector(spec.feature_dim).into_vec(),
        });
        frontier.push(concepts.len() - 1);
    }
    for (step, &fanout) in spec.branching.iter().enumerate() {
        let level = l_max - 1 - step;
        let mut next = Vec::new();
        for &p in &frontier {
            for _ in 0..fanout {
                let word = pseudo_word(rng, &mut used, if level == 1 { 2 } else { 3 });
                let text = format!("{word} {}", concepts[p].text);
                concepts.push(Concept {
                    text,
                    level,
                    parent: Some(p),
                    direction: rng.unit_vector(spec.feature_dim).into_vec(),
                });
                next.push(concepts.len() - 1);
            }
        }
        frontier = next;
    }

    let mut truth = GroundTruth {
        l_max,
        parents: BTreeMap::new(),
        leaf_group: BTreeMap::new(),
    };
    let mut rules = RuleProvider::default();
    for c in &concepts {
        let parent = c.parent.map(|p| &concepts[p]);
        truth
            .parents
            .insert(concept_node_id(c.level, &c.text), parent.map(|p| concept_node_id(p.level, &p.text)));
        if let Some(p) = parent {
            rules.parent_rules.insert(c.text.clone(), p.text.clone());
        }
    }

    let mut records = Vec::new();
    for &g in &frontier {
        let group = &concepts[g];
        let key = group.text.replace(' ', "_");
        rules.leaf_rules.insert(key.clone(), group.text.clone());
        let mut proto = vec![0.0; spec.feature_dim];
        let mut cur = Some(g);
        while let Some(k) = cur {
            for (p, d) in proto.iter_mut().zip(&concepts[k].direction) {
                *p += d;
            }
            cur = concepts[k].parent;
        }
        let proto = numerics::l2_normalize(&proto)?;
        for item in 0..spec.leaves_per_group {
            let leaf_id = format!("leaf-{:05}", records.len());
            let image: Vec<f64> = proto.iter().map(|p| p + spec.noise * rng.normal()).collect();
            records.push(CorpusRecord {
                leaf_id: leaf_id.clone(),
                caption: format!("leaf:{key} item {item} a photo of {}", group.text),
                alt_captions: Vec::new(),
                image_features: Some(image),
                image_feature_ref: None,
            });
            truth.leaf_group.insert(leaf_id, concept_node_id(1, &group.text));
        }
    }
    Ok(Synthetic {
        corpus: Corpus::new(records),
        truth,
        rules,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> SynthSpec {
        SynthSpec {
            roots: 1,
            branching: vec![4, 2, 2],
            leaves_per_group: 12,
            feature_dim: 32,
            noise,
        }
    }

    #[test]
    fn counts_follow_the_branching() {
        let s = synth_taxonomy(&spec(0.05), &mut Rng::new(7)).unwrap();
        assert_eq!(spec(0.05).num_groups(), 16);
        assert_eq!(s.corpus.len(), 192);
        let groups: BTreeSet<_> = s.truth.leaf_group.values().collect();
        assert_eq!(groups.len(), 16);
        let per_level = |k: usize| s.truth.parents.keys().filter(|id| id.starts_with(&format!("l{k}:"))).count();
        assert_eq!([per_level(1), per_level(2), per_level(3), per_level(4)], [16, 8, 4, 1]);
    }

    #[test]
    fn zero_noise_gives_identical_group_images() {
        let s = synth_taxonomy(&spec(0.0), &mut Rng::new(1)).unwrap();
        for chunk in s.corpus.records.chunks(12) {
            assert!(chunk.iter().all(|r| r.image_features == chunk[0].image_features));
        }
        assert_ne!(s.corpus.records[0].image_features, s.corpus.records[12].image_features);
    }

    #[test]
    fn seeded() {
        let a = synth_taxonomy(&spec(0.05), &mut Rng::new(3)).unwrap();
        let b = synth_taxonomy(&spec(0.05), &mut Rng::new(3)).unwrap();
        let c = synth_taxonomy(&spec(0.05), &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(0.1);
        s.branching = vec![2, 0];
        assert!(synth_taxonomy(&s, &mut Rng::new(0)).is_err());
        let mut s = spec(-1.0);
        s.noise = -1.0;
        assert!(synth_taxonomy(&s, &mut Rng::new(0)).is_err());
    }
}
