//! Concept-text embeddings used for merging and hard-negative mining.

use crate::encoder::{featurize_text, EncoderError, Matrix};
use crate::numerics::{self, Rng};

pub trait TextEmbedder: Send + Sync {
    fn id(&self) -> String;

    /// Unit-norm embedding of `text`.
    fn embed(&self, text: &str) -> Result<Vec<f64>, EncoderError>;
}

/// Hashed character trigram counts pushed through a fixed Gaussian random
/// projection. Cosine between outputs tracks cosine between the trigram
/// count vectors, so lexically close concepts land close together.
pub struct HashedTrigramEmbedder {
    buckets: usize,
    seed: u64,
    projection: Matrix,
}

impl HashedTrigramEmbedder {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(buckets: usize, dim: usize, seed: u64) -> Self {
        let mut rng = Rng::derive(seed, "concept-embedder");
        let projection = Matrix {
            rows: buckets,
            cols: dim,
            data: (0..buckets * dim).map(|_| rng.normal()).collect(),
        };
        Self {
            buckets,
            seed,
            projection,
        }
    }
}

impl Default for HashedTrigramEmbedder {
    fn default() -> Self {
        Self::new(crate::encoder::DEFAULT_BUCKETS, Self::DEFAULT_DIM, 0)
    }
}

impl TextEmbedder for HashedTrigramEmbedder {
    fn id(&self) -> String {
        format!(
            "trigram-projection:{}x{}:{}",
            self.buckets, self.projection.cols, self.seed
        )
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EncoderError> {
        let f = featurize_text(text, self.buckets)?;
        let mut out = vec![0.0; self.projection.cols];
        for (&r, &c) in f.counts() {
            for (o, w) in out.iter_mut().zip(self.projection.row(r)) {
                *o += c as f64 * w;
            }
        }
        Ok(numerics::l2_normalize(&out)?)
    }
}

/// Exact trigram-count cosine; no projection noise.
pub struct TrigramEmbedder {
    pub buckets: usize,
}

impl TextEmbedder for TrigramEmbedder {
    fn id(&self) -> String {
        format!("trigram:{}", self.buckets)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EncoderError> {
        let f = featurize_text(text, self.buckets)?;
        let mut out = vec![0.0; self.buckets];
        for (&r, &c) in f.counts() {
            out[r] = c as f64;
        }
        Ok(numerics::l2_normalize(&out)?)
    }
}
