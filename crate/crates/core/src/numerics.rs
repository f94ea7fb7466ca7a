//! Dense-vector primitives and the seeded random stream shared by every
//! other module.
//!
//! All math is `f64`. Norms below [`ZERO_NORM`] are treated as degenerate.

use std::ops::Deref;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Vectors whose Euclidean norm falls below this are rejected.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("vector norm {norm:e} is below the zero-norm threshold")]
    ZeroNormVector { norm: f64 },
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// A length-`L` real vector with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(NumericsError::EmptyInput);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    /// Multiplies every entry by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|v| v * c).collect())
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = NumericsError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(NumericsError::DimMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    Ok(())
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

fn nonzero_norm(x: &[f64]) -> Result<f64> {
    let n = norm(x);
    if n < ZERO_NORM {
        return Err(NumericsError::ZeroNormVector { norm: n });
    }
    Ok(n)
}

/// `x·y / (|x||y|)`.
pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x, y)?;
    let nx = nonzero_norm(x)?;
    let ny = nonzero_norm(y)?;
    Ok(dot(x, y) / (nx * ny))
}

/// Cosine similarity together with its partial derivatives.
#[derive(Debug, Clone)]
pub struct CosineGrad {
    pub value: f64,
    pub d_x: Vec<f64>,
    pub d_y: Vec<f64>,
}

/// Cosine similarity and `∂s/∂x`, `∂s/∂y`.
///
/// With `s = x·y / (|x||y|)`: `∂s/∂x = y/(|x||y|) − s·x/|x|²`, symmetric for `y`.
pub fn cosine_similarity_with_grad(x: &[f64], y: &[f64]) -> Result<CosineGrad> {
    check_dims(x, y)?;
    let nx = nonzero_norm(x)?;
    let ny = nonzero_norm(y)?;
    let inv = 1.0 / (nx * ny);
    let value = dot(x, y) * inv;
    let (sx, sy) = (value / (nx * nx), value / (ny * ny));
    let d_x = x.iter().zip(y).map(|(a, b)| b * inv - sx * a).collect();
    let d_y = x.iter().zip(y).map(|(a, b)| a * inv - sy * b).collect();
    Ok(CosineGrad { value, d_x, d_y })
}

pub fn elementwise_product(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check_dims(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| a * b).collect())
}

/// `log Σ exp(xᵢ)` with a max shift.
pub fn logsumexp(xs: &[f64]) -> Result<f64> {
    let max = xs
        .iter()
        .copied()
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
        .ok_or(NumericsError::EmptyInput)?;
    if xs.len() == 1 {
        return Ok(max);
    }
    let sum: f64 = xs.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Softmax probabilities, computed with the same max shift as [`logsumexp`].
pub fn softmax(xs: &[f64]) -> Result<Vec<f64>> {
    let lse = logsumexp(xs)?;
    Ok(xs.iter().map(|v| (v - lse).exp()).collect())
}

pub fn l2_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let n = nonzero_norm(x)?;
    Ok(x.iter().map(|v| v / n).collect())
}

/// Arithmetic mean of equally sized vectors.
pub fn mean<V: AsRef<[f64]>>(vectors: &[V]) -> Result<Vec<f64>> {
    let first = vectors.first().ok_or(NumericsError::EmptyInput)?.as_ref();
    let mut acc = vec![0.0; first.len()];
    for v in vectors {
        let v = v.as_ref();
        check_dims(first, v)?;
        for (a, b) in acc.iter_mut().zip(v) {
            *a += b;
        }
    }
    let inv = 1.0 / vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Derives a child seed from `seed` and a label, so that each pipeline stage
/// gets an independent stream from one user-facing seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Seeded ChaCha8 stream with an explicit, restorable position.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable snapshot of an [`Rng`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Word position in the ChaCha keystream, as a decimal string since JSON
    /// numbers cannot hold a `u128`.
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for a named sub-task.
    pub fn derive(seed: u64, label: &str) -> Self {
        Self::new(derive_seed(seed, label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Self::new(state.seed);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Random unit vector of dimension `dim`.
    pub fn unit_vector(&mut self, dim: usize) -> Embedding {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.normal()).collect();
            if let Ok(u) = l2_normalize(&v) {
                return Embedding(u);
            }
        }
    }
}
