//! Toy two-tower encoders: hashed character trigrams for text, dense feature
//! vectors for images, each mapped to a unit-norm embedding by a linear
//! projection (optionally preceded by one `tanh` layer).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, Embedding, NumericsError, Rng};

pub const DEFAULT_BUCKETS: usize = 1024;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncoderError {
    #[error("caption is empty after normalization")]
    EmptyCaption,
    #[error("expected {expected} input features, got {got}")]
    InputDim { expected: usize, got: usize },
    #[error("invalid encoder dimensions: {0}")]
    InvalidDims(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// Sparse trigram counts keyed by bucket index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextFeatures {
    buckets: usize,
    counts: BTreeMap<usize, u32>,
}

impl TextFeatures {
    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn counts(&self) -> &BTreeMap<usize, u32> {
        &self.counts
    }

    fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.counts.iter().map(|(&k, &c)| (k, c as f64))
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercases and collapses runs of whitespace to single spaces.
pub fn normalize_text(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Counts the character trigrams of the normalized caption, each hashed with
/// FNV-1a over its UTF-8 bytes into `buckets` bins. A caption shorter than
/// three characters contributes itself as its only gram.
pub fn featurize_text(caption: &str, buckets: usize) -> Result<TextFeatures> {
    if buckets == 0 {
        return Err(EncoderError::InvalidDims("bucket count must be positive".into()));
    }
    let norm = normalize_text(caption);
    if norm.is_empty() {
        return Err(EncoderError::EmptyCaption);
    }
    let chars: Vec<char> = norm.chars().collect();
    let mut counts = BTreeMap::new();
    let mut add = |gram: &[char]| {
        let s: String = gram.iter().collect();
        let idx = (fnv1a64(s.as_bytes()) % buckets as u64) as usize;
        *counts.entry(idx).or_insert(0) += 1;
    };
    if chars.len() < 3 {
        add(&chars);
    } else {
        chars.windows(3).for_each(&mut add);
    }
    Ok(TextFeatures { buckets, counts })
}

/// Row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (rows as f64).sqrt();
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.normal() * scale).collect(),
        }
    }

    /// `Mᵀx + b` for an `x` given as `(row, value)` entries.
    fn apply(&self, x: impl Iterator<Item = (usize, f64)>, bias: &[f64]) -> Vec<f64> {
        let mut out = bias.to_vec();
        for (r, v) in x {
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += v * w;
            }
        }
        out
    }
}

/// Hidden `tanh` layer of a tower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hidden {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Shapes of both towers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    /// Text hash buckets `B`.
    pub buckets: usize,
    /// Image feature dimension `D`.
    pub image_dim: usize,
    /// Embedding dimension `L`.
    pub embed_dim: usize,
    /// Width of the optional hidden layer.
    #[serde(default)]
    pub hidden: Option<usize>,
}

impl EncoderDims {
    pub fn linear(buckets: usize, image_dim: usize, embed_dim: usize) -> Self {
        Self {
            buckets,
            image_dim,
            embed_dim,
            hidden: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.buckets == 0 || self.image_dim == 0 || self.embed_dim == 0 || self.hidden == Some(0) {
            return Err(EncoderError::InvalidDims(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Trainable parameters of both towers. With a hidden layer the projections
/// map the hidden width to `L` instead of the raw input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    #[serde(rename = "B")]
    pub buckets: usize,
    #[serde(rename = "D")]
    pub image_dim: usize,
    #[serde(rename = "L")]
    pub embed_dim: usize,
    pub text_projection: Matrix,
    pub image_projection: Matrix,
    pub text_bias: Vec<f64>,
    pub image_bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_hidden: Option<Hidden>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_hidden: Option<Hidden>,
}

/// Which tower to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tower {
    Text,
    Image,
}

/// Normal entries scaled by `1/√fan_in`, zero biases. Draw order: text
/// hidden, text projection, image hidden, image projection.
pub fn init_params(dims: EncoderDims, rng: &mut Rng) -> Result<EncoderParams> {
    dims.validate()?;
    let mut tower = |inputs: usize| -> (Option<Hidden>, Matrix) {
        let hidden = dims.hidden.map(|h| Hidden {
            weight: Matrix::random(inputs, h, rng),
            bias: vec![0.0; h],
        });
        let fan_in = dims.hidden.unwrap_or(inputs);
        (hidden, Matrix::random(fan_in, dims.embed_dim, rng))
    };
    let (text_hidden, text_projection) = tower(dims.buckets);
    let (image_hidden, image_projection) = tower(dims.image_dim);
    Ok(EncoderParams {
        buckets: dims.buckets,
        image_dim: dims.image_dim,
        embed_dim: dims.embed_dim,
        text_projection,
        image_projection,
        text_bias: vec![0.0; dims.embed_dim],
        image_bias: vec![0.0; dims.embed_dim],
        text_hidden,
        image_hidden,
    })
}

/// Intermediate values kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    hidden: Option<Vec<f64>>,
    pre_norm: f64,
    embedding: Embedding,
}

impl ForwardCache {
    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }
}

/// Input to a tower as sparse `(index, value)` entries.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Text(&'a TextFeatures),
    Image(&'a [f64]),
}

impl Input<'_> {
    fn tower(&self) -> Tower {
        match self {
            Input::Text(_) => Tower::Text,
            Input::Image(_) => Tower::Image,
        }
    }

    fn entries(&self) -> Box<dyn Iterator<Item = (usize, f64)> + '_> {
        match self {
            Input::Text(f) => Box::new(f.entries()),
            Input::Image(x) => Box::new(x.iter().copied().enumerate()),
        }
    }
}

impl EncoderParams {
    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            buckets: self.buckets,
            image_dim: self.image_dim,
            embed_dim: self.embed_dim,
            hidden: self.text_hidden.as_ref().map(|h| h.bias.len()),
        }
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|v| *v = 0.0);
        z
    }

    /// Visits every scalar parameter in a fixed order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        let mut visit = |v: &mut [f64]| v.iter_mut().for_each(&mut f);
        if let Some(h) = &mut self.text_hidden {
            visit(&mut h.weight.data);
            visit(&mut h.bias);
        }
        visit(&mut self.text_projection.data);
        visit(&mut self.text_bias);
        if let Some(h) = &mut self.image_hidden {
            visit(&mut h.weight.data);
            visit(&mut h.bias);
        }
        visit(&mut self.image_projection.data);
        visit(&mut self.image_bias);
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.clone().for_each_mut(|v| out.push(*v));
        out
    }

    /// Inverse of [`EncoderParams::to_flat`]; `values` must have the same length.
    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        self.for_each_mut(|v| *v = *it.next().expect("flat parameter length"));
        assert!(it.next().is_none(), "flat parameter length");
    }

    /// `self += a · other`.
    pub fn axpy(&mut self, a: f64, other: &EncoderParams) {
        let other = other.to_flat();
        let mut it = other.iter();
        self.for_each_mut(|v| *v += a * it.next().expect("matching shapes"));
    }

    pub fn norm(&self) -> f64 {
        numerics::norm(&self.to_flat())
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    fn parts(&self, tower: Tower) -> (Option<&Hidden>, &Matrix, &[f64], usize) {
        match tower {
            Tower::Text => (self.text_hidden.as_ref(), &self.text_projection, &self.text_bias, self.buckets),
            Tower::Image => (self.image_hidden.as_ref(), &self.image_projection, &self.image_bias, self.image_dim),
        }
    }

    fn parts_mut(&mut self, tower: Tower) -> (Option<&mut Hidden>, &mut Matrix, &mut Vec<f64>) {
        match tower {
            Tower::Text => (self.text_hidden.as_mut(), &mut self.text_projection, &mut self.text_bias),
            Tower::Image => (self.image_hidden.as_mut(), &mut self.image_projection, &mut self.image_bias),
        }
    }

    pub fn forward(&self, input: Input<'_>) -> Result<ForwardCache> {
        let (hidden, proj, bias, inputs) = self.parts(input.tower());
        let got = match input {
            Input::Text(f) => f.buckets(),
            Input::Image(x) => x.len(),
        };
        if got != inputs {
            return Err(EncoderError::InputDim { expected: inputs, got });
        }
        let (u, h) = match hidden {
            None => (proj.apply(input.entries(), bias), None),
            Some(layer) => {
                let h: Vec<f64> = layer.weight.apply(input.entries(), &layer.bias).into_iter().map(f64::tanh).collect();
                (proj.apply(h.iter().copied().enumerate(), bias), Some(h))
            }
        };
        let pre_norm = numerics::norm(&u);
        let embedding = Embedding::new(numerics::l2_normalize(&u)?)?;
        Ok(ForwardCache {
            hidden: h,
            pre_norm,
            embedding,
        })
    }

    /// Accumulates `∂loss/∂params` into `grads` given `∂loss/∂embedding`.
    pub fn backward(&self, input: Input<'_>, cache: &ForwardCache, d_embedding: &[f64], grads: &mut EncoderParams) {
        let e = cache.embedding.as_slice();
        // e = u/|u|  ⇒  ∂/∂u = (de − e⟨e, de⟩)/|u|.
        let proj_e = numerics::dot(e, d_embedding);
        let du: Vec<f64> = e
            .iter()
            .zip(d_embedding)
            .map(|(ek, dk)| (dk - ek * proj_e) / cache.pre_norm)
            .collect();
        let (hidden, proj, _, _) = self.parts(input.tower());
        let dz: Option<Vec<f64>> = match (hidden, &cache.hidden) {
            (Some(_), Some(h)) => Some(
                (0..h.len())
                    .map(|j| numerics::dot(proj.row(j), &du) * (1.0 - h[j] * h[j]))
                    .collect(),
            ),
            _ => None,
        };
        let (g_hidden, g_proj, g_bias) = grads.parts_mut(input.tower());
        for (b, d) in g_bias.iter_mut().zip(&du) {
            *b += d;
        }
        match (&cache.hidden, dz, g_hidden) {
            (Some(h), Some(dz), Some(gh)) => {
                for (j, hj) in h.iter().enumerate() {
                    add_scaled(g_proj.row_mut(j), *hj, &du);
                }
                for (b, d) in gh.bias.iter_mut().zip(&dz) {
                    *b += d;
                }
                for (r, v) in input.entries() {
                    add_scaled(gh.weight.row_mut(r), v, &dz);
                }
            }
            _ => {
                for (r, v) in input.entries() {
                    add_scaled(g_proj.row_mut(r), v, &du);
                }
            }
        }
    }
}

fn add_scaled(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn encode_text(f: &TextFeatures, p: &EncoderParams) -> Result<Embedding> {
    Ok(p.forward(Input::Text(f))?.embedding)
}

pub fn encode_image(f: &[f64], p: &EncoderParams) -> Result<Embedding> {
    Ok(p.forward(Input::Image(f))?.embedding)
}
