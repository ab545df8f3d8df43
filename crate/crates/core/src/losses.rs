//! Training objectives and the image-embedding interface.
//!
//! Color and geometric losses are means over the valid rays of a batch, so
//! their weights do not depend on the batch size. The semantic term is the
//! negated cosine similarity between unit embeddings; minimizing it pulls the
//! two embeddings together.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panorama::Image;

/// Floor on the rendered depth variance in the geometric loss (m²).
pub const DEPTH_VAR_FLOOR: f64 = 1e-6;
pub const DEFAULT_EMBED_DIM: usize = 64;
const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_geo: f64,
    pub lambda_sc: f64,
    /// The semantic term is applied on iterations divisible by `k_sc`.
    pub k_sc: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_geo: 0.1,
            lambda_sc: 0.1,
            k_sc: 10,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_geo >= 0.0 && self.lambda_sc >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.k_sc == 0 {
            return Err(Error::Config("k_sc must be >= 1".into()));
        }
        Ok(())
    }

    pub fn is_semantic_iter(&self, iter: u64) -> bool {
        self.lambda_sc > 0.0 && iter % self.k_sc == 0
    }
}

/// A unit-norm image embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if values.is_empty() || !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Domain(format!("embedding norm {n} is not 1")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        if self.0.len() != other.0.len() {
            return Err(Error::Shape(format!(
                "embedding lengths {} and {}",
                self.0.len(),
                other.0.len()
            )));
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }
}

fn valid_count(valid: &[bool]) -> Result<usize> {
    match valid.iter().filter(|&&v| v).count() {
        0 => Err(Error::EmptyInput("no valid rays in batch".into())),
        n => Ok(n),
    }
}

/// Mean over valid rays of `‖C - Ĉ‖²`.
pub fn color_loss(pred: &[[f64; 3]], gt: &[[f64; 3]], valid: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() != valid.len() {
        return Err(Error::Shape("color loss inputs differ in length".into()));
    }
    let n = valid_count(valid)?;
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|((p, g), _)| (0..3).map(|c| (p[c] - g[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / n as f64)
}

/// `d(color_loss)/dĈ` for one valid ray in a batch with `n_valid` valid rays.
pub fn color_loss_grad(pred: &[f64; 3], gt: &[f64; 3], n_valid: usize) -> [f64; 3] {
    let s = 2.0 / n_valid as f64;
    [s * (pred[0] - gt[0]), s * (pred[1] - gt[1]), s * (pred[2] - gt[2])]
}

/// Mean over valid rays of `|D̂ - D| / sqrt(max(D̂_var, 1e-6))`.
pub fn geo_loss(d_hat: &[f64], d_var: &[f64], d_gt: &[f64], valid: &[bool]) -> Result<f64> {
    if d_hat.len() != d_var.len() || d_hat.len() != d_gt.len() || d_hat.len() != valid.len() {
        return Err(Error::Shape("geometric loss inputs differ in length".into()));
    }
    if let Some(v) = d_var.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!("depth variance {v} is negative")));
    }
    let n = valid_count(valid)?;
    let sum: f64 = (0..d_hat.len())
        .filter(|&i| valid[i])
        .map(|i| (d_hat[i] - d_gt[i]).abs() / d_var[i].max(DEPTH_VAR_FLOOR).sqrt())
        .sum();
    Ok(sum / n as f64)
}

/// `(d/dD̂, d/dD̂_var)` of the geometric loss for one valid ray.
pub fn geo_loss_grad(d_hat: f64, d_var: f64, d_gt: f64, n_valid: usize) -> (f64, f64) {
    let inv_n = 1.0 / n_valid as f64;
    let diff = d_hat - d_gt;
    let var = d_var.max(DEPTH_VAR_FLOOR);
    let sd = var.sqrt();
    let d_depth = inv_n * diff.signum() * (diff != 0.0) as u8 as f64 / sd;
    let d_var = if d_var > DEPTH_VAR_FLOOR {
        -0.5 * inv_n * diff.abs() / (var * sd)
    } else {
        0.0
    };
    (d_depth, d_var)
}

/// `-lambda * e1ᵀe2`.
pub fn semantic_loss(e1: &Embedding, e2: &Embedding, lambda: f64) -> Result<f64> {
    Ok(-lambda * e1.dot(e2)?)
}

/// `color + lambda_geo * geo`, plus `semantic` on semantic iterations.
pub fn total_loss(
    color: f64,
    geo: f64,
    semantic: f64,
    weights: &LossWeights,
    iter: u64,
) -> Result<f64> {
    for (name, v) in [("color", color), ("geo", geo), ("semantic", semantic)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                block: format!("{name} loss"),
            });
        }
    }
    let mut total = color + weights.lambda_geo * geo;
    if weights.is_semantic_iter(iter) {
        total += semantic;
    }
    Ok(total)
}

/// A differentiable map from images to unit embeddings.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;

    fn embed(&self, image: &Image) -> Result<Embedding>;

    /// Vector-Jacobian product: `(d embed / d image)ᵀ grad`, one entry per
    /// image value.
    fn embed_vjp(&self, image: &Image, grad: &[f64]) -> Result<Vec<f64>>;
}

/// Seeded random linear projection followed by L2 normalization.
///
/// An all-zero projection maps to the first basis vector.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    width: usize,
    height: usize,
    dim: usize,
    /// `dim × (3 · width · height)`, row-major.
    proj: Vec<f64>,
}

impl ToyEncoder {
    pub fn new(width: usize, height: usize, dim: usize, seed: u64) -> Result<Self> {
        if width == 0 || height == 0 || dim == 0 {
            return Err(Error::Shape("toy encoder dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 * width * height;
        let proj = (0..dim * n)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(Self {
            width,
            height,
            dim,
            proj,
        })
    }

    fn check(&self, image: &Image) -> Result<()> {
        if image.width != self.width || image.height != self.height {
            return Err(Error::Shape(format!(
                "encoder expects {}x{} images, got {}x{}",
                self.width, self.height, image.width, image.height
            )));
        }
        if image.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("image contains non-finite values".into()));
        }
        Ok(())
    }

    fn project(&self, image: &Image) -> Vec<f64> {
        let n = image.data.len();
        (0..self.dim)
            .map(|k| {
                self.proj[k * n..(k + 1) * n]
                    .iter()
                    .zip(&image.data)
                    .map(|(p, x)| p * x)
                    .sum()
            })
            .collect()
    }
}

impl EmbeddingProvider for ToyEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &Image) -> Result<Embedding> {
        self.check(image)?;
        let u = self.project(image);
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            let mut e = vec![0.0; self.dim];
            e[0] = 1.0;
            return Embedding::new(e);
        }
        Embedding::new(u.into_iter().map(|v| v / norm).collect())
    }

    fn embed_vjp(&self, image: &Image, grad: &[f64]) -> Result<Vec<f64>> {
        self.check(image)?;
        if grad.len() != self.dim {
            return Err(Error::Shape(format!(
                "gradient has {} entries, embedding has {}",
                grad.len(),
                self.dim
            )));
        }
        let u = self.project(image);
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n = image.data.len();
        if norm == 0.0 {
            return Ok(vec![0.0; n]);
        }
        // d(u/|u|)ᵀ g = (g - e (eᵀg)) / |u|
        let e: Vec<f64> = u.iter().map(|v| v / norm).collect();
        let eg: f64 = e.iter().zip(grad).map(|(a, b)| a * b).sum();
        let gu: Vec<f64> = grad
            .iter()
            .zip(&e)
            .map(|(g, ek)| (g - ek * eg) / norm)
            .collect();
        let mut out = vec![0.0; n];
        for (k, g) in gu.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(&self.proj[k * n..(k + 1) * n]) {
                *o += g * p;
            }
        }
        Ok(out)
    }
}

/// Embeds `image` with a [`ToyEncoder`] of matching size and default width.
pub fn toy_embed(image: &Image, seed: u64) -> Result<Embedding> {
    ToyEncoder::new(image.width, image.height, DEFAULT_EMBED_DIM, seed)?.embed(image)
}

/// Magic bytes of a precomputed embedding file: `PNEMBED1`, then the length
/// as a little-endian `u32`, then that many little-endian `f32` values.
pub const EMBEDDING_MAGIC: &[u8; 8] = b"PNEMBED1";

pub fn write_embedding(e: &Embedding, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|err| Error::io(path, err))?;
    let mut w = BufWriter::new(file);
    let mut bytes = EMBEDDING_MAGIC.to_vec();
    bytes.extend_from_slice(&(e.0.len() as u32).to_le_bytes());
    for v in &e.0 {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|err| Error::io(path, err))
}

/// Reads a precomputed embedding and renormalizes it after the `f32` round trip.
pub fn read_embedding(path: impl AsRef<Path>) -> Result<Embedding> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .map(BufReader::new)
        .and_then(|mut r| r.read_to_end(&mut bytes))
        .map_err(|err| Error::io(path, err))?;
    if bytes.len() < 12 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(Error::Format(format!("{}: not an embedding file", path.display())));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 4 * n {
        return Err(Error::Format(format!("{}: expected {n} values", path.display())));
    }
    let v: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Format(format!("{}: zero or non-finite embedding", path.display())));
    }
    Embedding::new(v.into_iter().map(|x| x / norm).collect())
}
