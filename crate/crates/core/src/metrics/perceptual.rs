//! Feature-space paired metrics: an LPIPS-style distance and per-layer
//! perceptual hash distances.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::extractor::FeatureExtractor;
use crate::tile::ImageTile;

/// Side of the pooled grid each channel is hashed on.
pub const HASH_GRID: usize = 8;
const UNIT_EPS: f64 = 1e-10;
/// Relative margin a pooled value must clear to set its bit. Without it a
/// constant channel (e.g. a map smaller than the grid) hashes to whatever
/// side of its own mean the rounding lands on.
pub const HASH_TIE_EPS: f64 = 1e-9;

/// Scales each spatial feature vector to unit length across channels.
pub fn unit_normalize(f: &Array3<f64>) -> Array3<f64> {
    let norm = f.mapv(|v| v * v).sum_axis(Axis(0)).mapv(|s| s.sqrt() + UNIT_EPS);
    f / &norm.insert_axis(Axis(0))
}

/// Squared channel distance of unit-normalized maps, averaged over space.
pub fn layer_distance(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let d = unit_normalize(a) - unit_normalize(b);
    let per_pos = d.mapv(|v| v * v).sum_axis(Axis(0));
    Ok(per_pos.mean().unwrap_or(0.0))
}

fn embed_pair(a: &ImageTile, b: &ImageTile, fx: &dyn FeatureExtractor) -> Result<(Vec<Array3<f64>>, Vec<Array3<f64>>)> {
    if a.size() != b.size() {
        return Err(Error::Shape(format!("image sizes differ: {:?} vs {:?}", a.size(), b.size())));
    }
    Ok((fx.embed(a)?, fx.embed(b)?))
}

/// Mean over extractor layers of [`layer_distance`].
pub fn perceptual_distance(a: &ImageTile, b: &ImageTile, fx: &dyn FeatureExtractor) -> Result<f64> {
    let (fa, fb) = embed_pair(a, b, fx)?;
    if fa.is_empty() {
        return Err(Error::Extractor {
            extractor: fx.name().to_string(),
            reason: "no layers".into(),
        });
    }
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        total += layer_distance(x, y)?;
    }
    Ok(total / fa.len() as f64)
}

fn bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Adaptive average pooling of a `(C, H, W)` map to `(C, g, g)`; bins
/// follow `[floor(i H / g), ceil((i + 1) H / g))`, so maps smaller than
/// the grid are replicated.
pub fn adaptive_avg_pool(f: &Array3<f64>, grid: usize) -> Array3<f64> {
    let (c, h, w) = f.dim();
    Array3::from_shape_fn((c, grid, grid), |(k, i, j)| {
        let (r0, r1) = bin(i, h, grid);
        let (c0, c1) = bin(j, w, grid);
        let mut s = 0.0;
        for r in r0..r1 {
            for q in c0..c1 {
                s += f[[k, r, q]];
            }
        }
        s / ((r1 - r0) * (c1 - c0)) as f64
    })
}

/// Binary code of a layer: pooled value above its channel's pooled mean
/// by more than [`HASH_TIE_EPS`].
pub fn hash_code(f: &Array3<f64>) -> Array3<bool> {
    let pooled = adaptive_avg_pool(f, HASH_GRID);
    let (c, _, _) = pooled.dim();
    let means: Array2<f64> = pooled.mean_axis(Axis(2)).unwrap().mean_axis(Axis(1)).unwrap().into_shape_with_order((c, 1)).unwrap();
    Array3::from_shape_fn(pooled.dim(), |(k, i, j)| {
        let m = means[[k, 0]];
        pooled[[k, i, j]] - m > HASH_TIE_EPS * m.abs().max(1.0)
    })
}

/// Fraction of differing bits.
pub fn hamming_fraction(a: &Array3<bool>, b: &Array3<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("hash shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let differing = a.iter().zip(b.iter()).filter(|(x, y)| x != y).count();
    Ok(differing as f64 / a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhvScores {
    pub layers: [f64; 4],
    pub avg: f64,
}

impl PhvScores {
    pub fn from_layers(layers: [f64; 4]) -> Self {
        Self {
            layers,
            avg: layers.iter().sum::<f64>() / 4.0,
        }
    }

    /// Element-wise mean of several scores.
    pub fn mean(scores: &[PhvScores]) -> Option<Self> {
        if scores.is_empty() {
            return None;
        }
        let mut layers = [0.0; 4];
        for s in scores {
            for (acc, v) in layers.iter_mut().zip(s.layers) {
                *acc += v;
            }
        }
        layers.iter_mut().for_each(|v| *v /= scores.len() as f64);
        Some(Self::from_layers(layers))
    }
}

/// Perceptual hash distance on the first four extractor layers.
pub fn phv(a: &ImageTile, b: &ImageTile, fx: &dyn FeatureExtractor) -> Result<PhvScores> {
    let (fa, fb) = embed_pair(a, b, fx)?;
    if fa.len() < 4 {
        return Err(Error::Extractor {
            extractor: fx.name().to_string(),
            reason: format!("PHV needs 4 layers, extractor has {}", fa.len()),
        });
    }
    let mut layers = [0.0; 4];
    for (k, out) in layers.iter_mut().enumerate() {
        *out = hamming_fraction(&hash_code(&fa[k]), &hash_code(&fb[k]))?;
    }
    Ok(PhvScores::from_layers(layers))
}
