//! Patch embeddings for the contrastive losses.

use candle_core::{Tensor, D};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::nn::layers::{l2_normalize_rows, Linear};
use crate::nn::params::ParamBuilder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    /// Instrumented encoder layers sampled for patches (ids as in
    /// [`Generator::encode_layers`]).
    pub layers: Vec<usize>,
    pub num_patches: usize,
    pub head_dim: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            layers: vec![0, 1, 2, 3],
            num_patches: 256,
            head_dim: 256,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.iter().any(|l| *l > 3) {
            return Err(Error::Config(format!("embedding layers {:?} must be a non-empty subset of 0..=3", self.layers)));
        }
        if self.num_patches == 0 || self.head_dim == 0 {
            return Err(Error::Config("num_patches and head_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Two-layer projection MLP applied to sampled feature vectors.
#[derive(Debug, Clone)]
pub struct PatchHead {
    fc1: Linear,
    fc2: Linear,
}

impl PatchHead {
    pub fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut pb.pp("fc1"), in_dim, out_dim)?,
            fc2: Linear::new(&mut pb.pp("fc2"), out_dim, out_dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }
}

/// Embeddings of one layer: `vectors` is `(N, n, d)` with unit rows, one
/// row per entry of `locations` (flat `row * W + col` indices).
#[derive(Debug, Clone)]
pub struct LayerPatches {
    pub layer: usize,
    pub grid: (usize, usize),
    pub locations: Vec<usize>,
    pub vectors: Tensor,
}

#[derive(Debug, Clone)]
pub struct PatchEmbeddingSet {
    pub layers: Vec<LayerPatches>,
}

impl PatchEmbeddingSet {
    /// The sampled locations, reusable for a paired extraction.
    pub fn locations(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.locations.clone()).collect()
    }

    pub fn detach(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerPatches {
                    vectors: l.vectors.detach(),
                    ..l.clone()
                })
                .collect(),
        }
    }

    /// Checks that `other` covers the same layers and locations.
    pub fn check_aligned(&self, other: &PatchEmbeddingSet) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape(format!(
                "embedding sets cover {} vs {} layers",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.layer != b.layer || a.locations != b.locations {
                return Err(Error::Shape(format!("embedding locations differ at layer {}", a.layer)));
            }
            if a.vectors.dims() != b.vectors.dims() {
                return Err(Error::Shape(format!(
                    "embedding shapes differ at layer {}: {:?} vs {:?}",
                    a.layer,
                    a.vectors.dims(),
                    b.vectors.dims()
                )));
            }
        }
        Ok(())
    }
}

/// Distinct seeded locations on an `h x w` grid (all of them when
/// `count >= h * w`), in sampling order.
pub fn sample_locations(h: usize, w: usize, count: usize, seed: u64) -> Vec<usize> {
    let total = h * w;
    if count >= total {
        return (0..total).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample(&mut rng, total, count).into_vec()
}

impl Generator {
    /// Projected, L2-normalized feature vectors at sampled locations.
    ///
    /// With `locations = None` the locations are drawn per layer from
    /// `rng_seed`; pass the result's [`PatchEmbeddingSet::locations`] to a
    /// second call to embed the same positions of another image.
    pub fn extract_patch_embeddings(
        &self,
        image: &Tensor,
        layers: &[usize],
        locations: Option<&[Vec<usize>]>,
        num_patches: usize,
        rng_seed: u64,
    ) -> Result<PatchEmbeddingSet> {
        if let Some(locs) = locations {
            if locs.len() != layers.len() {
                return Err(Error::Shape(format!(
                    "{} location lists for {} layers",
                    locs.len(),
                    layers.len()
                )));
            }
        }
        let feats = self.encode_layers(image, layers)?;
        let mut out = Vec::with_capacity(layers.len());
        for (i, (layer, feat)) in layers.iter().zip(feats).enumerate() {
            let (n, c, h, w) = feat.dims4()?;
            let locs = match locations {
                Some(l) => l[i].clone(),
                None => sample_locations(h, w, num_patches, rng_seed.wrapping_add(i as u64)),
            };
            if let Some(bad) = locs.iter().find(|p| **p >= h * w) {
                return Err(Error::Shape(format!(
                    "location {bad} outside the {h}x{w} grid of layer {layer}"
                )));
            }
            let idx = Tensor::from_vec(locs.iter().map(|p| *p as u32).collect::<Vec<_>>(), locs.len(), feat.device())?;
            let picked = feat.reshape((n, c, h * w))?.index_select(&idx, 2)?; // (n, c, k)
            let rows = picked.transpose(1, 2)?.contiguous()?.reshape((n * locs.len(), c))?;
            let projected = self.heads()[*layer].forward(&rows)?;
            let d = projected.dim(D::Minus1)?;
            let vectors = l2_normalize_rows(&projected)?.reshape((n, locs.len(), d))?;
            out.push(LayerPatches {
                layer: *layer,
                grid: (h, w),
                locations: locs,
                vectors,
            });
        }
        Ok(PatchEmbeddingSet { layers: out })
    }
}
