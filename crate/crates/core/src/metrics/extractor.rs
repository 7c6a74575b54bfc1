//! Feature extractors backing the perceptual and distribution metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::nn::layers::leaky_relu;
use crate::nn::params::{Init, ParamStore};
use crate::tile::ImageTile;

/// Environment variable naming a safetensors file with extractor weights.
pub const EXTRACTOR_WEIGHTS_ENV: &str = "HE2IHC_EXTRACTOR_WEIGHTS";

/// Per-layer feature maps of one image, each `(C, H, W)`.
pub type LayerFeatures = Vec<Array3<f64>>;

pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;

    fn layer_ids(&self) -> Vec<usize>;

    fn is_pretrained(&self) -> bool;

    /// Deterministic per-layer features, ordered as [`Self::layer_ids`].
    fn embed(&self, image: &ImageTile) -> Result<LayerFeatures>;

    /// Global-average-pooled final-layer embedding.
    fn pooled(&self, image: &ImageTile) -> Result<Vec<f64>> {
        let layers = self.embed(image)?;
        let last = layers.last().ok_or_else(|| Error::Extractor {
            extractor: self.name().to_string(),
            reason: "no layers".into(),
        })?;
        let (c, h, w) = last.dim();
        let n = (h * w) as f64;
        Ok((0..c)
            .map(|k| last.index_axis(ndarray::Axis(0), k).sum() / n)
            .collect())
    }
}

/// Widths of the four stride-2 conv stages.
pub const STAGE_CHANNELS: [usize; 5] = [3, 16, 32, 64, 128];
const SLOPE: f64 = 0.2;

/// Four 3x3 stride-2 conv stages with leaky ReLU. The default instance
/// draws He-normal weights from a fixed seed, so it is reproducible offline;
/// [`ConvExtractor::from_safetensors`] swaps in trained weights.
#[derive(Debug, Clone)]
pub struct ConvExtractor {
    name: String,
    pretrained: bool,
    weights: Vec<(Tensor, Tensor)>,
}

pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5eed_f00d;

impl ConvExtractor {
    pub fn random(seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed, DType::F64, Device::Cpu);
        let mut weights = Vec::with_capacity(4);
        {
            let mut root = store.root();
            let mut fx = root.pp("fx");
            for s in 0..4 {
                let (cin, cout) = (STAGE_CHANNELS[s], STAGE_CHANNELS[s + 1]);
                let mut stage = fx.pp(&format!("s{s}"));
                let std = (2.0 / (9 * cin) as f64).sqrt();
                let w = stage.param("weight", (cout, cin, 3, 3), Init::Normal { std })?;
                let b = stage.param("bias", cout, Init::Const(0.0))?;
                weights.push((w.as_tensor().detach(), b.as_tensor().detach()));
            }
        }
        Ok(Self {
            name: format!("random-conv4-seed{seed}"),
            pretrained: false,
            weights,
        })
    }

    /// Loads `fx.s{i}.weight` / `fx.s{i}.bias` for the four stages.
    pub fn from_safetensors(path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Extractor {
            extractor: path.display().to_string(),
            reason,
        };
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let tensors: BTreeMap<String, Tensor> = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)
            .map_err(|e| fail(e.to_string()))?
            .into_iter()
            .collect();
        let mut weights = Vec::with_capacity(4);
        for s in 0..4 {
            let get = |k: &str| -> Result<Tensor> {
                let key = format!("fx.s{s}.{k}");
                let t = tensors.get(&key).ok_or_else(|| fail(format!("missing tensor {key}")))?;
                Ok(t.to_dtype(DType::F64)?)
            };
            let (w, b) = (get("weight")?, get("bias")?);
            let (cout, cin, kh, kw) = w.dims4().map_err(|e| fail(e.to_string()))?;
            if (kh, kw) != (3, 3) || b.dims() != [cout] || (s == 0 && cin != 3) {
                return Err(fail(format!("stage {s} has unexpected shape {:?}", w.dims())));
            }
            if let Some((prev, _)) = weights.last() {
                let prev: &Tensor = prev;
                if prev.dims()[0] != cin {
                    return Err(fail(format!("stage {s} expects {cin} inputs, previous stage gives {}", prev.dims()[0])));
                }
            }
            weights.push((w, b));
        }
        Ok(Self {
            name: format!(
                "conv4:{}",
                path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
            ),
            pretrained: true,
            weights,
        })
    }

    /// Weights as named tensors, in the layout read by [`Self::from_safetensors`].
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (s, (w, b)) in self.weights.iter().enumerate() {
            out.insert(format!("fx.s{s}.weight"), w.clone());
            out.insert(format!("fx.s{s}.bias"), b.clone());
        }
        out
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut y = x.affine(2.0, -1.0)?;
        let mut out = Vec::with_capacity(self.weights.len());
        for (w, b) in &self.weights {
            y = y.conv2d(w, 1, 2, 1, 1)?.broadcast_add(&b.reshape((1, (), 1, 1))?)?;
            y = leaky_relu(&y, SLOPE)?;
            out.push(y.clone());
        }
        Ok(out)
    }
}

impl FeatureExtractor for ConvExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn layer_ids(&self) -> Vec<usize> {
        (1..=self.weights.len()).collect()
    }

    fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    fn embed(&self, image: &ImageTile) -> Result<LayerFeatures> {
        let x = image.to_tensor(DType::F64, &Device::Cpu)?;
        self.features(&x)?
            .into_iter()
            .map(|t| {
                let t = t.squeeze(0)?;
                let (c, h, w) = t.dims3()?;
                let data: Vec<f64> = t.flatten_all()?.to_vec1()?;
                Array3::from_shape_vec((c, h, w), data).map_err(|e| Error::Shape(e.to_string()))
            })
            .collect()
    }
}

/// The extractor named by [`EXTRACTOR_WEIGHTS_ENV`], or the seeded default.
pub fn default_extractor() -> Result<ConvExtractor> {
    match std::env::var_os(EXTRACTOR_WEIGHTS_ENV) {
        Some(p) if !p.is_empty() => ConvExtractor::from_safetensors(&PathBuf::from(p)),
        _ => ConvExtractor::random(DEFAULT_EXTRACTOR_SEED),
    }
}
