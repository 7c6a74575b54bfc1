//! Five-layer patch discriminator: 4x4 convs `3 -> 64 -> 128 -> 256 -> 512 -> 1`
//! with strides `(2, 2, 2, 1, 1)` and padding 1, leaky ReLU (0.2) between
//! layers, batch norm on layers 2-4 and a raw logit map at the end.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::FeatureMap;
use crate::nn::layers::{leaky_relu, BatchNorm, Conv2d, NormMode};
use crate::nn::params::ParamStore;

/// Receptive field of the five-layer stack.
pub const RECEPTIVE_FIELD: usize = 70;
const STRIDES: [usize; 5] = [2, 2, 2, 1, 1];
const KERNEL: usize = 4;
const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    /// Width of the first layer; later layers double up to `8 * base`.
    pub base_channels: usize,
    /// Smallest accepted input side.
    pub min_input: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            min_input: RECEPTIVE_FIELD,
        }
    }
}

impl DiscriminatorConfig {
    pub fn channels(&self) -> [usize; 6] {
        let b = self.base_channels;
        [3, b, 2 * b, 4 * b, 8 * b, 1]
    }
}

/// Output side for an input side under the conv stack.
pub fn score_map_side(input: usize) -> Option<usize> {
    STRIDES.iter().try_fold(input, |s, stride| {
        let padded = s + 2;
        (padded >= KERNEL).then(|| (padded - KERNEL) / stride + 1)
    })
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    store: ParamStore,
    convs: Vec<Conv2d>,
    norms: Vec<Option<BatchNorm>>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if config.base_channels == 0 {
            return Err(Error::Config("discriminator base_channels must be positive".into()));
        }
        let mut store = ParamStore::new(seed, dtype, device.clone());
        let ch = config.channels();
        let mut convs = Vec::with_capacity(5);
        let mut norms = Vec::with_capacity(5);
        {
            let mut root = store.root();
            let mut d = root.pp("disc");
            for i in 0..5 {
                let mut layer = d.pp(&format!("l{i}"));
                convs.push(Conv2d::new(&mut layer.pp("conv"), ch[i], ch[i + 1], KERNEL, STRIDES[i], 1, true)?);
                norms.push(if (1..=3).contains(&i) {
                    Some(BatchNorm::new(&mut layer.pp("norm"), ch[i + 1])?)
                } else {
                    None
                });
            }
        }
        Ok(Self {
            config,
            store,
            convs,
            norms,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_layers(&self) -> usize {
        self.convs.len()
    }

    /// One logit per patch position, `(N, 1, h, w)`.
    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("discriminator expects 3 channels, got {c}")));
        }
        let collapses = score_map_side(h).is_none_or(|s| s == 0) || score_map_side(w).is_none_or(|s| s == 0);
        if h < self.config.min_input || w < self.config.min_input || collapses {
            return Err(Error::Shape(format!(
                "discriminator input {h}x{w} is smaller than {0}x{0}",
                self.config.min_input
            )));
        }
        let mut y = x.clone();
        let last = self.convs.len() - 1;
        for (i, (conv, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            y = conv.forward(&y)?;
            if let Some(n) = norm {
                y = n.forward(&y, mode)?;
            }
            if i < last {
                y = leaky_relu(&y, SLOPE)?;
            }
        }
        Ok(y)
    }

    pub fn score_map(&self, x: &Tensor, mode: NormMode) -> Result<FeatureMap> {
        Ok(FeatureMap {
            data: self.forward(x, mode)?,
            scale: 3,
        })
    }
}
