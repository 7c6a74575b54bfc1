//! Gaussian pyramid L1 loss.
//!
//! Both images are repeatedly blurred with a separable Gaussian and
//! subsampled by two; the mean absolute difference at every level is
//! accumulated with a per-level weight: `L_GP = sum_i lambda_i * S_i`.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tile::ImageTile;

/// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianKernel {
    pub size: usize,
    pub sigma: f64,
}

impl Default for GaussianKernel {
    fn default() -> Self {
        Self { size: 5, sigma: 1.0 }
    }
}

impl GaussianKernel {
    pub fn new(size: usize, sigma: f64) -> Result<Self> {
        let k = Self { size, sigma };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 2 == 0 {
            return Err(Error::Config(format!("gaussian kernel size {} must be odd", self.size)));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("gaussian sigma {} must be positive", self.sigma)));
        }
        Ok(())
    }

    pub fn taps(&self) -> Vec<f64> {
        let r = (self.size / 2) as f64;
        let raw: Vec<f64> = (0..self.size)
            .map(|i| {
                let x = i as f64 - r;
                (-x * x / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }

    /// `(1, 1, k, k)` kernel tensor.
    pub fn kernel_2d(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = self.taps();
        let data: Vec<f64> = t.iter().flat_map(|a| t.iter().map(move |b| a * b)).collect();
        Ok(Tensor::from_vec(data, (1, 1, self.size, self.size), device)?.to_dtype(dtype)?)
    }
}

/// Gaussian blur with replicate borders followed by stride-`stride` subsampling
/// (output keeps rows/cols `0, stride, 2*stride, ...`). Works on `(N, C, H, W)`
/// and is differentiable with respect to `x`.
pub fn blur_subsample(x: &Tensor, kernel: &GaussianKernel, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::Shape(format!("{h}x{w} is not divisible by stride {stride}")));
    }
    let pad = kernel.size / 2;
    let k = kernel.kernel_2d(x.dtype(), x.device())?;
    // channels are folded into the batch so a single-channel kernel blurs each plane
    let planes = x.reshape((n * c, 1, h, w))?;
    let padded = planes.pad_with_same(2, pad, pad)?.pad_with_same(3, pad, pad)?;
    let y = padded.conv2d(&k, 0, stride, 1, 1)?;
    Ok(y.reshape((n, c, h / stride, w / stride))?)
}

/// Pyramid depth, blur kernel and per-level weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PyramidSpec {
    pub levels: usize,
    pub kernel: GaussianKernel,
    pub level_weights: Vec<f64>,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        Self {
            levels: 4,
            kernel: GaussianKernel::default(),
            level_weights: vec![1.0; 4],
        }
    }
}

impl PyramidSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        if self.level_weights.len() != self.levels {
            return Err(Error::Config(format!(
                "pyramid has {} levels but {} weights",
                self.levels,
                self.level_weights.len()
            )));
        }
        if self.level_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("pyramid level weights must be finite and >= 0".into()));
        }
        self.kernel.validate()
    }
}

/// Differentiable pyramid loss on `(N, C, H, W)` tensors; returns a scalar tensor.
pub fn gaussian_pyramid_loss(fake: &Tensor, real: &Tensor, spec: &PyramidSpec) -> Result<Tensor> {
    spec.validate()?;
    if fake.dims() != real.dims() {
        return Err(Error::Shape(format!(
            "pyramid loss size mismatch: {:?} vs {:?}",
            fake.dims(),
            real.dims()
        )));
    }
    let (_, _, h, w) = fake.dims4()?;
    let scale = 1usize << (spec.levels - 1);
    if h % scale != 0 || w % scale != 0 {
        return Err(Error::Shape(format!("{h}x{w} cannot be halved {} times", spec.levels - 1)));
    }
    let mut a = fake.clone();
    let mut b = real.clone();
    let mut total: Option<Tensor> = None;
    for (level, weight) in spec.level_weights.iter().enumerate() {
        if level > 0 {
            a = blur_subsample(&a, &spec.kernel, 2)?;
            b = blur_subsample(&b, &spec.kernel, 2)?;
        }
        let term = (&a - &b)?.abs()?.mean_all()?.affine(*weight, 0.0)?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    Ok(total.expect("at least one level"))
}

/// Tile-level convenience wrapper evaluated in 64-bit.
pub fn gaussian_pyramid_loss_tiles(fake: &ImageTile, real: &ImageTile, spec: &PyramidSpec) -> Result<f64> {
    if fake.size() != real.size() {
        return Err(Error::Shape(format!(
            "pyramid loss size mismatch: {:?} vs {:?}",
            fake.size(),
            real.size()
        )));
    }
    let dev = Device::Cpu;
    let a = fake.to_tensor(DType::F64, &dev)?;
    let b = real.to_tensor(DType::F64, &dev)?;
    Ok(gaussian_pyramid_loss(&a, &b, spec)?.to_scalar::<f64>()?)
}
