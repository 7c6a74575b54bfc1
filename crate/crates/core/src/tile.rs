//! RGB tiles, the unit of all image I/O.

use std::fmt;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stain domain of a tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StainDomain {
    /// Hematoxylin and eosin, the source domain.
    He,
    /// Immunohistochemistry, the target domain.
    Ihc,
}

impl fmt::Display for StainDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StainDomain::He => f.write_str("HE"),
            StainDomain::Ihc => f.write_str("IHC"),
        }
    }
}

/// One RGB tile with values in `[0, 1]`, stored as `(height, width, 3)`.
///
/// Every constructor checks that values are finite and inside `[0, 1]`.
/// The stricter geometry contract (both sides at least 8 and divisible by
/// 4) is checked by [`ImageTile::check_geometry`]; it holds for every tile
/// read from disk and every emitted training sample, while intermediate
/// products such as a downsampled 8x8 tile may be smaller.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTile {
    pixels: Array3<f64>,
    domain: StainDomain,
    source_id: String,
}

impl ImageTile {
    pub fn new(pixels: Array3<f64>, domain: StainDomain, source_id: impl Into<String>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(Error::InvalidTile(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidTile("empty tile".into()));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidTile(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            pixels,
            domain,
            source_id: source_id.into(),
        })
    }

    /// Builds a tile from a per-pixel function `(row, col, channel) -> value`.
    pub fn from_fn<F>(height: usize, width: usize, domain: StainDomain, source_id: &str, f: F) -> Result<Self>
    where
        F: FnMut((usize, usize, usize)) -> f64,
    {
        Self::new(Array3::from_shape_fn((height, width, 3), f), domain, source_id)
    }

    pub fn constant(height: usize, width: usize, value: f64, domain: StainDomain, source_id: &str) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, 3), value), domain, source_id)
    }

    /// Clamps into `[0, 1]` before validation; non-finite values are still rejected.
    pub fn new_clamped(mut pixels: Array3<f64>, domain: StainDomain, source_id: impl Into<String>) -> Result<Self> {
        pixels.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { v });
        Self::new(pixels, domain, source_id)
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    pub fn domain(&self) -> StainDomain {
        self.domain
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn with_domain(mut self, domain: StainDomain) -> Self {
        self.domain = domain;
        self
    }

    /// Geometry contract for tiles entering or leaving the pipeline.
    pub fn check_geometry(&self) -> Result<()> {
        let (h, w) = self.size();
        if h < 8 || w < 8 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidTile(format!(
                "tile `{}` is {h}x{w}; sides must be >= 8 and divisible by 4",
                self.source_id
            )));
        }
        Ok(())
    }

    /// Sub-window copy starting at `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        let (h, w) = self.size();
        if height == 0 || width == 0 || row + height > h || col + width > w {
            return Err(Error::Shape(format!(
                "crop window {height}x{width} at ({row}, {col}) exceeds {h}x{w} tile"
            )));
        }
        let pixels = self
            .pixels
            .slice(s![row..row + height, col..col + width, ..])
            .to_owned();
        Ok(Self {
            pixels,
            domain: self.domain,
            source_id: self.source_id.clone(),
        })
    }

    /// Reads an 8-bit RGB PNG, mapping values to `[0, 1]` by division by 255.
    pub fn load_png(path: &Path, domain: StainDomain) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::UnreadableImage {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let raw = img.into_raw();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, k)| {
            raw[(r * w as usize + c) * 3 + k] as f64 / 255.0
        });
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let tile = Self::new(pixels, domain, id)?;
        tile.check_geometry()?;
        Ok(tile)
    }

    /// Quantized 8-bit RGB bytes (row-major, interleaved).
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let (h, w) = self.size();
        image::save_buffer(path, &self.to_rgb8(), w as u32, h as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::UnreadableImage {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }

    /// `(1, 3, H, W)` tensor in the requested dtype.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = self.size();
        let chw = self.pixels.view().permuted_axes([2, 0, 1]);
        let data: Vec<f64> = chw.iter().copied().collect();
        Ok(Tensor::from_vec(data, (1, 3, h, w), device)?.to_dtype(dtype)?)
    }

    /// Inverse of [`ImageTile::to_tensor`]; accepts `(3, H, W)` or `(1, 3, H, W)`.
    /// Values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor, domain: StainDomain, source_id: impl Into<String>) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::Shape(format!("expected rank 3 or 4 image tensor, got {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let chw = Array3::from_shape_vec((3, h, w), data).map_err(|e| Error::Shape(e.to_string()))?;
        let hwc = chw.permuted_axes([1, 2, 0]).as_standard_layout().to_owned();
        Self::new_clamped(hwc, domain, source_id)
    }
}
