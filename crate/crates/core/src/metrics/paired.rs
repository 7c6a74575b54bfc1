//! Pixel-space paired metrics.

use std::fmt;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tile::ImageTile;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_same_size(a: &ImageTile, b: &ImageTile) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::Shape(format!("image sizes differ: {:?} vs {:?}", a.size(), b.size())));
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - r;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable "valid" filtering with the SSIM window.
fn filter_valid(x: ArrayView2<f64>, taps: &[f64]) -> Array2<f64> {
    let k = taps.len();
    let (h, w) = x.dim();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            rows[[i, j]] = (0..k).map(|t| taps[t] * x[[i, j + t]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            out[[i, j]] = (0..k).map(|t| taps[t] * rows[[i + t, j]]).sum();
        }
    }
    out
}

/// Windowed SSIM (11x11 Gaussian, sigma 1.5, dynamic range 1) averaged
/// over all fully contained windows and the three channels.
pub fn ssim(a: &ImageTile, b: &ImageTile) -> Result<f64> {
    check_same_size(a, b)?;
    let (h, w) = a.size();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let taps = ssim_taps();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mut total = 0.0;
    for c in 0..3 {
        let x = a.pixels().index_axis(ndarray::Axis(2), c).to_owned();
        let y = b.pixels().index_axis(ndarray::Axis(2), c).to_owned();
        let mx = filter_valid(x.view(), &taps);
        let my = filter_valid(y.view(), &taps);
        let sxx = filter_valid((&x * &x).view(), &taps);
        let syy = filter_valid((&y * &y).view(), &taps);
        let sxy = filter_valid((&x * &y).view(), &taps);
        let n = mx.len() as f64;
        let sum: f64 = ndarray::Zip::from(&mx)
            .and(&my)
            .and(&sxx)
            .and(&syy)
            .and(&sxy)
            .fold(0.0, |acc, &mx, &my, &sxx, &syy, &sxy| {
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                acc + ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
            });
        total += sum / n;
    }
    Ok(total / 3.0)
}

/// PSNR in dB; identical images give [`Psnr::Infinite`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn from_mse(mse: f64) -> Self {
        if mse == 0.0 {
            Psnr::Infinite
        } else {
            Psnr::Finite(10.0 * (1.0 / mse).log10())
        }
    }

    /// `f64::INFINITY` for the infinite sentinel.
    pub fn value(&self) -> f64 {
        match *self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Psnr::Infinite)
    }

    /// Mean over pairs; any infinite member makes the mean infinite.
    pub fn mean(values: &[Psnr]) -> Option<Psnr> {
        if values.is_empty() {
            return None;
        }
        let mut sum = 0.0;
        for v in values {
            match v {
                Psnr::Infinite => return Some(Psnr::Infinite),
                Psnr::Finite(x) => sum += x,
            }
        }
        Some(Psnr::Finite(sum / values.len() as f64))
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v}"),
            Psnr::Infinite => write!(f, "inf"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(v) => s.serialize_f64(*v),
            Psnr::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Finite(v)),
            Raw::Str(s) if s == "inf" => Ok(Psnr::Infinite),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("invalid PSNR `{s}`"))),
        }
    }
}

pub fn mse(a: &ImageTile, b: &ImageTile) -> Result<f64> {
    check_same_size(a, b)?;
    let d = a.pixels() - b.pixels();
    Ok(d.mapv(|v| v * v).mean().unwrap_or(0.0))
}

/// `10 log10(1 / MSE)` with peak value 1.
pub fn psnr(a: &ImageTile, b: &ImageTile) -> Result<Psnr> {
    Ok(Psnr::from_mse(mse(a, b)?))
}

/// Mean absolute pixel difference.
pub fn l1_distance(a: &ImageTile, b: &ImageTile) -> Result<f64> {
    check_same_size(a, b)?;
    let d = a.pixels() - b.pixels();
    Ok(d.mapv(f64::abs).mean().unwrap_or(0.0))
}
