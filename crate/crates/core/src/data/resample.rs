//! Size normalization through a pluggable super-resolution backend.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::tile::ImageTile;

/// Upscaling backend used to bring every branch to the unified tile size.
///
/// An external model (for example a pretrained blind super-resolution
/// network) plugs in here; its output is clamped to `[0, 1]` and used as is.
pub trait SuperResolver: Send + Sync {
    fn name(&self) -> &str;

    /// Resamples `tile` to `target x target` pixels, returning `(H, W, 3)` values.
    fn resize(&self, tile: &ImageTile, target: usize) -> std::result::Result<Array3<f64>, String>;
}

/// Deterministic fallback: separable Keys bicubic (`a = -0.5`) with
/// half-pixel centers and replicated borders.
#[derive(Debug, Clone, Copy, Default)]
pub struct BicubicResolver;

impl SuperResolver for BicubicResolver {
    fn name(&self) -> &str {
        "bicubic"
    }

    fn resize(&self, tile: &ImageTile, target: usize) -> std::result::Result<Array3<f64>, String> {
        Ok(bicubic_resize(tile.pixels(), target, target))
    }
}

pub(crate) fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// For each output index: the four source indices (clamped) and their weights.
fn axis_taps(input: usize, output: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut idx = [0usize; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let off = k as i64 - 1;
                let i = (base as i64 + off).clamp(0, input as i64 - 1);
                idx[k] = i as usize;
                w[k] = cubic_weight(frac - off as f64);
            }
            (idx, w)
        })
        .collect()
}

/// Separable bicubic resampling of an `(H, W, C)` array (unclamped).
pub fn bicubic_resize(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);
    // horizontal pass
    let mut tmp = Array3::<f64>::zeros((h, out_w, c));
    for r in 0..h {
        for (oc, (idx, wt)) in cols.iter().enumerate() {
            for ch in 0..c {
                tmp[[r, oc, ch]] = (0..4).map(|k| wt[k] * src[[r, idx[k], ch]]).sum();
            }
        }
    }
    let mut out = Array3::<f64>::zeros((out_h, out_w, c));
    for (or, (idx, wt)) in rows.iter().enumerate() {
        for oc in 0..out_w {
            for ch in 0..c {
                out[[or, oc, ch]] = (0..4).map(|k| wt[k] * tmp[[idx[k], oc, ch]]).sum();
            }
        }
    }
    out
}

/// Resamples a tile to `target x target` through `sr`, clamping to `[0, 1]`.
pub fn size_normalize(tile: &ImageTile, target: usize, sr: &dyn SuperResolver) -> Result<ImageTile> {
    if target == 0 || target % 4 != 0 {
        return Err(Error::Config(format!("target size {target} must be a positive multiple of 4")));
    }
    if tile.size() == (target, target) {
        return Ok(tile.clone());
    }
    let out = sr.resize(tile, target).map_err(|reason| Error::Resolver {
        resolver: sr.name().to_string(),
        reason,
    })?;
    if out.dim() != (target, target, 3) {
        return Err(Error::Resolver {
            resolver: sr.name().to_string(),
            reason: format!("returned shape {:?}, expected ({target}, {target}, 3)", out.dim()),
        });
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Resolver {
            resolver: sr.name().to_string(),
            reason: "non-finite output".into(),
        });
    }
    ImageTile::new_clamped(out, tile.domain(), tile.source_id())
}
