//! Paired synthetic stain tiles.
//!
//! Each pair shares one latent tissue field with three stain
//! concentrations (nuclear, stromal, membrane). Both domains render it
//! with Beer-Lambert absorption `rgb = exp(-M c)` through their own
//! positive, invertible 3x3 optical-density matrix, so an exact pixel-wise
//! mapping from the H&E-like to the IHC-like tile exists.

use std::path::{Path, PathBuf};

use he2ihc_core::error::{Error, Result};
use he2ihc_core::{ImageTile, StainDomain};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Columns: optical density of the nuclear, stromal and membrane stains
/// in the R, G, B channels.
pub const HE_OD: [[f64; 3]; 3] = [[0.65, 0.07, 0.20], [0.70, 0.99, 0.12], [0.29, 0.11, 0.30]];
pub const IHC_OD: [[f64; 3]; 3] = [[0.45, 0.05, 0.27], [0.49, 0.20, 0.57], [0.20, 0.05, 0.78]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStainSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    /// Held-out pairs written to `testA` / `testB`.
    pub test_count: usize,
}

impl Default for SyntheticStainSpec {
    fn default() -> Self {
        Self {
            count: 8,
            size: 256,
            seed: 0,
            test_count: 0,
        }
    }
}

pub fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Multi-octave value noise in `[0, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: usize, octaves: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let mut amp = 1.0;
    let mut norm = 0.0;
    let mut cell = cell.max(2);
    for _ in 0..octaves {
        let g = size / cell + 2;
        let grid: Vec<f64> = (0..g * g).map(|_| rng.random::<f64>()).collect();
        for r in 0..size {
            let fy = r as f64 / cell as f64;
            let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for c in 0..size {
                let fx = c as f64 / cell as f64;
                let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let at = |y: usize, x: usize| grid[y * g + x];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                out[r * size + c] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        norm += amp;
        amp *= 0.5;
        cell = (cell / 2).max(2);
    }
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Stain concentrations `(H, W, 3)` for one tissue patch.
pub fn latent_tissue(size: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = size as f64 / 256.0;
    let stroma = value_noise(&mut rng, size, (32.0 * scale) as usize, 3);
    let density = value_noise(&mut rng, size, (64.0 * scale) as usize, 2);
    let mut c = Array3::<f64>::zeros((size, size, 3));
    for r in 0..size {
        for q in 0..size {
            c[[r, q, 1]] = 0.2 + 0.9 * stroma[r * size + q];
        }
    }
    let nuclei = (90.0 * scale * scale) as usize + 8;
    for _ in 0..nuclei {
        let cy = rng.random::<f64>() * size as f64;
        let cx = rng.random::<f64>() * size as f64;
        if rng.random::<f64>() > 0.35 + 0.65 * density[(cy as usize).min(size - 1) * size + (cx as usize).min(size - 1)] {
            continue;
        }
        let rad = (3.0 + 4.0 * rng.random::<f64>()) * scale.max(0.25);
        let positive = rng.random::<f64>() < 0.5;
        let reach = (rad * 1.8).ceil() as isize + 1;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (y, x) = (cy as isize + dy, cx as isize + dx);
                if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
                    continue;
                }
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                let (y, x) = (y as usize, x as usize);
                let core = 1.0 / (1.0 + ((d - rad) * 1.5).exp());
                c[[y, x, 0]] = (c[[y, x, 0]] + 1.2 * core).min(1.6);
                c[[y, x, 1]] *= 1.0 - 0.7 * core;
                if positive {
                    let ring = (-((d - rad * 1.4) / (0.35 * rad)).powi(2)).exp();
                    c[[y, x, 2]] = (c[[y, x, 2]] + 1.1 * ring).min(1.4);
                }
            }
        }
    }
    c
}

/// `exp(-M c)` per pixel.
pub fn render(latent: &Array3<f64>, od: &[[f64; 3]; 3], domain: StainDomain, id: &str) -> Result<ImageTile> {
    let (h, w, _) = latent.dim();
    ImageTile::from_fn(h, w, domain, id, |(r, q, k)| {
        let s: f64 = (0..3).map(|j| od[k][j] * latent[[r, q, j]]).sum();
        (-s).exp()
    })
}

pub fn synthesize_pair(size: usize, seed: u64, index: u64, id: &str) -> Result<(ImageTile, ImageTile)> {
    let latent = latent_tissue(size, seed.wrapping_mul(0x100_0000_01b3).wrapping_add(index));
    Ok((
        render(&latent, &HE_OD, StainDomain::He, id)?,
        render(&latent, &IHC_OD, StainDomain::Ihc, id)?,
    ))
}

pub fn tile_name(i: usize) -> String {
    format!("tile_{i:04}.png")
}

/// Writes `<out>/trainA|trainB/tile_XXXX.png` (and `testA|testB` when
/// `test_count > 0`). Returns the written H&E paths.
pub fn write_dataset(spec: &SyntheticStainSpec, out: &Path) -> Result<Vec<PathBuf>> {
    if spec.count == 0 {
        return Err(Error::Config("synthetic count must be positive".into()));
    }
    if spec.size < 8 || spec.size % 4 != 0 {
        return Err(Error::Config(format!("synthetic size {} must be >= 8 and divisible by 4", spec.size)));
    }
    let mut written = Vec::new();
    for (split, n, offset) in [("train", spec.count, 0u64), ("test", spec.test_count, 1u64 << 32)] {
        if n == 0 {
            continue;
        }
        let (da, db) = (out.join(format!("{split}A")), out.join(format!("{split}B")));
        for d in [&da, &db] {
            std::fs::create_dir_all(d).map_err(|e| he2ihc_core::Error::Io {
                path: d.clone(),
                source: e,
            })?;
        }
        for i in 0..n {
            let name = tile_name(i);
            let (he, ihc) = synthesize_pair(spec.size, spec.seed, offset + i as u64, name.trim_end_matches(".png"))?;
            he.save_png(&da.join(&name))?;
            ihc.save_png(&db.join(&name))?;
            written.push(da.join(&name));
        }
    }
    Ok(written)
}
