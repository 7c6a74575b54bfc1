//! Multi-magnification sample construction.
//!
//! Each training sample is one of four views of a registered H&E/IHC pair:
//! the whole tile blurred and downsampled (macro context), a native-resolution
//! crop, or a smaller crop enlarged two or four times (cellular detail). All
//! views are brought to a single `unified_size` through a [`SuperResolver`].

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::manifest::DatasetManifest;
use crate::data::resample::{size_normalize, BicubicResolver, SuperResolver};
use crate::error::{Error, Result};
use crate::losses::pyramid::{blur_subsample, GaussianKernel};
use crate::tile::{ImageTile, StainDomain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Branch {
    MacroDownsample,
    NativeCrop,
    Zoom2x,
    Zoom4x,
}

impl Branch {
    pub const ALL: [Branch; 4] = [
        Branch::MacroDownsample,
        Branch::NativeCrop,
        Branch::Zoom2x,
        Branch::Zoom4x,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Branch::MacroDownsample => "MACRO_DOWNSAMPLE",
            Branch::NativeCrop => "NATIVE_CROP",
            Branch::Zoom2x => "ZOOM_2X",
            Branch::Zoom4x => "ZOOM_4X",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Branch probabilities (in [`Branch::ALL`] order), output size and macro factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MagnificationPolicy {
    pub probabilities: [f64; 4],
    pub unified_size: usize,
    pub macro_factor: usize,
}

impl Default for MagnificationPolicy {
    fn default() -> Self {
        Self {
            probabilities: [0.25; 4],
            unified_size: 512,
            macro_factor: 2,
        }
    }
}

impl MagnificationPolicy {
    /// Native crops only; the single-magnification training regime.
    pub fn native_only(unified_size: usize) -> Self {
        Self {
            probabilities: [0.0, 1.0, 0.0, 0.0],
            unified_size,
            macro_factor: 2,
        }
    }

    pub fn uniform(unified_size: usize) -> Self {
        Self {
            unified_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.probabilities.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Config("branch probabilities must be finite and >= 0".into()));
        }
        let total: f64 = self.probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("branch probabilities sum to {total}, expected 1")));
        }
        // the 4x crop is unified/4 and must itself be a valid tile
        if self.unified_size < 32 || self.unified_size % 16 != 0 {
            return Err(Error::Config(format!(
                "unified size {} must be a multiple of 16 and >= 32",
                self.unified_size
            )));
        }
        if !matches!(self.macro_factor, 2 | 4) {
            return Err(Error::Config(format!("macro factor {} must be 2 or 4", self.macro_factor)));
        }
        Ok(())
    }

    /// Inverse-CDF branch draw from a uniform `u` in `[0, 1)`.
    pub fn pick(&self, u: f64) -> Branch {
        let mut acc = 0.0;
        let mut last = Branch::MacroDownsample;
        for (b, p) in Branch::ALL.iter().zip(self.probabilities) {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = *b;
            if u < acc {
                return *b;
            }
        }
        last
    }
}

/// One paired training sample at the unified size.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnificationSample {
    pub he: ImageTile,
    pub ihc: ImageTile,
    pub branch: Branch,
    /// Top-left of the source window in source-tile coordinates.
    pub crop_origin: (usize, usize),
    pub unified_size: usize,
}

impl MagnificationSample {
    /// Paired-geometry contract: both tiles are `unified_size` squares.
    pub fn check(&self) -> Result<()> {
        let want = (self.unified_size, self.unified_size);
        if self.he.size() != want || self.ihc.size() != want {
            return Err(Error::Shape(format!(
                "sample sizes {:?}/{:?}, expected {want:?}",
                self.he.size(),
                self.ihc.size()
            )));
        }
        self.he.check_geometry()?;
        self.ihc.check_geometry()
    }
}

/// Gaussian blur then stride-`factor` subsampling; output is `size / factor`.
pub fn downsample_macro(tile: &ImageTile, factor: usize) -> Result<ImageTile> {
    if !matches!(factor, 2 | 4) {
        return Err(Error::Config(format!("downsample factor {factor} must be 2 or 4")));
    }
    let (h, w) = tile.size();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!("{h}x{w} tile is not divisible by {factor}")));
    }
    let x = tile.to_tensor(DType::F64, &Device::Cpu)?;
    let y = blur_subsample(&x, &GaussianKernel::default(), factor)?;
    ImageTile::from_tensor(&y, tile.domain(), tile.source_id())
}

fn check_pair(he: &ImageTile, ihc: &ImageTile) -> Result<()> {
    if he.size() != ihc.size() {
        return Err(Error::Shape(format!(
            "paired tiles differ in size: {:?} vs {:?}",
            he.size(),
            ihc.size()
        )));
    }
    Ok(())
}

fn random_origin(rng: &mut ChaCha8Rng, size: (usize, usize), window: usize) -> Result<(usize, usize)> {
    let (h, w) = size;
    if window > h || window > w {
        return Err(Error::Shape(format!("crop window {window} exceeds {h}x{w} tile")));
    }
    Ok((rng.random_range(0..=h - window), rng.random_range(0..=w - window)))
}

/// Same random `unified/zoom` window cut from both tiles, each enlarged by `zoom`.
pub fn paired_crop_zoom(
    he: &ImageTile,
    ihc: &ImageTile,
    zoom: usize,
    unified_size: usize,
    rng_seed: u64,
    sr: &dyn SuperResolver,
) -> Result<MagnificationSample> {
    let branch = match zoom {
        2 => Branch::Zoom2x,
        4 => Branch::Zoom4x,
        z => return Err(Error::Config(format!("zoom {z} must be 2 or 4"))),
    };
    check_pair(he, ihc)?;
    if unified_size % zoom != 0 {
        return Err(Error::Config(format!("unified size {unified_size} not divisible by zoom {zoom}")));
    }
    let window = unified_size / zoom;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (row, col) = random_origin(&mut rng, he.size(), window)?;
    let he_crop = he.crop(row, col, window, window)?;
    let ihc_crop = ihc.crop(row, col, window, window)?;
    Ok(MagnificationSample {
        he: size_normalize(&he_crop, unified_size, sr)?,
        ihc: size_normalize(&ihc_crop, unified_size, sr)?,
        branch,
        crop_origin: (row, col),
        unified_size,
    })
}

/// Plain `unified x unified` crop at native resolution.
pub fn paired_native_crop(
    he: &ImageTile,
    ihc: &ImageTile,
    unified_size: usize,
    rng_seed: u64,
) -> Result<MagnificationSample> {
    check_pair(he, ihc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (row, col) = random_origin(&mut rng, he.size(), unified_size)?;
    Ok(MagnificationSample {
        he: he.crop(row, col, unified_size, unified_size)?,
        ihc: ihc.crop(row, col, unified_size, unified_size)?,
        branch: Branch::NativeCrop,
        crop_origin: (row, col),
        unified_size,
    })
}

/// Whole tile downsampled by `factor` and then size-normalized.
pub fn paired_macro(
    he: &ImageTile,
    ihc: &ImageTile,
    factor: usize,
    unified_size: usize,
    sr: &dyn SuperResolver,
) -> Result<MagnificationSample> {
    check_pair(he, ihc)?;
    let he_small = downsample_macro(he, factor)?;
    let ihc_small = downsample_macro(ihc, factor)?;
    Ok(MagnificationSample {
        he: size_normalize(&he_small, unified_size, sr)?,
        ihc: size_normalize(&ihc_small, unified_size, sr)?,
        branch: Branch::MacroDownsample,
        crop_origin: (0, 0),
        unified_size,
    })
}

/// Applies one branch transform to a pair.
pub fn build_sample(
    he: &ImageTile,
    ihc: &ImageTile,
    branch: Branch,
    policy: &MagnificationPolicy,
    rng_seed: u64,
    sr: &dyn SuperResolver,
) -> Result<MagnificationSample> {
    let sample = match branch {
        Branch::MacroDownsample => paired_macro(he, ihc, policy.macro_factor, policy.unified_size, sr)?,
        Branch::NativeCrop => paired_native_crop(he, ihc, policy.unified_size, rng_seed)?,
        Branch::Zoom2x => paired_crop_zoom(he, ihc, 2, policy.unified_size, rng_seed, sr)?,
        Branch::Zoom4x => paired_crop_zoom(he, ihc, 4, policy.unified_size, rng_seed, sr)?,
    };
    sample.check()?;
    Ok(sample)
}

/// Random-access source of registered (H&E, IHC) pairs.
pub trait PairSource: Send + Sync {
    fn len(&self) -> usize;

    fn pair(&self, index: usize) -> Result<(ImageTile, ImageTile)>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pairs held in memory.
#[derive(Debug, Clone, Default)]
pub struct InMemoryPairs(pub Vec<(ImageTile, ImageTile)>);

impl PairSource for InMemoryPairs {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn pair(&self, index: usize) -> Result<(ImageTile, ImageTile)> {
        self.0
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Data(format!("pair index {index} out of range")))
    }
}

/// Pairs read from the manifest's PNG files, memoized once loaded.
pub struct ManifestPairs {
    manifest: DatasetManifest,
    cache: Mutex<HashMap<usize, Arc<(ImageTile, ImageTile)>>>,
    cache_limit: usize,
}

impl ManifestPairs {
    pub fn new(manifest: DatasetManifest) -> Self {
        Self::with_cache_limit(manifest, 256)
    }

    pub fn with_cache_limit(manifest: DatasetManifest, cache_limit: usize) -> Self {
        Self {
            manifest,
            cache: Mutex::new(HashMap::new()),
            cache_limit,
        }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn load(&self, index: usize) -> Result<(ImageTile, ImageTile)> {
        let e = self
            .manifest
            .entries
            .get(index)
            .ok_or_else(|| Error::Data(format!("pair index {index} out of range")))?;
        let he = ImageTile::load_png(&e.he, StainDomain::He)?;
        let ihc = ImageTile::load_png(&e.ihc, StainDomain::Ihc)?;
        check_pair(&he, &ihc).map_err(|_| {
            Error::Data(format!(
                "pair `{}` has mismatched sizes {:?} / {:?}",
                e.id,
                he.size(),
                ihc.size()
            ))
        })?;
        Ok((he, ihc))
    }
}

impl PairSource for ManifestPairs {
    fn len(&self) -> usize {
        self.manifest.len()
    }

    fn pair(&self, index: usize) -> Result<(ImageTile, ImageTile)> {
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&index) {
            return Ok((**hit).clone());
        }
        let pair = self.load(index)?;
        let mut cache = self.cache.lock().expect("cache lock");
        if cache.len() < self.cache_limit {
            cache.insert(index, Arc::new(pair.clone()));
        }
        Ok(pair)
    }
}

/// Infinite seeded sample stream.
///
/// Item `i` is a pure function of `(seed, i)`: it draws from its own ChaCha
/// stream, so items can be built out of order or in parallel and still
/// come out identical.
#[derive(Clone)]
pub struct SampleStream {
    source: Arc<dyn PairSource>,
    policy: MagnificationPolicy,
    seed: u64,
    resolver: Arc<dyn SuperResolver>,
    next: u64,
}

impl fmt::Debug for SampleStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SampleStream")
            .field("pairs", &self.source.len())
            .field("policy", &self.policy)
            .field("seed", &self.seed)
            .field("resolver", &self.resolver.name())
            .field("next", &self.next)
            .finish()
    }
}

impl SampleStream {
    pub fn new(source: Arc<dyn PairSource>, policy: MagnificationPolicy, seed: u64) -> Result<Self> {
        Self::with_resolver(source, policy, seed, Arc::new(BicubicResolver))
    }

    pub fn with_resolver(
        source: Arc<dyn PairSource>,
        policy: MagnificationPolicy,
        seed: u64,
        resolver: Arc<dyn SuperResolver>,
    ) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::Data("cannot sample from an empty dataset".into()));
        }
        policy.validate()?;
        Ok(Self {
            source,
            policy,
            seed,
            resolver,
            next: 0,
        })
    }

    pub fn policy(&self) -> &MagnificationPolicy {
        &self.policy
    }

    pub fn position(&self) -> u64 {
        self.next
    }

    /// Moves the cursor; used when resuming a run.
    pub fn seek(&mut self, index: u64) {
        self.next = index;
    }

    fn item_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    /// Pair index and branch of item `index`, without building it.
    pub fn plan(&self, index: u64) -> (usize, Branch, u64) {
        let mut rng = self.item_rng(index);
        let pair = rng.random_range(0..self.source.len());
        let branch = self.policy.pick(rng.random::<f64>());
        let crop_seed = rng.random::<u64>();
        (pair, branch, crop_seed)
    }

    pub fn sample_at(&self, index: u64) -> Result<MagnificationSample> {
        let (pair, branch, crop_seed) = self.plan(index);
        let (he, ihc) = self.source.pair(pair)?;
        build_sample(&he, &ihc, branch, &self.policy, crop_seed, self.resolver.as_ref())
    }

    /// Items `start..start+count` built on up to `threads` workers, returned in order.
    pub fn samples_range(&self, start: u64, count: usize, threads: usize) -> Result<Vec<MagnificationSample>> {
        let threads = threads.max(1).min(count.max(1));
        if threads == 1 {
            return (0..count as u64).map(|i| self.sample_at(start + i)).collect();
        }
        let chunk = count.div_ceil(threads);
        let parts: Vec<Result<Vec<MagnificationSample>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let lo = (t * chunk).min(count);
                    let hi = ((t + 1) * chunk).min(count);
                    scope.spawn(move || (lo..hi).map(|i| self.sample_at(start + i as u64)).collect())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("prefetch worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(count);
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

impl Iterator for SampleStream {
    type Item = Result<MagnificationSample>;

    fn next(&mut self) -> Option<Self::Item> {
        let item = self.sample_at(self.next);
        self.next += 1;
        Some(item)
    }
}

/// Seeded stream over the pairs listed in `manifest`.
pub fn sample_batch(manifest: &DatasetManifest, policy: &MagnificationPolicy, rng_seed: u64) -> Result<SampleStream> {
    if manifest.is_empty() {
        return Err(Error::Data(format!("manifest for {} split is empty", manifest.split)));
    }
    SampleStream::new(Arc::new(ManifestPairs::new(manifest.clone())), policy.clone(), rng_seed)
}

/// Provenance record written next to materialized samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: u64,
    pub source_id: String,
    pub branch: Branch,
    pub crop_origin: (usize, usize),
    pub unified_size: usize,
    pub he: PathBuf,
    pub ihc: PathBuf,
}
