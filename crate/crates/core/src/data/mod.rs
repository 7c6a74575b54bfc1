//! Paired-stain ingestion and the multi-magnification sampling strategy.

pub mod magnification;
pub mod manifest;
pub mod resample;

pub use magnification::{
    build_sample, downsample_macro, paired_crop_zoom, paired_macro, paired_native_crop, sample_batch, Branch,
    InMemoryPairs, MagnificationPolicy, MagnificationSample, ManifestPairs, PairSource, SampleRecord, SampleStream,
};
pub use manifest::{load_pairs, DatasetManifest, ManifestEntry, Split};
pub use resample::{bicubic_resize, size_normalize, BicubicResolver, SuperResolver};
