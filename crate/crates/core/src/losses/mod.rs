//! Training objectives.

pub mod adversarial;
pub mod composite;
pub mod contrastive;
pub mod pyramid;

pub use adversarial::{adversarial_loss, Side};
pub use composite::{total_generator_loss, weighted_total, LossParts, LossWeights};
pub use contrastive::{
    asp_loss, asp_weight, asp_weights, info_nce, patch_info_nce, patch_nce_loss, positive_similarity,
    weighted_patch_nce, AspSchedule, RampSchedule, SimilarityWeight, DEFAULT_TEMPERATURE,
};
pub use pyramid::{blur_subsample, gaussian_pyramid_loss, gaussian_pyramid_loss_tiles, GaussianKernel, PyramidSpec};
