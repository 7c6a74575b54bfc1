//! Small neural-network toolkit on top of candle tensors.

pub mod adam;
pub mod layers;
pub mod params;

pub use adam::{Adam, AdamConfig};
pub use layers::{
    bilinear_resize, grad_enabled, l2_normalize_rows, leaky_relu, max_keepdim_shared, no_grad, sigmoid, upsample_nearest, BatchNorm, Conv2d, InstanceNorm,
    Linear, NoGradGuard, NormMode,
};
pub use params::{Init, ParamBuilder, ParamStore};
