//! Attention-gated multi-magnification feature interaction (AMMFI).
//!
//! At each encoder/decoder junction the encoder feature `f_e` and the
//! decoder gating feature `f_d` (already resampled onto the encoder grid)
//! are combined as
//!
//! ```text
//! f'    = Cat(W_fe * f_e + b_fe, W_fd * f_d + b_fd)
//! f''   = M_c(f') (*) f'
//! a     = sigmoid(W_a (M_s(f'') (*) f'') + b)
//! f_out = a (*) f_e
//! ```
//!
//! `M_c` is CBAM channel attention and `M_s` CBAM spatial attention. The
//! spatial term is read as "spatial attention evaluated on the channel
//! refined map", i.e. `M_s` sees the statistics of `f''`. The other reading
//! (feeding the raw channel weights `M_c(f')` to `M_s`) would hand `M_s` a
//! `1x1` map with no spatial extent, which cannot produce a per-pixel mask.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{expect_spatial, max_keepdim_shared, sigmoid, Conv2d, Linear};
use crate::nn::params::ParamBuilder;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmmfiConfig {
    /// Channel-attention MLP reduction ratio.
    pub reduction: usize,
    /// Spatial-attention kernel size (odd).
    pub spatial_kernel: usize,
}

impl Default for AmmfiConfig {
    fn default() -> Self {
        Self {
            reduction: 8,
            spatial_kernel: 7,
        }
    }
}

/// `sigmoid(MLP(avgpool(f)) + MLP(maxpool(f)))` with a shared two-layer MLP.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    fc1: Linear,
    fc2: Linear,
}

impl ChannelAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "reduction ratio {reduction} must divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::new(&mut pb.pp("fc1"), channels, hidden)?,
            fc2: Linear::new(&mut pb.pp("fc2"), hidden, channels)?,
        })
    }

    pub fn fc1(&self) -> &Linear {
        &self.fc1
    }

    pub fn fc2(&self) -> &Linear {
        &self.fc2
    }

    fn mlp(&self, v: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(v)?.relu()?)
    }

    /// Per-channel weights in `(0, 1)`, shaped `(N, C, 1, 1)`.
    pub fn weights(&self, f: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = f.dims4()?;
        let avg = f.mean((2, 3))?;
        let max = max_keepdim_shared(&f.reshape((n, c, h * w))?, 2)?.reshape((n, c))?;
        let logits = (self.mlp(&avg)? + self.mlp(&max)?)?;
        sigmoid(&logits)?.reshape((n, c, 1, 1)).map_err(Into::into)
    }
}

/// `sigmoid(conv_kxk([mean_c(f); max_c(f)]))`.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("spatial attention kernel {kernel} must be odd")));
        }
        Ok(Self {
            conv: Conv2d::new(&mut pb.pp("conv"), 2, 1, kernel, 1, kernel / 2, true)?,
        })
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    /// Per-pixel weights in `(0, 1)`, shaped `(N, 1, H, W)`.
    pub fn weights(&self, f: &Tensor) -> Result<Tensor> {
        let mean = f.mean_keepdim(1)?;
        let max = max_keepdim_shared(f, 1)?;
        let stats = Tensor::cat(&[&mean, &max], 1)?;
        sigmoid(&self.conv.forward(&stats)?)
    }
}

/// Intermediate values of one AMMFI evaluation.
#[derive(Debug, Clone)]
pub struct AmmfiTrace {
    /// Projected concatenation `f'`.
    pub projected: Tensor,
    /// Channel weights `M_c(f')`.
    pub channel_weights: Tensor,
    /// Channel-refined map `f''`.
    pub refined: Tensor,
    /// Spatial weights `M_s(f'')`.
    pub spatial_weights: Tensor,
    /// Gate `a`, same shape as the encoder feature.
    pub mask: Tensor,
    /// Gated encoder feature `f_out`.
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct Ammfi {
    proj_enc: Conv2d,
    proj_dec: Conv2d,
    channel: ChannelAttention,
    spatial: SpatialAttention,
    gate: Conv2d,
    enc_channels: usize,
}

impl Ammfi {
    /// `enc_channels` / `dec_channels` are the channel counts of `f_e` and
    /// `f_d`; both are projected to `enc_channels / 2` before concatenation.
    pub fn new(pb: &mut ParamBuilder<'_>, enc_channels: usize, dec_channels: usize, cfg: AmmfiConfig) -> Result<Self> {
        if enc_channels < 2 || enc_channels % 2 != 0 {
            return Err(Error::Config(format!("AMMFI needs an even encoder width, got {enc_channels}")));
        }
        let inter = enc_channels / 2;
        let cat = 2 * inter;
        Ok(Self {
            proj_enc: Conv2d::new(&mut pb.pp("proj_enc"), enc_channels, inter, 1, 1, 0, true)?,
            proj_dec: Conv2d::new(&mut pb.pp("proj_dec"), dec_channels, inter, 1, 1, 0, true)?,
            channel: ChannelAttention::new(&mut pb.pp("channel_att"), cat, cfg.reduction)?,
            spatial: SpatialAttention::new(&mut pb.pp("spatial_att"), cfg.spatial_kernel)?,
            gate: Conv2d::new(&mut pb.pp("gate"), cat, enc_channels, 1, 1, 0, true)?,
            enc_channels,
        })
    }

    pub fn proj_enc(&self) -> &Conv2d {
        &self.proj_enc
    }

    pub fn proj_dec(&self) -> &Conv2d {
        &self.proj_dec
    }

    pub fn channel_attention(&self) -> &ChannelAttention {
        &self.channel
    }

    pub fn spatial_attention(&self) -> &SpatialAttention {
        &self.spatial
    }

    pub fn gate(&self) -> &Conv2d {
        &self.gate
    }

    pub fn forward(&self, f_enc: &Tensor, f_dec: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(f_enc, f_dec)?.output)
    }

    pub fn forward_trace(&self, f_enc: &Tensor, f_dec: &Tensor) -> Result<AmmfiTrace> {
        expect_spatial(f_enc, f_dec, "AMMFI inputs")?;
        let (_, c, _, _) = f_enc.dims4()?;
        if c != self.enc_channels {
            return Err(Error::Shape(format!(
                "AMMFI expects {} encoder channels, got {c}",
                self.enc_channels
            )));
        }
        let projected = Tensor::cat(&[self.proj_enc.forward(f_enc)?, self.proj_dec.forward(f_dec)?], 1)?;
        let channel_weights = self.channel.weights(&projected)?;
        let refined = projected.broadcast_mul(&channel_weights)?;
        let spatial_weights = self.spatial.weights(&refined)?;
        let attended = refined.broadcast_mul(&spatial_weights)?;
        let mask = sigmoid(&self.gate.forward(&attended)?)?;
        let output = (&mask * f_enc)?;
        Ok(AmmfiTrace {
            projected,
            channel_weights,
            refined,
            spatial_weights,
            mask,
            output,
        })
    }
}
