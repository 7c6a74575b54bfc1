use std::cell::Cell;

use candle_core::{Tensor, Var, D};

use crate::error::{Error, Result};
use crate::nn::params::{Init, ParamBuilder};

/// Standard deviation of the normal initializer for conv and linear weights.
pub const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// While alive, layers on this thread read their parameters detached, so
/// forward passes record no graph and intermediates are freed eagerly.
#[must_use]
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    NoGradGuard {
        prev: NO_GRAD.replace(true),
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD.set(self.prev);
    }
}

pub fn grad_enabled() -> bool {
    !NO_GRAD.get()
}

/// The tensor a layer should compute with.
pub(crate) fn value(v: &Var) -> Tensor {
    if NO_GRAD.get() {
        v.as_tensor().detach()
    } else {
        v.as_tensor().clone()
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = pb.param("weight", (out_ch, in_ch, kernel, kernel), Init::Normal { std: INIT_STD })?;
        let bias = if bias {
            Some(pb.param("bias", out_ch, Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&value(&self.weight), self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&value(b).reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Fully connected layer on `(N, in)` inputs; weight stored as `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.param("weight", (out_dim, in_dim), Init::Normal { std: INIT_STD })?,
            bias: pb.param("bias", out_dim, Init::Const(0.0))?,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&value(&self.weight).t()?)?;
        Ok(y.broadcast_add(&value(&self.bias))?)
    }
}

fn affine(x: &Tensor, gamma: &Var, beta: &Var) -> Result<Tensor> {
    let g = value(gamma).reshape((1, (), 1, 1))?;
    let b = value(beta).reshape((1, (), 1, 1))?;
    Ok(x.broadcast_mul(&g)?.broadcast_add(&b)?)
}

fn normalize(x: &Tensor, mean: &Tensor, var: &Tensor) -> Result<Tensor> {
    let centered = x.broadcast_sub(mean)?;
    Ok(centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

/// Per-sample, per-channel normalization over the spatial axes with affine output.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    gamma: Var,
    beta: Var,
}

impl InstanceNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.param("gamma", channels, Init::Const(1.0))?,
            beta: pb.param("beta", channels, Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim((2, 3))?;
        let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((2, 3))?;
        affine(&normalize(x, &mean, &var)?, &self.gamma, &self.beta)
    }
}

/// How a batch-norm layer treats its statistics on one call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated.
    TrainUpdate,
    /// Batch statistics; running statistics left untouched.
    Train,
    /// Running statistics.
    Eval,
}

/// Batch normalization over `(N, H, W)` with running statistics kept as buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.param("gamma", channels, Init::Const(1.0))?,
            beta: pb.param("beta", channels, Init::Const(0.0))?,
            running_mean: pb.buffer("running_mean", channels, 0.0)?,
            running_var: pb.buffer("running_var", channels, 1.0)?,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let (mean, var) = match mode {
            NormMode::Eval => (
                self.running_mean.as_tensor().detach().reshape((1, (), 1, 1))?,
                self.running_var.as_tensor().detach().reshape((1, (), 1, 1))?,
            ),
            NormMode::Train | NormMode::TrainUpdate => {
                let mean = x.mean_keepdim((0, 2, 3))?;
                let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
                if mode == NormMode::TrainUpdate {
                    let (n, _, h, w) = x.dims4()?;
                    let count = (n * h * w) as f64;
                    let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                    let m = self.momentum;
                    let bm = mean.flatten_all()?.detach();
                    let bv = var.flatten_all()?.detach().affine(unbiased, 0.0)?;
                    self.running_mean
                        .set(&(self.running_mean.as_tensor().affine(1.0 - m, 0.0)? + bm.affine(m, 0.0)?)?)?;
                    self.running_var
                        .set(&(self.running_var.as_tensor().affine(1.0 - m, 0.0)? + bv.affine(m, 0.0)?)?)?;
                }
                (mean, var)
            }
        };
        affine(&normalize(x, &mean, &var)?, &self.gamma, &self.beta)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Max over `dim` (kept) whose gradient is split evenly between tied
/// maxima. Plain `max` hands the full gradient to every tied element,
/// which overcounts when e.g. a constant region attains the maximum.
pub fn max_keepdim_shared(x: &Tensor, dim: usize) -> Result<Tensor> {
    let m = x.max_keepdim(dim)?.detach();
    let hit = x.broadcast_eq(&m)?.to_dtype(x.dtype())?;
    let share = hit.broadcast_div(&hit.sum_keepdim(dim)?)?;
    Ok((x * share)?.sum_keepdim(dim)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// Row-stochastic `(out, in)` matrix of 1-D linear interpolation weights
/// with half-pixel centers and edge clamping.
pub fn linear_interp_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Differentiable bilinear resize of `(N, C, H, W)` expressed as two matmuls.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rx = Tensor::from_vec(linear_interp_matrix(w, out_w), (out_w, w), dev)?.to_dtype(x.dtype())?;
    let ry = Tensor::from_vec(linear_interp_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let cols = x.reshape((n * c * h, w))?.matmul(&rx.t()?)?; // (n c h, out_w)
    let cols = cols.reshape((n * c, h, out_w))?.transpose(1, 2)?.contiguous()?;
    let rows = cols.reshape((n * c * out_w, h))?.matmul(&ry.t()?)?; // (n c out_w, out_h)
    let y = rows.reshape((n * c, out_w, out_h))?.transpose(1, 2)?.contiguous()?;
    Ok(y.reshape((n, c, out_h, out_w))?)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(h * factor, w * factor)?)
}

/// L2-normalizes the rows of an `(n, d)` matrix.
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    // The epsilon sits under the root so all-zero rows keep a finite gradient.
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-24)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

pub(crate) fn expect_spatial(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    let (_, _, ha, wa) = a.dims4()?;
    let (_, _, hb, wb) = b.dims4()?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::Shape(format!("{what}: spatial mismatch {ha}x{wa} vs {hb}x{wb}")));
    }
    Ok(())
}
