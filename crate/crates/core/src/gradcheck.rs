//! Central finite-difference gradient checking.
//!
//! The numeric side uses nothing but repeated forward evaluation of the
//! loss closure, so it is independent of the backward pass it checks.

use candle_core::{DType, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Perturbation half-width.
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Elements probed per tensor (all when the tensor is smaller).
    pub per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            floor: 1e-6,
            per_tensor: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backprop gradients of `loss` with respect to each named
/// variable against central differences. Variables must be 64-bit.
pub fn check_gradients<F>(vars: &[(String, Var)], loss: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    let grads = loss()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (name, var) in vars {
        if var.dtype() != DType::F64 {
            return Err(Error::Numeric(format!("gradient check on `{name}` needs f64")));
        }
        let shape = var.shape().clone();
        let base: Vec<f64> = var.flatten_all()?.to_vec1()?;
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; base.len()],
        };
        let picks: Vec<usize> = if base.len() <= opts.per_tensor {
            (0..base.len()).collect()
        } else {
            let mut p = sample(&mut rng, base.len(), opts.per_tensor).into_vec();
            p.sort_unstable();
            p
        };
        let eval_at = |idx: usize, value: f64| -> Result<f64> {
            let mut probe = base.clone();
            probe[idx] = value;
            var.set(&Tensor::from_vec(probe, shape.clone(), var.device())?)?;
            Ok(loss()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
        };
        for idx in picks {
            let plus = eval_at(idx, base[idx] + opts.step)?;
            let minus = eval_at(idx, base[idx] - opts.step)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[idx], numeric, opts.floor);
            report.checked += 1;
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{name}[{idx}] analytic={:.6e} numeric={numeric:.6e}", analytic[idx]);
            }
        }
        var.set(&Tensor::from_vec(base, shape, var.device())?)?;
    }
    Ok(report)
}
