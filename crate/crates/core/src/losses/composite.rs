//! Weighted sum of the four generator objectives.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub adv: f64,
    pub patch_nce: f64,
    pub asp: f64,
    pub gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            patch_nce: 10.0,
            asp: 10.0,
            gp: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight `{name}` = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("adv", self.adv),
            ("patch_nce", self.patch_nce),
            ("asp", self.asp),
            ("gp", self.gp),
        ]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            adv: self.adv * k,
            patch_nce: self.patch_nce * k,
            asp: self.asp * k,
            gp: self.gp * k,
        }
    }
}

/// The four loss terms; a term is `None` when it was not computed
/// (its weight is zero).
#[derive(Debug, Clone, PartialEq)]
pub struct LossParts<T> {
    pub adv: T,
    pub patch_nce: Option<T>,
    pub asp: Option<T>,
    pub gp: Option<T>,
}

impl<T> LossParts<T> {
    fn named(&self) -> [(&'static str, Option<&T>); 4] {
        [
            ("adv", Some(&self.adv)),
            ("patch_nce", self.patch_nce.as_ref()),
            ("asp", self.asp.as_ref()),
            ("gp", self.gp.as_ref()),
        ]
    }
}

fn check_present(name: &str, weight: f64, present: bool) -> Result<()> {
    if weight != 0.0 && !present {
        return Err(Error::Config(format!("loss term `{name}` has weight {weight} but was not computed")));
    }
    Ok(())
}

/// `lambda_adv L_adv + lambda_nce L_PatchNCE + lambda_asp L_ASP + lambda_gp L_GP`.
pub fn weighted_total(parts: &LossParts<f64>, weights: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for ((name, part), (_, w)) in parts.named().into_iter().zip(weights.named()) {
        check_present(name, w, part.is_some())?;
        if let Some(v) = part {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss(name.to_string()));
            }
            total += w * v;
        }
    }
    Ok(total)
}

/// Differentiable composite; fails naming the first non-finite term.
pub fn total_generator_loss(parts: &LossParts<Tensor>, weights: &LossWeights) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for ((name, part), (_, w)) in parts.named().into_iter().zip(weights.named()) {
        check_present(name, w, part.is_some())?;
        let Some(t) = part else { continue };
        let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(name.to_string()));
        }
        let term = t.affine(w, 0.0)?;
        total = Some(match total {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    Ok(total.expect("adversarial term is always present"))
}

impl LossParts<Tensor> {
    pub fn values(&self) -> Result<LossParts<f64>> {
        let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossParts {
            adv: s(&self.adv)?,
            patch_nce: self.patch_nce.as_ref().map(s).transpose()?,
            asp: self.asp.as_ref().map(s).transpose()?,
            gp: self.gp.as_ref().map(s).transpose()?,
        })
    }
}
