//! InfoNCE, PatchNCE and the adaptively weighted supervised variant.
//!
//! Patch losses treat same-location embeddings of two images as the
//! positive pair and every other sampled location of the same layer as a
//! negative. Keys are detached; gradients flow through the queries only.
//!
//! The adaptive weight for a positive pair at iteration `t` of `T` is
//! `w = (1 - g(t/T)) * 1 + g(t/T) * h(v . v+)`, where `g` ramps the
//! adaptive term in over training and `h` maps the positive similarity to a
//! weight, so poorly corresponding pairs contribute less once `g` is up.
//! Weights are computed from detached similarities and act as constants in
//! the backward pass.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::PatchEmbeddingSet;

/// InfoNCE temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Cross-entropy of `softmax([v.v+, v.v-_1, ...] / tau)` against the positive.
pub fn info_nce(v: &[f64], v_pos: &[f64], v_negs: &[Vec<f64>], temperature: f64) -> Result<f64> {
    if v_negs.is_empty() {
        return Err(Error::Config("info_nce needs at least one negative".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let dot = |a: &[f64], b: &[f64]| -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::Shape(format!("vector lengths {} vs {}", a.len(), b.len())));
        }
        Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
    };
    let mut logits = Vec::with_capacity(v_negs.len() + 1);
    logits.push(dot(v, v_pos)? / temperature);
    for n in v_negs {
        logits.push(dot(v, n)? / temperature);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[0])
}

/// Weight scheduling function `g` on normalized training progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RampSchedule {
    /// `g(x) = min(1, x / ramp_fraction)`.
    Linear { ramp_fraction: f64 },
    /// `g(x) = (1 - cos(pi * min(1, x / ramp_fraction))) / 2`.
    Cosine { ramp_fraction: f64 },
}

impl RampSchedule {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            RampSchedule::Linear { ramp_fraction } => (x / ramp_fraction).min(1.0),
            RampSchedule::Cosine { ramp_fraction } => {
                let p = (x / ramp_fraction).min(1.0);
                0.5 * (1.0 - (std::f64::consts::PI * p).cos())
            }
        }
    }

    fn ramp_fraction(&self) -> f64 {
        match *self {
            RampSchedule::Linear { ramp_fraction } | RampSchedule::Cosine { ramp_fraction } => ramp_fraction,
        }
    }
}

/// Similarity weight function `h` mapping a cosine similarity to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityWeight {
    /// `h(s) = max(0, s)`.
    Relu,
    /// `h(s) = (1 + s) / 2`.
    Shifted,
}

impl SimilarityWeight {
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            SimilarityWeight::Relu => s.max(0.0),
            SimilarityWeight::Shifted => 0.5 * (1.0 + s),
        }
    }

    pub fn max_value(&self) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AspSchedule {
    pub total_iterations: u64,
    pub ramp: RampSchedule,
    pub similarity: SimilarityWeight,
}

impl AspSchedule {
    pub fn new(total_iterations: u64) -> Self {
        Self {
            total_iterations,
            ramp: RampSchedule::Linear { ramp_fraction: 0.5 },
            similarity: SimilarityWeight::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iterations == 0 {
            return Err(Error::Config("ASP schedule needs T > 0".into()));
        }
        let f = self.ramp.ramp_fraction();
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("ramp fraction {f} must be in (0, 1]")));
        }
        Ok(())
    }

    /// `g(t / T)`.
    pub fn progress_weight(&self, t: u64) -> Result<f64> {
        if t > self.total_iterations {
            return Err(Error::Config(format!("iteration {t} exceeds T = {}", self.total_iterations)));
        }
        Ok(self.ramp.eval(t as f64 / self.total_iterations as f64))
    }
}

/// `w_t = (1 - g(t/T)) * 1.0 + g(t/T) * h(sim)`.
pub fn asp_weight(t: u64, schedule: &AspSchedule, sim: f64) -> Result<f64> {
    let g = schedule.progress_weight(t)?;
    Ok((1.0 - g) * 1.0 + g * schedule.similarity.eval(sim))
}

/// Per-location InfoNCE for `(N, n, d)` queries and keys: `(N, n)` losses.
pub fn patch_info_nce(queries: &Tensor, keys: &Tensor, temperature: f64) -> Result<Tensor> {
    if queries.dims() != keys.dims() {
        return Err(Error::Shape(format!(
            "query/key shapes differ: {:?} vs {:?}",
            queries.dims(),
            keys.dims()
        )));
    }
    let (_, n, _) = queries.dims3()?;
    if n < 2 {
        return Err(Error::Config("patch InfoNCE needs at least two locations".into()));
    }
    let logits = queries.matmul(&keys.transpose(1, 2)?)?.affine(1.0 / temperature, 0.0)?;
    let log_probs = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
    let eye = Tensor::eye(n, queries.dtype(), queries.device())?;
    let diag = log_probs.broadcast_mul(&eye)?.sum(D::Minus1)?;
    Ok(diag.neg()?)
}

/// Positive-pair cosine similarities `(N, n)`, detached.
pub fn positive_similarity(queries: &Tensor, keys: &Tensor) -> Result<Tensor> {
    Ok((queries * keys)?.sum(D::Minus1)?.detach())
}

fn mean_over_layers(terms: Vec<Tensor>) -> Result<Tensor> {
    let k = terms.len() as f64;
    let mut iter = terms.into_iter();
    let first = iter.next().ok_or_else(|| Error::Config("no embedding layers".into()))?;
    let sum = iter.try_fold(first, |acc, t| acc + t)?;
    Ok(sum.affine(1.0 / k, 0.0)?)
}

/// PatchNCE between the generator input (keys) and its output (queries):
/// mean over layers and locations of the per-location InfoNCE.
pub fn patch_nce_loss(input_embeds: &PatchEmbeddingSet, fake_embeds: &PatchEmbeddingSet, temperature: f64) -> Result<Tensor> {
    fake_embeds.check_aligned(input_embeds)?;
    let terms = fake_embeds
        .layers
        .iter()
        .zip(&input_embeds.layers)
        .map(|(q, k)| Ok(patch_info_nce(&q.vectors, &k.vectors.detach(), temperature)?.mean_all()?))
        .collect::<Result<Vec<_>>>()?;
    mean_over_layers(terms)
}

/// Adaptive weights per layer, `(N, n)` each, for the given pairs at iteration `t`.
pub fn asp_weights(
    fake_embeds: &PatchEmbeddingSet,
    real_embeds: &PatchEmbeddingSet,
    t: u64,
    schedule: &AspSchedule,
) -> Result<Vec<Tensor>> {
    fake_embeds.check_aligned(real_embeds)?;
    fake_embeds
        .layers
        .iter()
        .zip(&real_embeds.layers)
        .map(|(q, k)| {
            let sim = positive_similarity(&q.vectors, &k.vectors)?;
            let shape = sim.shape().clone();
            let vals: Vec<f64> = sim.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            let w = vals
                .into_iter()
                .map(|s| asp_weight(t, schedule, s))
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::from_vec(w, shape, sim.device())?.to_dtype(sim.dtype())?)
        })
        .collect()
}

/// Weighted patch InfoNCE with externally supplied per-location weights.
pub fn weighted_patch_nce(
    query_embeds: &PatchEmbeddingSet,
    key_embeds: &PatchEmbeddingSet,
    weights: &[Tensor],
    temperature: f64,
) -> Result<Tensor> {
    query_embeds.check_aligned(key_embeds)?;
    if weights.len() != query_embeds.layers.len() {
        return Err(Error::Shape(format!(
            "{} weight tensors for {} layers",
            weights.len(),
            query_embeds.layers.len()
        )));
    }
    let terms = query_embeds
        .layers
        .iter()
        .zip(&key_embeds.layers)
        .zip(weights)
        .map(|((q, k), w)| {
            let l = patch_info_nce(&q.vectors, &k.vectors.detach(), temperature)?;
            Ok((l * w.detach())?.mean_all()?)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_over_layers(terms)
}

/// Adaptive supervised PatchNCE between generated (queries) and real
/// target (keys) patches: mean over layers and locations of `w_t * InfoNCE`.
pub fn asp_loss(
    fake_embeds: &PatchEmbeddingSet,
    real_embeds: &PatchEmbeddingSet,
    t: u64,
    schedule: &AspSchedule,
    temperature: f64,
) -> Result<Tensor> {
    let weights = asp_weights(fake_embeds, real_embeds, t, schedule)?;
    weighted_patch_nce(fake_embeds, real_embeds, &weights, temperature)
}
