use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::MagnificationPolicy;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::{AspSchedule, LossWeights, PyramidSpec, RampSchedule, SimilarityWeight, DEFAULT_TEMPERATURE};
use crate::nn::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Shape of the adaptive-weight schedule; its horizon is the run length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AspConfig {
    pub ramp: RampSchedule,
    pub similarity: SimilarityWeight,
}

impl Default for AspConfig {
    fn default() -> Self {
        let s = AspSchedule::new(1);
        Self {
            ramp: s.ramp,
            similarity: s.similarity,
        }
    }
}

/// Everything that determines a training run. Serialized as TOML; every
/// field has a default, so a config file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of the run after which the learning rate decays linearly to 0.
    pub decay_start: f64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub asp: AspConfig,
    pub nce_temperature: f64,
    pub pyramid: PyramidSpec,
    pub policy: MagnificationPolicy,
    /// `false` replaces every AMMFI junction by plain skip concatenation.
    pub use_attention: bool,
    /// `false` restricts sampling to native-resolution crops.
    pub use_multimag: bool,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub precision: Precision,
    /// Checkpoint period in iterations; the final iteration is always saved.
    pub checkpoint_every: u64,
    /// Threads used to build each batch.
    pub prefetch_threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 1,
            lr: 2e-4,
            decay_start: 0.5,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            asp: AspConfig::default(),
            nce_temperature: DEFAULT_TEMPERATURE,
            pyramid: PyramidSpec::default(),
            policy: MagnificationPolicy::default(),
            use_attention: true,
            use_multimag: true,
            seed: 0,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            precision: Precision::F32,
            checkpoint_every: 500,
            prefetch_threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.decay_start) {
            return Err(Error::Config(format!("decay_start {} must be in [0, 1]", self.decay_start)));
        }
        if !(self.nce_temperature > 0.0) {
            return Err(Error::Config("nce_temperature must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        self.weights.validate()?;
        self.pyramid.validate()?;
        self.asp_schedule().validate()?;
        self.effective_policy().validate()?;
        self.effective_generator().validate()?;
        if self.policy.unified_size < self.discriminator.min_input {
            return Err(Error::Config(format!(
                "unified_size {} is below the discriminator minimum {}",
                self.policy.unified_size, self.discriminator.min_input
            )));
        }
        Ok(())
    }

    pub fn asp_schedule(&self) -> AspSchedule {
        AspSchedule {
            total_iterations: self.iterations,
            ramp: self.asp.ramp,
            similarity: self.asp.similarity,
        }
    }

    /// Generator config after applying `use_attention`.
    pub fn effective_generator(&self) -> GeneratorConfig {
        let mut g = self.generator.clone();
        if !self.use_attention {
            g.ammfi_levels.clear();
        } else if g.ammfi_levels.is_empty() {
            g.ammfi_levels = GeneratorConfig::default().ammfi_levels;
        }
        g
    }

    /// Sampling policy after applying `use_multimag`.
    pub fn effective_policy(&self) -> MagnificationPolicy {
        if self.use_multimag {
            self.policy.clone()
        } else {
            MagnificationPolicy::native_only(self.policy.unified_size)
        }
    }

    /// Short content hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Linear decay: `lr` until `decay_start * T`, then linearly to 0 at `T`.
pub fn lr_at(t: u64, cfg: &TrainConfig) -> f64 {
    let total = cfg.iterations as f64;
    let start = cfg.decay_start * total;
    let t = (t as f64).min(total);
    if t < start {
        cfg.lr
    } else if total > start {
        cfg.lr * (total - t) / (total - start)
    } else {
        0.0
    }
}
