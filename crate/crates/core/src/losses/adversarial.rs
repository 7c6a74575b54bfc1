use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Generator,
    Discriminator,
}

/// Least-squares adversarial objective.
///
/// Discriminator: `mean((s_real - 1)^2) + mean(s_fake^2)`.
/// Generator: `mean((s_fake - 1)^2)`; `scores_real` is ignored.
pub fn adversarial_loss(scores_real: Option<&Tensor>, scores_fake: &Tensor, side: Side) -> Result<Tensor> {
    let fake_to_one = || -> Result<Tensor> { Ok((scores_fake - 1.0)?.sqr()?.mean_all()?) };
    match side {
        Side::Generator => fake_to_one(),
        Side::Discriminator => {
            let real = scores_real.ok_or_else(|| {
                crate::error::Error::Config("discriminator loss needs real scores".into())
            })?;
            let real_term = (real - 1.0)?.sqr()?.mean_all()?;
            let fake_term = scores_fake.sqr()?.mean_all()?;
            Ok((real_term + fake_term)?)
        }
    }
}
