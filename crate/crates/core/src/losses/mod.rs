//! Autoencoder training objectives.

mod adversarial;
mod mrstft;

pub use adversarial::{adversarial_losses, adversarial_step, AdvLosses, DiscConfig, DiscriminatorBank, StftDiscriminator};
pub use mrstft::{mrstft, mrstft_loss, mrstft_stereo, MrstftConfig};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::autoencoder::GaussianParams;
use crate::error::Result;

pub const KL_WEIGHT: f64 = 1e-4;

/// `1e-4 · mean(-0.5 · (1 + logvar - mean² - exp(logvar)))`.
pub fn kl_regularizer(p: &GaussianParams) -> Result<Tensor> {
    kl_terms(&p.mean, &p.log_variance)
}

pub fn kl_terms(mean: &Tensor, log_variance: &Tensor) -> Result<Tensor> {
    let inner = ((log_variance + 1.0)? - mean.sqr()? - log_variance.exp()?)?;
    Ok(((inner.mean_all()? * -0.5)? * KL_WEIGHT)?)
}

/// Mixing weights for the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub adversarial: f64,
    pub feature_matching: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reconstruction: 1.0,
            adversarial: 0.1,
            feature_matching: 5.0,
        }
    }
}
