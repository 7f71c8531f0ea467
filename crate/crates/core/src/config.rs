//! TOML run configuration. Every section is optional and falls back to the
//! defaults of the corresponding component.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderConfig;
use crate::audio::ChunkPolicy;
use crate::diffusion::SamplerConfig;
use crate::dit::DitConfig;
use crate::error::{Error, Result};
use crate::losses::{DiscConfig, LossWeights, MrstftConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub autoencoder: AutoencoderConfig,
    pub dit: DitConfig,
    pub sampler: SamplerConfig,
    pub mrstft: MrstftConfig,
    pub discriminator: DiscConfig,
    pub loss_weights: LossWeights,
    pub chunking: ChunkPolicy,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.autoencoder.validate()?;
        self.sampler.validate()?;
        self.train.validate()?;
        self.mrstft.resolutions()?;
        if self.dit.latent_channels != self.autoencoder.latent_channels {
            return Err(Error::Config(format!(
                "dit.latent_channels {} must equal autoencoder.latent_channels {}",
                self.dit.latent_channels, self.autoencoder.latent_channels
            )));
        }
        if self.discriminator.fft_sizes.len() != 5 {
            return Err(Error::Config("discriminator.fft_sizes needs exactly five entries".into()));
        }
        Ok(())
    }
}
