//! Latent-diffusion text-to-audio pipeline.
//!
//! Stereo 44.1 kHz audio is compressed by a convolutional VAE into a 64-channel
//! latent at 44100/2048 ≈ 21.5 Hz. A diffusion transformer trained with the
//! v-objective generates those latents from text and timing conditioning and
//! is sampled with multistep DPM-Solver++ under classifier-free guidance. The
//! crate also carries the data-curation helpers (prompt construction, music
//! detection, embedding dedup, memorization scans) and the evaluation metrics.

pub mod audio;
pub mod autoencoder;
pub mod conditioning;
pub mod config;
pub mod container;
pub mod datapipe;
pub mod diffusion;
pub mod dit;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod nn;
pub mod spectral;
pub mod trainer;

pub use audio::Waveform;
pub use error::{Error, Result};

/// Number of latent channels produced by the autoencoder.
pub const LATENT_CHANNELS: usize = 64;
