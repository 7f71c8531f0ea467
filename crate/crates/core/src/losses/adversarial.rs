use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::nn::{layers::leaky_relu, ConvSpec, Params, WnConv1d};
use crate::spectral::{self, StftParams};

const NUM_DISCRIMINATORS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscConfig {
    /// One FFT size per discriminator; exactly five.
    pub fft_sizes: Vec<usize>,
    pub hidden: usize,
    pub layers: usize,
    pub slope: f64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            fft_sizes: vec![2048, 1024, 512, 256, 128],
            hidden: 32,
            layers: 3,
            slope: 0.2,
        }
    }
}

/// Discriminator on the complex STFT of a stereo signal. Real and imaginary
/// parts of both channels are stacked as `4 · bins` input channels and the
/// network convolves along time.
pub struct StftDiscriminator {
    stft: StftParams,
    convs: Vec<WnConv1d>,
    out: WnConv1d,
    slope: f64,
}

impl StftDiscriminator {
    pub fn new(n_fft: usize, cfg: &DiscConfig, p: &Params) -> Result<Self> {
        let stft = StftParams::quarter_hop(n_fft);
        let mut convs = Vec::with_capacity(cfg.layers);
        let mut in_c = 4 * stft.bins();
        for i in 0..cfg.layers {
            let dilation = 1 << i;
            convs.push(WnConv1d::new(in_c, cfg.hidden, ConvSpec::same(3, dilation), &p.pp(format!("conv{i}")))?);
            in_c = cfg.hidden;
        }
        let out = WnConv1d::new(in_c, 1, ConvSpec::same(3, 1), &p.pp("out"))?;
        Ok(Self {
            stft,
            convs,
            out,
            slope: cfg.slope,
        })
    }

    /// Returns `(logits, features)` for `x: (B, 2, L)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (re, im) = spectral::stft(x, &self.stft)?;
        // (B, C, frames, bins) -> (B, C·bins, frames) for each part
        let flat = |t: &Tensor| -> Result<Tensor> {
            let (b, c, f, k) = t.dims4()?;
            Ok(t.permute((0, 1, 3, 2))?.reshape((b, c * k, f))?)
        };
        let mut h = Tensor::cat(&[flat(&re)?, flat(&im)?], 1)?;
        let mut feats = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?, self.slope)?;
            feats.push(h.clone());
        }
        Ok((self.out.forward(&h)?, feats))
    }
}

/// Five STFT discriminators at different resolutions.
pub struct DiscriminatorBank {
    pub discriminators: Vec<StftDiscriminator>,
}

impl DiscriminatorBank {
    pub fn new(cfg: &DiscConfig, p: &Params) -> Result<Self> {
        if cfg.fft_sizes.len() != NUM_DISCRIMINATORS {
            return Err(Error::Config(format!(
                "discriminator bank needs exactly {NUM_DISCRIMINATORS} fft sizes, got {}",
                cfg.fft_sizes.len()
            )));
        }
        let discriminators = cfg
            .fft_sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| StftDiscriminator::new(n, cfg, &p.pp(format!("disc{i}"))))
            .collect::<Result<_>>()?;
        Ok(Self { discriminators })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Vec<(Tensor, Vec<Tensor>)>> {
        self.discriminators.iter().map(|d| d.forward(x)).collect()
    }
}

pub struct AdvLosses {
    /// Hinge discriminator loss; gradients reach only the discriminators.
    pub d_loss: Tensor,
    /// Hinge generator loss.
    pub g_loss: Tensor,
    /// Mean absolute difference of discriminator features, real vs fake.
    pub fm_loss: Tensor,
}

fn mean_of(terms: Vec<Tensor>) -> Result<Tensor> {
    let n = terms.len() as f64;
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / n)?)
}

/// Hinge losses and feature matching for `(B, 2, L)` tensors.
pub fn adversarial_losses(real: &Tensor, fake: &Tensor, bank: &DiscriminatorBank) -> Result<AdvLosses> {
    if real.dims() != fake.dims() {
        return Err(Error::shape(format!("real {:?} vs fake {:?}", real.dims(), fake.dims())));
    }
    let real_out = bank.forward(&real.detach())?;
    let fake_detached = bank.forward(&fake.detach())?;
    let fake_out = bank.forward(fake)?;

    let mut d_terms = Vec::new();
    let mut g_terms = Vec::new();
    let mut fm_terms = Vec::new();
    for ((r, fd), f) in real_out.iter().zip(&fake_detached).zip(&fake_out) {
        let real_term = (1.0 - &r.0)?.relu()?.mean_all()?;
        let fake_term = (&fd.0 + 1.0)?.relu()?.mean_all()?;
        d_terms.push((real_term + fake_term)?);
        g_terms.push((1.0 - &f.0)?.relu()?.mean_all()?);
        for (fr, ff) in r.1.iter().zip(&f.1) {
            fm_terms.push((fr.detach() - ff)?.abs()?.mean_all()?);
        }
    }
    Ok(AdvLosses {
        d_loss: mean_of(d_terms)?,
        g_loss: mean_of(g_terms)?,
        fm_loss: mean_of(fm_terms)?,
    })
}

/// Scalar `(d_loss, g_loss, fm_loss)` for two waveforms.
pub fn adversarial_step(real: &Waveform, fake: &Waveform, bank: &DiscriminatorBank) -> Result<(f64, f64, f64)> {
    if real.frames() != fake.frames() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {} frames",
            real.frames(),
            fake.frames()
        )));
    }
    let dtype = bank
        .discriminators
        .first()
        .map(|d| d.out.direction.dtype())
        .unwrap_or(DType::F32);
    let r = real.clone().into_stereo()?.to_tensor(dtype, &Device::Cpu)?;
    let f = fake.clone().into_stereo()?.to_tensor(dtype, &Device::Cpu)?;
    let l = adversarial_losses(&r, &f, bank)?;
    let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    Ok((s(&l.d_loss)?, s(&l.g_loss)?, s(&l.fm_loss)?))
}
