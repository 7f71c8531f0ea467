use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::spectral::{self, StftParams};

const MAG_EPS: f64 = 1e-8;
const FIR_TAPS: usize = 101;

/// Multi-resolution STFT loss settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MrstftConfig {
    pub fft_sizes: Vec<usize>,
    pub hop_sizes: Vec<usize>,
    pub window_sizes: Vec<usize>,
    pub lr_weight: f64,
    pub perceptual_weighting: bool,
    pub sample_rate: u32,
}

impl Default for MrstftConfig {
    fn default() -> Self {
        let fft_sizes = vec![2048, 1024, 512, 256, 128, 64];
        Self {
            hop_sizes: fft_sizes.iter().map(|n| n / 4).collect(),
            window_sizes: fft_sizes.clone(),
            fft_sizes,
            lr_weight: 0.5,
            perceptual_weighting: true,
            sample_rate: 44100,
        }
    }
}

impl MrstftConfig {
    /// Quarter-hop resolutions for the given FFT sizes.
    pub fn with_fft_sizes(fft_sizes: &[usize]) -> Self {
        Self {
            fft_sizes: fft_sizes.to_vec(),
            hop_sizes: fft_sizes.iter().map(|n| (n / 4).max(1)).collect(),
            window_sizes: fft_sizes.to_vec(),
            ..Self::default()
        }
    }

    pub fn resolutions(&self) -> Result<Vec<StftParams>> {
        let n = self.fft_sizes.len();
        if n == 0 || self.hop_sizes.len() != n || self.window_sizes.len() != n {
            return Err(Error::Config(
                "mrstft fft/hop/window lists must be nonempty and of equal length".into(),
            ));
        }
        (0..n)
            .map(|i| {
                let (f, h, w) = (self.fft_sizes[i], self.hop_sizes[i], self.window_sizes[i]);
                if h > w {
                    return Err(Error::Config(format!("hop {h} exceeds window {w}")));
                }
                StftParams::new(f, h, w)
            })
            .collect()
    }
}

fn resolution_loss(reference: &Tensor, estimate: &Tensor, p: &StftParams) -> Result<Tensor> {
    let (rr, ri) = spectral::stft(reference, p)?;
    let (er, ei) = spectral::stft(estimate, p)?;
    let ref_mag = spectral::magnitude(&rr, &ri, MAG_EPS)?;
    let est_mag = spectral::magnitude(&er, &ei, MAG_EPS)?;
    let diff = (&ref_mag - &est_mag)?;
    let sc = (diff.sqr()?.sum_all()?.sqrt()? / ref_mag.sqr()?.sum_all()?.sqrt()?)?;
    let log_mag = (ref_mag.log()? - est_mag.log()?)?.abs()?.mean_all()?;
    Ok((sc + log_mag)?)
}

/// Mean over resolutions of spectral convergence plus log-magnitude L1,
/// for `(B, C, L)` signals.
pub fn mrstft(reference: &Tensor, estimate: &Tensor, cfg: &MrstftConfig) -> Result<Tensor> {
    if reference.dims() != estimate.dims() {
        return Err(Error::shape(format!(
            "mrstft: reference {:?} vs estimate {:?}",
            reference.dims(),
            estimate.dims()
        )));
    }
    let (reference, estimate) = if cfg.perceptual_weighting {
        let taps = spectral::a_weighting_fir(cfg.sample_rate, FIR_TAPS);
        (spectral::fir_filter(reference, &taps)?, spectral::fir_filter(estimate, &taps)?)
    } else {
        (reference.clone(), estimate.clone())
    };
    let res = cfg.resolutions()?;
    let mut total: Option<Tensor> = None;
    for p in &res {
        let l = resolution_loss(&reference, &estimate, p)?;
        total = Some(match total {
            Some(t) => (t + l)?,
            None => l,
        });
    }
    Ok((total.expect("at least one resolution") / res.len() as f64)?)
}

fn mid_side(x: &Tensor) -> Result<Tensor> {
    let l = x.narrow(1, 0, 1)?;
    let r = x.narrow(1, 1, 1)?;
    let mid = ((&l + &r)? * 0.5)?;
    let side = ((&l - &r)? * 0.5)?;
    Ok(Tensor::cat(&[mid, side], 1)?)
}

/// `MRSTFT(M,S) + lr_weight · MRSTFT(L,R)` for stereo `(B, 2, L)` tensors.
pub fn mrstft_stereo(reference: &Tensor, estimate: &Tensor, cfg: &MrstftConfig) -> Result<Tensor> {
    if reference.dim(1)? != 2 {
        return Err(Error::shape("mrstft_stereo expects 2 channels"));
    }
    let ms = mrstft(&mid_side(reference)?, &mid_side(estimate)?, cfg)?;
    if cfg.lr_weight == 0.0 {
        return Ok(ms);
    }
    let lr = mrstft(reference, estimate, cfg)?;
    Ok((ms + (lr * cfg.lr_weight)?)?)
}

/// Stereo reconstruction loss between two waveforms.
pub fn mrstft_loss(reference: &Waveform, estimate: &Waveform, cfg: &MrstftConfig) -> Result<f64> {
    if reference.frames() != estimate.frames() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {} frames",
            reference.frames(),
            estimate.frames()
        )));
    }
    if reference.sample_rate() != estimate.sample_rate() {
        return Err(Error::invalid("sample rate mismatch"));
    }
    let r = reference.clone().into_stereo()?.to_tensor(DType::F64, &Device::Cpu)?;
    let e = estimate.clone().into_stereo()?.to_tensor(DType::F64, &Device::Cpu)?;
    Ok(mrstft_stereo(&r, &e, cfg)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn noise(seed: u64, shape: (usize, usize, usize), scale: f64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (crate::nn::randn(&mut rng, shape, DType::F64, &Device::Cpu).unwrap() * scale).unwrap()
    }

    fn small() -> MrstftConfig {
        MrstftConfig::with_fft_sizes(&[64, 32, 16])
    }

    #[test]
    fn identical_signals_score_zero() {
        let x = noise(1, (1, 2, 256), 0.3);
        let v = mrstft_stereo(&x, &x, &MrstftConfig::default()).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn noise_vs_silence_grows_with_amplitude() {
        let silence = Tensor::zeros((1, 2, 512), DType::F64, &Device::Cpu).unwrap();
        let mut last = 0.0;
        for amp in [0.01, 0.1, 1.0] {
            let n = noise(2, (1, 2, 512), amp);
            let v = mrstft_stereo(&silence, &n, &small()).unwrap().to_scalar::<f64>().unwrap();
            assert!(v > last, "amp {amp}: {v} <= {last}");
            last = v;
        }
    }

    #[test]
    fn lr_term_is_weighted_by_half() {
        // (a, b) as the M/S views of one pair and as the L/R views of another
        // must contribute in the ratio 1 : 0.5.
        let a_ref = noise(3, (1, 2, 300), 0.5);
        let a_est = (&a_ref + noise(4, (1, 2, 300), 0.1)).unwrap();
        let to_lr = |ms: &Tensor| {
            let m = ms.narrow(1, 0, 1).unwrap();
            let s = ms.narrow(1, 1, 1).unwrap();
            Tensor::cat(&[(&m + &s).unwrap(), (&m - &s).unwrap()], 1).unwrap()
        };
        let cfg = MrstftConfig {
            perceptual_weighting: false,
            ..small()
        };
        let only_ms = MrstftConfig { lr_weight: 0.0, ..cfg.clone() };
        // pair 1: L/R chosen so that M/S = (a_ref, a_est channels)
        let ms_term = mrstft_stereo(&to_lr(&a_ref), &to_lr(&a_est), &only_ms).unwrap();
        let full2 = mrstft_stereo(&a_ref, &a_est, &cfg).unwrap();
        let ms2 = mrstft_stereo(&a_ref, &a_est, &only_ms).unwrap();
        let lr_term = (full2 - ms2).unwrap();
        let ratio = lr_term.to_scalar::<f64>().unwrap() / ms_term.to_scalar::<f64>().unwrap();
        assert!((ratio - 0.5).abs() < 1e-12, "ratio {ratio}");
    }

    #[test]
    fn loss_depends_only_on_magnitudes() {
        // negation rotates every STFT bin by pi and keeps magnitudes
        let r = noise(5, (1, 2, 400), 0.4);
        let e = (&r + noise(6, (1, 2, 400), 0.2)).unwrap();
        let a = mrstft_stereo(&r, &e, &small()).unwrap().to_scalar::<f64>().unwrap();
        let b = mrstft_stereo(&r, &e.neg().unwrap(), &small()).unwrap().to_scalar::<f64>().unwrap();
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn rejects_bad_resolutions() {
        let cfg = MrstftConfig {
            hop_sizes: vec![1],
            ..MrstftConfig::default()
        };
        assert!(cfg.resolutions().is_err());
    }
}
