//! Short-time Fourier transforms.
//!
//! Two routes share one framing convention: a differentiable tensor route used
//! by training losses and discriminators, and a plain `f64` route used by the
//! evaluation metrics. Frames are centered (signal zero-padded by `n_fft / 2`
//! on both sides), the periodic Hann window of `win_length` samples sits in
//! the middle of each `n_fft` frame, and there are `1 + L / hop` frames.

use candle_core::{DType, Device, Tensor, D};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::nn::ops;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftParams {
    pub n_fft: usize,
    pub hop: usize,
    pub win_length: usize,
}

impl StftParams {
    pub fn new(n_fft: usize, hop: usize, win_length: usize) -> Result<Self> {
        if n_fft == 0 || hop == 0 || win_length == 0 || win_length > n_fft {
            return Err(Error::Config(format!(
                "invalid stft resolution n_fft={n_fft} hop={hop} win={win_length}"
            )));
        }
        Ok(Self {
            n_fft,
            hop,
            win_length,
        })
    }

    /// Hop of a quarter frame, window equal to the frame.
    pub fn quarter_hop(n_fft: usize) -> Self {
        Self {
            n_fft,
            hop: (n_fft / 4).max(1),
            win_length: n_fft,
        }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    /// Window of length `n_fft` with the Hann window centered inside it.
    pub fn padded_window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n_fft];
        let offset = (self.n_fft - self.win_length) / 2;
        for (i, v) in hann(self.win_length).into_iter().enumerate() {
            w[offset + i] = v;
        }
        w
    }

    fn frame_starts(&self, len: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.frames(len)).map(move |f| f * self.hop)
    }

    fn padded_len(&self, len: usize) -> usize {
        // room for the last frame plus the left pad
        (self.frames(len) - 1) * self.hop + self.n_fft
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Differentiable complex STFT of `x: (B, C, L)`; returns `(re, im)` each
/// shaped `(B, C, frames, bins)`.
pub fn stft(x: &Tensor, p: &StftParams) -> Result<(Tensor, Tensor)> {
    let len = x.dim(D::Minus1)?;
    let left = p.n_fft / 2;
    let total = p.padded_len(len);
    let right = total.saturating_sub(len + left);
    let padded = x.pad_with_zeros(D::Minus1, left, right)?;
    let spec = ops::framed_rfft(&padded, &p.padded_window(), p.hop, p.frames(len))?;
    let bins = p.bins();
    Ok((spec.narrow(3, 0, bins)?, spec.narrow(3, bins, bins)?))
}

/// `sqrt(max(re² + im², eps))`.
pub fn magnitude(re: &Tensor, im: &Tensor, eps: f64) -> Result<Tensor> {
    let power = (re.sqr()? + im.sqr()?)?;
    Ok(power.maximum(eps)?.sqrt()?)
}

/// Magnitude spectrogram `frames × bins` of a single channel, plain `f64`.
pub fn stft_magnitudes(signal: &[f64], p: &StftParams, eps: f64) -> Vec<Vec<f64>> {
    let len = signal.len();
    let left = p.n_fft / 2;
    let window = p.padded_window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(p.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); p.n_fft];
    p.frame_starts(len)
        .map(|start| {
            for (j, b) in buf.iter_mut().enumerate() {
                let pos = (start + j) as isize - left as isize;
                let v = if pos >= 0 && (pos as usize) < len {
                    signal[pos as usize]
                } else {
                    0.0
                };
                *b = Complex::new(v * window[j], 0.0);
            }
            fft.process(&mut buf);
            buf[..p.bins()]
                .iter()
                .map(|z| z.norm_sqr().max(eps).sqrt())
                .collect()
        })
        .collect()
}

fn hz_to_mel_htk(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz_htk(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// HTK-style triangular mel filterbank, `n_mels × bins`.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize, f_min: f64, f_max: f64) -> Vec<Vec<f64>> {
    let bins = n_fft / 2 + 1;
    let bin_hz: Vec<f64> = (0..bins)
        .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
        .collect();
    let (m_lo, m_hi) = (hz_to_mel_htk(f_min), hz_to_mel_htk(f_max));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz_htk(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            bin_hz
                .iter()
                .map(|&f| {
                    let up = (f - lo) / (center - lo);
                    let down = (hi - f) / (hi - center);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// A-weighting magnitude response, normalized to unity at 1 kHz.
pub fn a_weighting(f: f64) -> f64 {
    let ra = |f: f64| {
        let f2 = f * f;
        12194f64.powi(2) * f2 * f2
            / ((f2 + 20.6f64.powi(2))
                * ((f2 + 107.7f64.powi(2)) * (f2 + 737.9f64.powi(2))).sqrt()
                * (f2 + 12194f64.powi(2)))
    };
    ra(f) / ra(1000.0)
}

/// Linear-phase FIR approximating A-weighting (frequency sampling on a dense
/// grid, Hann-windowed). `taps` must be odd.
pub fn a_weighting_fir(sample_rate: u32, taps: usize) -> Vec<f64> {
    let grid = 4096usize;
    let half = taps / 2;
    let response: Vec<f64> = (0..=grid / 2)
        .map(|k| a_weighting(k as f64 * sample_rate as f64 / grid as f64))
        .collect();
    let window = hann(taps + 1);
    (0..taps)
        .map(|i| {
            let n = i as f64 - half as f64;
            let mut acc = response[0];
            for (k, h) in response.iter().enumerate().skip(1) {
                let w = if k == grid / 2 { 1.0 } else { 2.0 };
                acc += w * h * (2.0 * std::f64::consts::PI * k as f64 * n / grid as f64).cos();
            }
            acc / grid as f64 * window[i + 1].max(0.0)
        })
        .collect()
}

/// Apply a fixed odd-length FIR to every channel of `(B, C, L)`, output
/// aligned with the input.
pub fn fir_filter(x: &Tensor, taps: &[f64]) -> Result<Tensor> {
    Ok(ops::fir_same(x, taps)?)
}

/// Convenience for tests and metrics: a `(1, 1, L)` tensor from samples.
pub fn signal_tensor(samples: &[f64], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(samples.to_vec(), (1, 1, samples.len()), &Device::Cpu)?.to_dtype(dtype)?)
}
