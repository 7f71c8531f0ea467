//! Noise schedule, v-objective algebra, DPM-Solver++ sampling and generation.

use std::f64::consts::FRAC_PI_2;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{trim_trailing_silence, Waveform};
use crate::autoencoder::Autoencoder;
use crate::conditioning::{batch_text, TextEmbedder, TextTokens, TimingCondition, MAX_SECONDS_TOTAL};
use crate::dit::{CondInput, Dit};
use crate::error::{Error, Result};
use crate::nn::params::randn;

/// Sampler times stay inside `[T_MIN, 1 - T_MIN]` so neither alpha nor sigma
/// reaches zero and the log-SNR stays finite.
pub const T_MIN: f64 = 1e-4;

/// Latent frames sampled per generation.
pub const GENERATION_FRAMES: usize = 1024;

/// Trailing-silence trim applied to generated audio.
pub const TRIM_THRESHOLD_DB: f64 = -60.0;
pub const TRIM_WINDOW_MS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
}

impl NoiseSchedule {
    pub fn cosine() -> Self {
        Self { kind: ScheduleKind::Cosine }
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            // cos(pi/2) rounds to 6e-17; pin the endpoint so t = 1 is pure noise
            ScheduleKind::Cosine if t >= 1.0 => 0.0,
            ScheduleKind::Cosine => (FRAC_PI_2 * t).cos(),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => (FRAC_PI_2 * t).sin(),
        }
    }

    /// `ln(alpha / sigma)`.
    pub fn log_snr(&self, t: f64) -> f64 {
        (self.alpha(t) / self.sigma(t)).ln()
    }

    /// Inverse of [`NoiseSchedule::log_snr`].
    pub fn t_from_log_snr(&self, lambda: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => (-lambda).exp().atan() / FRAC_PI_2,
        }
    }
}

/// `x_t = alpha x0 + sigma eps`.
pub fn noise(x0: &Tensor, eps: &Tensor, t: f64, s: &NoiseSchedule) -> Result<Tensor> {
    combine(x0, s.alpha(t), eps, s.sigma(t))
}

/// `v = alpha eps - sigma x0`.
pub fn v_target(x0: &Tensor, eps: &Tensor, t: f64, s: &NoiseSchedule) -> Result<Tensor> {
    combine(eps, s.alpha(t), x0, -s.sigma(t))
}

/// `x0 = alpha x_t - sigma v`.
pub fn x0_from_v(x_t: &Tensor, v: &Tensor, t: f64, s: &NoiseSchedule) -> Result<Tensor> {
    combine(x_t, s.alpha(t), v, -s.sigma(t))
}

/// `eps = sigma x_t + alpha v`.
pub fn eps_from_v(x_t: &Tensor, v: &Tensor, t: f64, s: &NoiseSchedule) -> Result<Tensor> {
    combine(x_t, s.sigma(t), v, s.alpha(t))
}

/// `uncond + scale (cond - uncond)`.
pub fn cfg_combine(cond_v: &Tensor, uncond_v: &Tensor, scale: f64) -> Result<Tensor> {
    check_same(cond_v, uncond_v)?;
    if scale == 1.0 {
        return Ok(cond_v.clone());
    }
    Ok((uncond_v + ((cond_v - uncond_v)? * scale)?)?)
}

fn combine(a: &Tensor, ca: f64, b: &Tensor, cb: f64) -> Result<Tensor> {
    check_same(a, b)?;
    Ok(((a * ca)? + (b * cb)?)?)
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Per-example `(B, 1, 1)` alpha and sigma for a batch of times.
pub fn alpha_sigma_batch(ts: &[f64], s: &NoiseSchedule, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let a: Vec<f64> = ts.iter().map(|&t| s.alpha(t)).collect();
    let g: Vec<f64> = ts.iter().map(|&t| s.sigma(t)).collect();
    let a = Tensor::from_vec(a, (ts.len(), 1, 1), device)?.to_dtype(dtype)?;
    let g = Tensor::from_vec(g, (ts.len(), 1, 1), device)?.to_dtype(dtype)?;
    Ok((a, g))
}

/// Noised latents and v targets for a batch with one time per example.
pub fn noise_and_target_batch(x0: &Tensor, eps: &Tensor, ts: &[f64], s: &NoiseSchedule) -> Result<(Tensor, Tensor)> {
    check_same(x0, eps)?;
    if x0.dim(0)? != ts.len() {
        return Err(Error::shape(format!("batch {} with {} times", x0.dim(0)?, ts.len())));
    }
    let (a, g) = alpha_sigma_batch(ts, s, x0.dtype(), x0.device())?;
    let x_t = (x0.broadcast_mul(&a)? + eps.broadcast_mul(&g)?)?;
    let v = (eps.broadcast_mul(&a)? - x0.broadcast_mul(&g)?)?;
    Ok((x_t, v))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub order: usize,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            cfg_scale: 7.0,
            order: 2,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler steps must be at least 1".into()));
        }
        if !(1..=2).contains(&self.order) {
            return Err(Error::Config(format!("sampler order {} not in {{1, 2}}", self.order)));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::Config("cfg_scale must be finite".into()));
        }
        Ok(())
    }
}

/// A v-predictor with a conditional and a null-conditioned branch.
pub trait VPredictor {
    fn v_cond(&self, x_t: &Tensor, t: f64) -> Result<Tensor>;
    fn v_uncond(&self, x_t: &Tensor, t: f64) -> Result<Tensor>;
}

/// Times from `1 - T_MIN` down to `T_MIN`, uniform in log-SNR. Has
/// `steps + 1` entries.
pub fn time_grid(steps: usize, s: &NoiseSchedule) -> Vec<f64> {
    let l0 = s.log_snr(1.0 - T_MIN);
    let l1 = s.log_snr(T_MIN);
    (0..=steps)
        .map(|i| s.t_from_log_snr(l0 + (l1 - l0) * i as f64 / steps as f64))
        .collect()
}

fn guided_v(model: &dyn VPredictor, x: &Tensor, t: f64, scale: f64) -> Result<Tensor> {
    let cond = model.v_cond(x, t)?;
    if scale == 1.0 {
        return Ok(cond);
    }
    cfg_combine(&cond, &model.v_uncond(x, t)?, scale)
}

fn ensure_finite(x: &Tensor, step: usize) -> Result<()> {
    let total = x.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    let sq = x.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    if !total.is_finite() || !sq.is_finite() {
        return Err(Error::NonFinite {
            step,
            context: "model output".into(),
        });
    }
    Ok(())
}

/// Runs shorter than this use first order on the final step.
pub const LOWER_ORDER_FINAL_BELOW: usize = 15;

/// Multistep DPM-Solver++ in the data-prediction form, starting from `x_init`
/// at time `1 - T_MIN`.
pub fn dpm_solver_pp_from(model: &dyn VPredictor, cfg: &SamplerConfig, s: &NoiseSchedule, x_init: &Tensor) -> Result<Tensor> {
    cfg.validate()?;
    let ts = time_grid(cfg.steps, s);
    let mut x = x_init.clone();
    let mut prev: Option<(Tensor, f64)> = None;
    for i in 1..ts.len() {
        let (t_prev, t) = (ts[i - 1], ts[i]);
        let v = guided_v(model, &x, t_prev, cfg.cfg_scale)?;
        ensure_finite(&v, i - 1)?;
        let d_now = x0_from_v(&x, &v, t_prev, s)?;
        let h = s.log_snr(t) - s.log_snr(t_prev);
        // short runs finish with a first-order step
        let last_low = cfg.steps < LOWER_ORDER_FINAL_BELOW && i == ts.len() - 1;
        let d = match (&prev, cfg.order) {
            (Some((d_old, h_old)), 2) if !last_low => {
                let r = h_old / h;
                ((&d_now * (1.0 + 0.5 / r))? - (d_old * (0.5 / r))?)?
            }
            _ => d_now.clone(),
        };
        let ratio = s.sigma(t) / s.sigma(t_prev);
        let coef = -s.alpha(t) * (-h).exp_m1();
        x = ((&x * ratio)? + (d * coef)?)?;
        prev = Some((d_now, h));
    }
    Ok(x)
}

/// Draws the initial noise from `cfg.rng_seed` and runs the sampler.
pub fn dpm_solver_pp(
    model: &dyn VPredictor,
    cfg: &SamplerConfig,
    s: &NoiseSchedule,
    shape: &[usize],
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let x = randn(&mut rng, shape, dtype, device)?;
    dpm_solver_pp_from(model, cfg, s, &x)
}

/// The DiT with a fixed prompt and its null counterpart.
pub struct DitPredictor<'a> {
    pub dit: &'a Dit,
    pub cond: CondInput,
    pub null: CondInput,
}

impl<'a> DitPredictor<'a> {
    pub fn new(dit: &'a Dit, text: &TextTokens, timing: TimingCondition, dtype: DType, device: &Device) -> Result<Self> {
        let (t, m) = batch_text(std::slice::from_ref(text), dtype, device)?;
        let null = TextTokens::null(text.dim());
        let (nt, nm) = batch_text(&[null], dtype, device)?;
        Ok(Self {
            dit,
            cond: CondInput {
                text: t,
                text_mask: m,
                timing: vec![timing],
            },
            null: CondInput {
                text: nt,
                text_mask: nm,
                timing: vec![timing],
            },
        })
    }
}

impl VPredictor for DitPredictor<'_> {
    fn v_cond(&self, x_t: &Tensor, t: f64) -> Result<Tensor> {
        self.dit.forward(x_t, &[t], &self.cond)
    }

    fn v_uncond(&self, x_t: &Tensor, t: f64) -> Result<Tensor> {
        self.dit.forward(x_t, &[t], &self.null)
    }
}

pub struct Models<'a> {
    pub autoencoder: &'a Autoencoder,
    pub dit: &'a Dit,
    pub embedder: &'a dyn TextEmbedder,
}

/// Latent chunk size used by [`generate`] before adding context.
pub const DECODE_CHUNK_CORE: usize = 64;

/// Samples `(1, latent_channels, frames)` latents for a prompt.
pub fn sample_latents(prompt: &str, seconds_total: f64, sampler: &SamplerConfig, models: &Models, frames: usize) -> Result<Tensor> {
    if !(seconds_total > 0.0 && seconds_total <= MAX_SECONDS_TOTAL) {
        return Err(Error::invalid(format!(
            "seconds_total {seconds_total} outside (0, {MAX_SECONDS_TOTAL}]"
        )));
    }
    let device = Device::Cpu;
    let dtype = DType::F32;
    let text = models.embedder.embed(prompt)?;
    let timing = TimingCondition::new(0.0, seconds_total)?;
    let predictor = DitPredictor::new(models.dit, &text, timing, dtype, &device)?;
    let shape = [1, models.dit.config().latent_channels, frames];
    dpm_solver_pp(&predictor, sampler, &NoiseSchedule::cosine(), &shape, dtype, &device)
}

/// Chunked decode with enough context that the result equals a full decode.
pub fn decode_latents(ae: &Autoencoder, z: &Tensor) -> Result<Waveform> {
    let overlap = ae.receptive_field_latents();
    let audio = ae.chunked_decode(z, DECODE_CHUNK_CORE + 2 * overlap, overlap)?;
    Waveform::from_tensor(&audio, ae.config().sample_rate)
}

/// Text to stereo audio with `frames` latent frames, trimmed of trailing
/// silence.
pub fn generate_frames(prompt: &str, seconds_total: f64, sampler: &SamplerConfig, models: &Models, frames: usize) -> Result<Waveform> {
    let z = sample_latents(prompt, seconds_total, sampler, models, frames)?;
    let w = decode_latents(models.autoencoder, &z)?;
    trim_trailing_silence(&w, TRIM_THRESHOLD_DB, TRIM_WINDOW_MS)
}

pub fn generate(prompt: &str, seconds_total: f64, sampler: &SamplerConfig, models: &Models) -> Result<Waveform> {
    generate_frames(prompt, seconds_total, sampler, models, GENERATION_FRAMES)
}
