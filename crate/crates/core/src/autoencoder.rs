//! Convolutional variational autoencoder between stereo audio and 64-channel
//! latents.
//!
//! The encoder is a stack of ResNet-style units with dilated convolutions and
//! Snake activations, each block ending in a strided convolution. The decoder
//! mirrors it with transposed convolutions. Every convolution is weight
//! normalized and zero-padded with "same" framing, and the decoder output has
//! no saturating nonlinearity.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::nn::{randn, ConvSpec, Params, Snake, WnConv1d, WnConvTranspose1d};

pub const TOTAL_STRIDE: usize = 2048;
pub const NUM_BLOCKS: usize = 5;
const LOGVAR_MIN: f64 = -30.0;
const LOGVAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    pub block_strides: Vec<usize>,
    pub block_channels: Vec<usize>,
    pub resnet_layers_per_block: usize,
    pub dilation_schedule: Vec<usize>,
    pub latent_channels: usize,
    pub audio_channels: usize,
    /// Kernel of the dilated convolution inside each residual unit.
    pub res_kernel: usize,
    /// Kernel of the input and output convolutions.
    pub io_kernel: usize,
    /// Kernel of the convolution producing mean and log-variance.
    pub bottleneck_kernel: usize,
    /// Transposed-convolution kernel as a multiple of its stride.
    pub upsample_kernel_factor: usize,
    pub sample_rate: u32,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            block_strides: vec![2, 4, 4, 8, 8],
            block_channels: vec![32, 64, 128, 256, 512],
            resnet_layers_per_block: 2,
            dilation_schedule: vec![1, 3, 9],
            latent_channels: crate::LATENT_CHANNELS,
            audio_channels: 2,
            res_kernel: 7,
            io_kernel: 7,
            bottleneck_kernel: 3,
            upsample_kernel_factor: 2,
            sample_rate: 44100,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.block_strides.len() != NUM_BLOCKS || self.block_channels.len() != NUM_BLOCKS {
            return bad(format!("autoencoder needs {NUM_BLOCKS} strides and {NUM_BLOCKS} widths"));
        }
        let product: usize = self.block_strides.iter().product();
        if product != TOTAL_STRIDE {
            return bad(format!("block strides multiply to {product}, expected {TOTAL_STRIDE}"));
        }
        if self.latent_channels != crate::LATENT_CHANNELS {
            return bad(format!("latent_channels must be {}", crate::LATENT_CHANNELS));
        }
        if self.block_channels.contains(&0) || self.block_strides.contains(&0) {
            return bad("zero stride or width".into());
        }
        if self.dilation_schedule.is_empty() || self.dilation_schedule.contains(&0) {
            return bad("dilation schedule must be nonempty and positive".into());
        }
        if self.res_kernel == 0 || self.io_kernel == 0 || self.bottleneck_kernel == 0 {
            return bad("kernel sizes must be positive".into());
        }
        if self.upsample_kernel_factor == 0 || self.audio_channels == 0 {
            return bad("upsample_kernel_factor and audio_channels must be positive".into());
        }
        Ok(())
    }

    pub fn hop(&self) -> usize {
        self.block_strides.iter().product()
    }

    pub fn latent_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop() as f64
    }

    fn dilation(&self, j: usize) -> usize {
        self.dilation_schedule[j % self.dilation_schedule.len()]
    }
}

/// Posterior parameters, each `(B, latent_channels, T)`.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub log_variance: Tensor,
}

/// `z = mean + exp(log_variance / 2) · eps`, `eps` drawn from a seeded stream.
pub fn reparameterize(p: &GaussianParams, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = randn(&mut rng, p.mean.shape(), p.mean.dtype(), p.mean.device())?;
    Ok((&p.mean + (&p.log_variance * 0.5)?.exp()?.mul(&eps)?)?)
}

struct ResUnit {
    snake1: Snake,
    conv: WnConv1d,
    snake2: Snake,
    proj: WnConv1d,
}

impl ResUnit {
    fn new(ch: usize, kernel: usize, dilation: usize, p: &Params) -> Result<Self> {
        Ok(Self {
            snake1: Snake::new(ch, &p.pp("snake1"))?,
            conv: WnConv1d::new(ch, ch, ConvSpec::same(kernel, dilation), &p.pp("conv"))?,
            snake2: Snake::new(ch, &p.pp("snake2"))?,
            proj: WnConv1d::new(ch, ch, ConvSpec::same(1, 1), &p.pp("proj"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv.forward(&self.snake1.forward(x)?)?;
        let h = self.proj.forward(&self.snake2.forward(&h)?)?;
        Ok((x + h)?)
    }

    fn geometry(&self) -> Geom {
        Geom::Residual(vec![
            conv_geom(&self.conv),
            conv_geom(&self.proj),
        ])
    }
}

struct EncoderBlock {
    units: Vec<ResUnit>,
    snake: Snake,
    down: WnConv1d,
}

struct DecoderBlock {
    snake: Snake,
    up: WnConvTranspose1d,
    units: Vec<ResUnit>,
}

pub struct Encoder {
    conv_in: WnConv1d,
    blocks: Vec<EncoderBlock>,
    snake_out: Snake,
    conv_out: WnConv1d,
    latent_channels: usize,
}

pub struct Decoder {
    conv_in: WnConv1d,
    blocks: Vec<DecoderBlock>,
    snake_out: Snake,
    conv_out: WnConv1d,
}

fn res_units(cfg: &AutoencoderConfig, ch: usize, p: &Params) -> Result<Vec<ResUnit>> {
    (0..cfg.resnet_layers_per_block)
        .map(|j| ResUnit::new(ch, cfg.res_kernel, cfg.dilation(j), &p.pp(format!("res{j}"))))
        .collect()
}

impl Encoder {
    fn new(cfg: &AutoencoderConfig, p: &Params) -> Result<Self> {
        let c = &cfg.block_channels;
        let conv_in = WnConv1d::new(cfg.audio_channels, c[0], ConvSpec::same(cfg.io_kernel, 1), &p.pp("conv_in"))?;
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        for i in 0..NUM_BLOCKS {
            let bp = p.pp(format!("block{i}"));
            let in_c = if i == 0 { c[0] } else { c[i - 1] };
            blocks.push(EncoderBlock {
                units: res_units(cfg, in_c, &bp)?,
                snake: Snake::new(in_c, &bp.pp("snake"))?,
                down: WnConv1d::new(in_c, c[i], ConvSpec::downsample(cfg.block_strides[i]), &bp.pp("down"))?,
            });
        }
        Ok(Self {
            conv_in,
            blocks,
            snake_out: Snake::new(c[NUM_BLOCKS - 1], &p.pp("snake_out"))?,
            conv_out: WnConv1d::new(
                c[NUM_BLOCKS - 1],
                2 * cfg.latent_channels,
                ConvSpec::same(cfg.bottleneck_kernel, 1),
                &p.pp("conv_out"),
            )?,
            latent_channels: cfg.latent_channels,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<GaussianParams> {
        let mut h = self.conv_in.forward(x)?;
        for b in &self.blocks {
            for u in &b.units {
                h = u.forward(&h)?;
            }
            h = b.down.forward(&b.snake.forward(&h)?)?;
        }
        let h = self.conv_out.forward(&self.snake_out.forward(&h)?)?;
        let mean = h.narrow(1, 0, self.latent_channels)?;
        let log_variance = h
            .narrow(1, self.latent_channels, self.latent_channels)?
            .clamp(LOGVAR_MIN, LOGVAR_MAX)?;
        Ok(GaussianParams { mean, log_variance })
    }
}

impl Decoder {
    fn new(cfg: &AutoencoderConfig, p: &Params) -> Result<Self> {
        let c = &cfg.block_channels;
        let top = c[NUM_BLOCKS - 1];
        let conv_in = WnConv1d::new(cfg.latent_channels, top, ConvSpec::same(cfg.io_kernel, 1), &p.pp("conv_in"))?;
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        for i in (0..NUM_BLOCKS).rev() {
            let bp = p.pp(format!("block{i}"));
            let out_c = if i == 0 { c[0] } else { c[i - 1] };
            let s = cfg.block_strides[i];
            blocks.push(DecoderBlock {
                snake: Snake::new(c[i], &bp.pp("snake"))?,
                up: WnConvTranspose1d::new(c[i], out_c, s, s * cfg.upsample_kernel_factor, &bp.pp("up"))?,
                units: res_units(cfg, out_c, &bp)?,
            });
        }
        Ok(Self {
            conv_in,
            blocks,
            snake_out: Snake::new(c[0], &p.pp("snake_out"))?,
            conv_out: WnConv1d::new(
                c[0],
                cfg.audio_channels,
                ConvSpec::same(cfg.io_kernel, 1).no_bias(),
                &p.pp("conv_out"),
            )?,
        })
    }

    fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(z)?;
        for b in &self.blocks {
            h = b.up.forward(&b.snake.forward(&h)?)?;
            for u in &b.units {
                h = u.forward(&h)?;
            }
        }
        self.conv_out.forward(&self.snake_out.forward(&h)?)
    }

    fn geometry(&self) -> Vec<Geom> {
        let mut g = vec![conv_geom(&self.conv_in)];
        for b in &self.blocks {
            g.push(Geom::Up {
                stride: b.up.stride,
                kernel: b.up.kernel_size,
                crop: b.up.crop_left(),
            });
            g.extend(b.units.iter().map(ResUnit::geometry));
        }
        g.push(conv_geom(&self.conv_out));
        g
    }
}

pub struct Autoencoder {
    cfg: AutoencoderConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Autoencoder {
    /// Builds (or binds to existing) parameters under `encoder.*` and `decoder.*`.
    pub fn new(cfg: AutoencoderConfig, p: &Params) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(&cfg, &p.pp("encoder"))?;
        let decoder = Decoder::new(&cfg, &p.pp("decoder"))?;
        Ok(Self { cfg, encoder, decoder })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.cfg
    }

    /// `x: (B, audio_channels, L)` with `L` a multiple of the total stride.
    pub fn encode(&self, x: &Tensor) -> Result<GaussianParams> {
        let (_, c, len) = x.dims3()?;
        if c != self.cfg.audio_channels {
            return Err(Error::shape(format!("expected {} channels, got {c}", self.cfg.audio_channels)));
        }
        if len == 0 || len % self.cfg.hop() != 0 {
            return Err(Error::invalid(format!(
                "input length {len} is not a positive multiple of {}",
                self.cfg.hop()
            )));
        }
        self.encoder.forward(x)
    }

    /// `z: (B, latent_channels, T)` to `(B, audio_channels, T · hop)`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _) = z.dims3()?;
        if c != self.cfg.latent_channels {
            return Err(Error::shape(format!("expected {} latent channels, got {c}", self.cfg.latent_channels)));
        }
        self.decoder.forward(z)
    }

    /// Decode in windows of `chunk_len` latents, of which `overlap` on each side
    /// are context whose audio is discarded.
    pub fn chunked_decode(&self, z: &Tensor, chunk_len: usize, overlap: usize) -> Result<Tensor> {
        if chunk_len <= 2 * overlap {
            return Err(Error::invalid(format!(
                "chunk_len {chunk_len} must exceed twice the overlap {overlap}"
            )));
        }
        let t = z.dim(D::Minus1)?;
        if chunk_len >= t {
            return self.decode(z);
        }
        let hop = self.cfg.hop();
        let core = chunk_len - 2 * overlap;
        let mut pieces = Vec::with_capacity(t.div_ceil(core));
        let mut start = 0;
        while start < t {
            let end = (start + core).min(t);
            let lo = start.saturating_sub(overlap);
            let hi = (end + overlap).min(t);
            let audio = self.decode(&z.narrow(D::Minus1, lo, hi - lo)?)?;
            pieces.push(audio.narrow(D::Minus1, (start - lo) * hop, (end - start) * hop)?);
            start = end;
        }
        Ok(Tensor::cat(&pieces, D::Minus1)?)
    }

    /// Encode a waveform whose length is a multiple of the hop.
    pub fn encode_waveform(&self, w: &Waveform, dtype: DType) -> Result<GaussianParams> {
        let x = w.clone().into_stereo()?.to_tensor(dtype, &Device::Cpu)?;
        self.encode(&x)
    }

    pub fn decode_to_waveform(&self, z: &Tensor) -> Result<Waveform> {
        let y = self.decode(z)?;
        Waveform::from_tensor(&y, self.cfg.sample_rate)
    }

    /// One-sided decoder receptive field of this model in latent frames.
    pub fn receptive_field_latents(&self) -> usize {
        receptive_field_of(&self.decoder.geometry(), self.cfg.hop())
    }
}

/// Geometry of one decoder operation, for receptive-field analysis.
#[derive(Debug, Clone)]
pub enum Geom {
    /// Stride-1 convolution; output `t` reads input `t - pad_left + j·dilation`.
    Conv {
        kernel: usize,
        dilation: usize,
        pad_left: usize,
    },
    /// Transposed convolution cropped by `crop` frames on the left.
    Up {
        stride: usize,
        kernel: usize,
        crop: usize,
    },
    /// `x + branch(x)`.
    Residual(Vec<Geom>),
}

fn conv_geom(c: &WnConv1d) -> Geom {
    Geom::Conv {
        kernel: c.kernel_size,
        dilation: c.dilation,
        pad_left: c.pad_left,
    }
}

struct Cone {
    /// Upsampling factor of the current signal relative to the latent rate.
    rate: i64,
    needed: usize,
}

impl Cone {
    /// Overlap needed so that `[lo, hi]` at the current rate lies inside the
    /// window of latent frame 0 widened by `needed` frames on each side.
    fn check(&mut self, lo: i64, hi: i64) {
        let left = (-lo).max(0);
        let right = (hi - (self.rate - 1)).max(0);
        let frames = |e: i64| (e + self.rate - 1) / self.rate;
        self.needed = self.needed.max(frames(left) as usize).max(frames(right) as usize);
    }

    fn back(&mut self, ops: &[Geom], mut lo: i64, mut hi: i64) -> (i64, i64) {
        for op in ops.iter().rev() {
            match op {
                Geom::Conv {
                    kernel,
                    dilation,
                    pad_left,
                } => {
                    lo -= *pad_left as i64;
                    hi += (dilation * (kernel - 1)) as i64 - *pad_left as i64;
                }
                Geom::Up { stride, kernel, crop } => {
                    let (s, k, c) = (*stride as i64, *kernel as i64, *crop as i64);
                    // full index p + c is written by inputs q with q·s ≤ p + c ≤ q·s + k - 1
                    lo = (lo + c - k + 1).div_euclid(s) + i64::from((lo + c - k + 1).rem_euclid(s) != 0);
                    hi = (hi + c).div_euclid(s);
                    self.rate /= s;
                }
                Geom::Residual(branch) => {
                    let (blo, bhi) = self.back(branch, lo, hi);
                    lo = lo.min(blo);
                    hi = hi.max(bhi);
                }
            }
            self.check(lo, hi);
        }
        (lo, hi)
    }
}

/// One-sided receptive field, in latent frames, of a decoder described by
/// `ops` whose total upsampling is `hop`. Every intermediate signal is
/// checked, since chunk edges are zero padded at every layer.
pub fn receptive_field_of(ops: &[Geom], hop: usize) -> usize {
    let mut cone = Cone {
        rate: hop as i64,
        needed: 0,
    };
    let (lo, hi) = cone.back(ops, 0, hop as i64 - 1);
    debug_assert_eq!(cone.rate, 1);
    cone.check(lo, hi);
    cone.needed
}

/// Decoder receptive field for a configuration, without building weights.
pub fn receptive_field_latents(cfg: &AutoencoderConfig) -> Result<usize> {
    cfg.validate()?;
    let conv = |k: usize, d: usize| {
        let s = ConvSpec::same(k, d);
        Geom::Conv {
            kernel: k,
            dilation: d,
            pad_left: s.pad_left,
        }
    };
    let mut ops = vec![conv(cfg.io_kernel, 1)];
    for i in (0..NUM_BLOCKS).rev() {
        let s = cfg.block_strides[i];
        let k = s * cfg.upsample_kernel_factor;
        ops.push(Geom::Up {
            stride: s,
            kernel: k,
            crop: (k - s) / 2,
        });
        for j in 0..cfg.resnet_layers_per_block {
            ops.push(Geom::Residual(vec![conv(cfg.res_kernel, cfg.dilation(j)), conv(1, 1)]));
        }
    }
    ops.push(conv(cfg.io_kernel, 1));
    Ok(receptive_field_of(&ops, cfg.hop()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn narrow_cfg() -> AutoencoderConfig {
        AutoencoderConfig {
            block_channels: vec![2, 2, 4, 4, 8],
            resnet_layers_per_block: 1,
            ..AutoencoderConfig::default()
        }
    }

    #[test]
    fn pointwise_decoder_has_zero_field() {
        let cfg = AutoencoderConfig {
            res_kernel: 1,
            io_kernel: 1,
            bottleneck_kernel: 1,
            upsample_kernel_factor: 1,
            ..narrow_cfg()
        };
        assert_eq!(receptive_field_latents(&cfg).unwrap(), 0);
    }

    #[test]
    fn single_transposed_conv_hand_traced() {
        // kernel 4, stride 2, crop 1: output p reads inputs floor((p-2)/2)+1 ..= floor((p+1)/2);
        // outputs 0 and 1 of frame 0 reach frames -1..=0 and 0..=1
        let ops = [Geom::Up {
            stride: 2,
            kernel: 4,
            crop: 1,
        }];
        assert_eq!(receptive_field_of(&ops, 2), 1);
    }

    #[test]
    fn analytic_matches_built_model() {
        let p = Params::new(0, DType::F32, &Device::Cpu);
        let ae = Autoencoder::new(narrow_cfg(), &p).unwrap();
        assert_eq!(ae.receptive_field_latents(), receptive_field_latents(&narrow_cfg()).unwrap());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = AutoencoderConfig::default();
        cfg.block_strides = vec![2, 4, 4, 8, 4];
        assert!(cfg.validate().is_err());
        let mut cfg = AutoencoderConfig::default();
        cfg.block_strides = vec![2, 4, 4, 64];
        assert!(cfg.validate().is_err());
        assert!(AutoencoderConfig::default().validate().is_ok());
        assert!((AutoencoderConfig::default().latent_rate() - 21.533).abs() < 1e-3);
    }

    #[test]
    fn encode_rejects_ragged_length() {
        let p = Params::new(0, DType::F32, &Device::Cpu);
        let ae = Autoencoder::new(narrow_cfg(), &p).unwrap();
        let x = Tensor::zeros((1, 2, 3000), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(ae.encode(&x), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn reparameterize_limits() {
        let dev = Device::Cpu;
        let mean = Tensor::new(&[[[0.5f64, -1.0, 2.0]]], &dev).unwrap();
        let tiny = GaussianParams {
            mean: mean.clone(),
            log_variance: (mean.ones_like().unwrap() * -60.0).unwrap(),
        };
        let z = reparameterize(&tiny, 1).unwrap();
        let d = (z - &mean).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
        let unit = GaussianParams {
            mean: mean.clone(),
            log_variance: mean.zeros_like().unwrap(),
        };
        let a = reparameterize(&unit, 7).unwrap().to_vec3::<f64>().unwrap();
        let b = reparameterize(&unit, 7).unwrap().to_vec3::<f64>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reparameterize_monte_carlo_mean() {
        let dev = Device::Cpu;
        let n = 10_000;
        let mean = Tensor::new(&[0.3f64, -0.7], &dev).unwrap().reshape((1, 2, 1)).unwrap();
        let lv = Tensor::new(&[0.0f64, 1.0], &dev).unwrap().reshape((1, 2, 1)).unwrap();
        let p = GaussianParams {
            mean: mean.broadcast_as((1, 2, n)).unwrap().contiguous().unwrap(),
            log_variance: lv.broadcast_as((1, 2, n)).unwrap().contiguous().unwrap(),
        };
        let z = reparameterize(&p, 11).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for (row, (m, lv)) in z.iter().zip([(0.3f64, 0.0f64), (-0.7, 1.0)]) {
            let sample_mean = row.iter().sum::<f64>() / n as f64;
            let sd = (0.5 * lv).exp();
            assert!((sample_mean - m).abs() < 3.0 * sd / (n as f64).sqrt());
        }
    }
}
