//! Diffusion transformer over latent sequences.
//!
//! Each block runs self-attention (rotary embeddings on half of each head),
//! cross-attention to text and timing tokens, then a gated MLP, each behind a
//! bias-less layer norm and wrapped in a residual connection. Timing and
//! timestep tokens are prepended to the sequence and stripped afterwards.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::conditioning::{timestep_embed, TimingCondition, TimingEmbedder};
use crate::error::{Error, Result};
use crate::nn::layers::silu;
use crate::nn::{LayerNormNoBias, Linear, Params};

const ROPE_BASE: f64 = 10_000.0;
const MASK_FILL: f64 = -1e9;
/// Prepended tokens: timing start, timing total, timestep.
pub const PREPEND_TOKENS: usize = 3;
/// Timing tokens appended to the cross-attention set.
pub const TIMING_TOKENS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DitConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_expansion: f64,
    pub latent_channels: usize,
    pub rope_fraction: f64,
    /// Width of incoming text token embeddings.
    pub text_dim: usize,
    /// Width of the sinusoidal timestep and timing features.
    pub cond_feature_dim: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            embed_dim: 256,
            heads: 8,
            mlp_expansion: 4.0,
            latent_channels: crate::LATENT_CHANNELS,
            rope_fraction: 0.5,
            text_dim: 256,
            cond_feature_dim: 256,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.rope_fraction != 0.5 {
            return bad("rope_fraction must be 0.5".into());
        }
        if self.rotary_dim() % 2 != 0 {
            return bad(format!("rotated width {} must be even", self.rotary_dim()));
        }
        if self.mlp_hidden() == 0 || self.text_dim == 0 || self.latent_channels == 0 {
            return bad("mlp width, text_dim and latent_channels must be positive".into());
        }
        if self.cond_feature_dim == 0 || self.cond_feature_dim % 2 != 0 {
            return bad("cond_feature_dim must be even and positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn rotary_dim(&self) -> usize {
        (self.head_dim() as f64 * self.rope_fraction).round() as usize
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_expansion).round() as usize
    }
}

/// Rotates the first `fraction · head_dim` features of `x: (B, H, N, head_dim)`
/// pairwise (rotate-half pairing: feature `i` with `i + rot/2`) by angles
/// `pos · base^(-2i/rot)`; remaining features pass through.
pub fn rope_half(x: &Tensor, positions: &[usize], fraction: f64) -> Result<Tensor> {
    let (_, _, n, hd) = x.dims4()?;
    if positions.len() != n {
        return Err(Error::shape(format!("{} positions for {n} tokens", positions.len())));
    }
    let rot = (hd as f64 * fraction).round() as usize;
    if rot % 2 != 0 {
        return Err(Error::invalid(format!("rotated width {rot} is odd")));
    }
    if rot == 0 {
        return Ok(x.clone());
    }
    let half = rot / 2;
    let mut cos = Vec::with_capacity(n * rot);
    let mut sin = Vec::with_capacity(n * rot);
    for &p in positions {
        let angles: Vec<f64> = (0..half)
            .map(|i| p as f64 * ROPE_BASE.powf(-2.0 * i as f64 / rot as f64))
            .collect();
        for _ in 0..2 {
            cos.extend(angles.iter().map(|a| a.cos()));
            sin.extend(angles.iter().map(|a| a.sin()));
        }
    }
    let cos = Tensor::from_vec(cos, (n, rot), x.device())?.to_dtype(x.dtype())?;
    let sin = Tensor::from_vec(sin, (n, rot), x.device())?.to_dtype(x.dtype())?;
    let xr = x.narrow(D::Minus1, 0, rot)?;
    let x1 = xr.narrow(D::Minus1, 0, half)?;
    let x2 = xr.narrow(D::Minus1, half, half)?;
    let rotated = Tensor::cat(&[x2.neg()?, x1], D::Minus1)?;
    let out = (xr.broadcast_mul(&cos)? + rotated.broadcast_mul(&sin)?)?;
    if rot == hd {
        Ok(out)
    } else {
        Ok(Tensor::cat(&[out, x.narrow(D::Minus1, rot, hd - rot)?], D::Minus1)?)
    }
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn new(dim: usize, heads: usize, p: &Params) -> Result<Self> {
        Ok(Self {
            q: Linear::new(dim, dim, false, &p.pp("q"))?,
            k: Linear::new(dim, dim, false, &p.pp("k"))?,
            v: Linear::new(dim, dim, false, &p.pp("v"))?,
            out: Linear::new(dim, dim, false, &p.pp("out"))?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// `x: (B, N, D)` attends to `ctx: (B, M, D)`; `mask: (B, M)` with 1 = keep.
    fn forward(&self, x: &Tensor, ctx: &Tensor, mask: Option<&Tensor>, rope: Option<(&[usize], f64)>) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let mut q = self.split(&self.q.forward(x)?)?;
        let mut k = self.split(&self.k.forward(ctx)?)?;
        let v = self.split(&self.v.forward(ctx)?)?;
        if let Some((pos, fraction)) = rope {
            q = rope_half(&q, pos, fraction)?;
            k = rope_half(&k, pos, fraction)?;
        }
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? * scale)?;
        if let Some(m) = mask {
            let m = m.to_dtype(scores.dtype())?;
            let bias = ((1.0 - m)? * MASK_FILL)?.unsqueeze(1)?.unsqueeze(1)?;
            scores = scores.broadcast_add(&bias)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.out.forward(&y)
    }
}

struct GatedMlp {
    up_a: Linear,
    up_b: Linear,
    down: Linear,
}

impl GatedMlp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = (self.up_a.forward(x)? * silu(&self.up_b.forward(x)?)?)?;
        self.down.forward(&h)
    }
}

struct Block {
    norm_self: LayerNormNoBias,
    self_attn: Attention,
    norm_cross: LayerNormNoBias,
    cross_attn: Attention,
    norm_mlp: LayerNormNoBias,
    mlp: GatedMlp,
}

impl Block {
    fn new(cfg: &DitConfig, p: &Params) -> Result<Self> {
        let d = cfg.embed_dim;
        let h = cfg.mlp_hidden();
        Ok(Self {
            norm_self: LayerNormNoBias::new(d, &p.pp("norm_self"))?,
            self_attn: Attention::new(d, cfg.heads, &p.pp("self_attn"))?,
            norm_cross: LayerNormNoBias::new(d, &p.pp("norm_cross"))?,
            cross_attn: Attention::new(d, cfg.heads, &p.pp("cross_attn"))?,
            norm_mlp: LayerNormNoBias::new(d, &p.pp("norm_mlp"))?,
            mlp: GatedMlp {
                up_a: Linear::new(d, h, false, &p.pp("mlp.up_a"))?,
                up_b: Linear::new(d, h, false, &p.pp("mlp.up_b"))?,
                down: Linear::new(h, d, false, &p.pp("mlp.down"))?,
            },
        })
    }

    fn forward(&self, x: &Tensor, positions: &[usize], fraction: f64, cross: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let h = self.norm_self.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h, None, Some((positions, fraction)))?)?;
        let h = self.norm_cross.forward(&x)?;
        let x = (&x + self.cross_attn.forward(&h, cross, Some(mask), None)?)?;
        let h = self.norm_mlp.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

/// Conditioning tokens already projected to the model width.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    /// `(B, K, D)`: text tokens then the two timing tokens.
    pub crossattn: Tensor,
    /// `(B, K)`, 1 for tokens that may be attended to.
    pub crossattn_mask: Tensor,
    /// `(B, P, D)`: timing start, timing total, timestep.
    pub prepend: Tensor,
}

/// Raw conditioning for a batch.
#[derive(Debug, Clone)]
pub struct CondInput {
    /// `(B, K_t, text_dim)`.
    pub text: Tensor,
    /// `(B, K_t)`, 1 for real tokens.
    pub text_mask: Tensor,
    pub timing: Vec<TimingCondition>,
}

pub struct Dit {
    cfg: DitConfig,
    in_proj: Linear,
    out_proj: Linear,
    text_proj: Linear,
    timestep_proj1: Linear,
    timestep_proj2: Linear,
    timing_prepend: TimingEmbedder,
    timing_cross: TimingEmbedder,
    blocks: Vec<Block>,
}

impl Dit {
    pub fn new(cfg: DitConfig, p: &Params) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let f = cfg.cond_feature_dim;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&cfg, &p.pp(format!("blocks.{i}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            in_proj: Linear::new(cfg.latent_channels, d, false, &p.pp("in_proj"))?,
            out_proj: Linear::zeros(d, cfg.latent_channels, false, &p.pp("out_proj"))?,
            text_proj: Linear::new(cfg.text_dim, d, false, &p.pp("text_proj"))?,
            timestep_proj1: Linear::new(f, d, true, &p.pp("timestep.proj1"))?,
            timestep_proj2: Linear::new(d, d, true, &p.pp("timestep.proj2"))?,
            timing_prepend: TimingEmbedder::new(f, d, &p.pp("timing_prepend"))?,
            timing_cross: TimingEmbedder::new(f, d, &p.pp("timing_cross"))?,
            blocks,
            cfg,
        })
    }

    pub fn config(&self) -> &DitConfig {
        &self.cfg
    }

    fn dtype(&self) -> DType {
        self.in_proj.weight.dtype()
    }

    /// `(B, D)` timestep tokens for diffusion times `t`.
    pub fn timestep_tokens(&self, t: &[f64]) -> Result<Tensor> {
        let f = self.cfg.cond_feature_dim;
        let mut feats = Vec::with_capacity(t.len() * f);
        for &ti in t {
            feats.extend(timestep_embed(ti, f)?);
        }
        let x = Tensor::from_vec(feats, (t.len(), f), self.in_proj.weight.device())?.to_dtype(self.dtype())?;
        self.timestep_proj2.forward(&silu(&self.timestep_proj1.forward(&x)?)?)
    }

    /// `(B, 3, D)`: timing start, timing total, timestep, in that order.
    pub fn build_prepend(&self, timing: &[TimingCondition], t: &[f64]) -> Result<Tensor> {
        if timing.len() != t.len() {
            return Err(Error::shape(format!("{} timing conditions for {} timesteps", timing.len(), t.len())));
        }
        let (start, total) = self.timing_prepend.forward(timing)?;
        let step = self.timestep_tokens(t)?;
        Ok(Tensor::stack(&[start, total, step], 1)?)
    }

    /// Text tokens followed by two timing tokens. With a batch of one, masked
    /// text tokens are dropped, so null text leaves only the timing tokens.
    pub fn build_crossattn(&self, text: &Tensor, text_mask: &Tensor, timing: &[TimingCondition]) -> Result<(Tensor, Tensor)> {
        let (b, k, dim) = text.dims3()?;
        if dim != self.cfg.text_dim {
            return Err(Error::shape(format!("text dim {dim}, model expects {}", self.cfg.text_dim)));
        }
        if timing.len() != b {
            return Err(Error::shape(format!("{} timing conditions for batch {b}", timing.len())));
        }
        let (mut text, mut mask) = (text.clone(), text_mask.to_dtype(self.dtype())?);
        if b == 1 {
            let keep: Vec<u32> = mask
                .flatten_all()?
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?
                .iter()
                .enumerate()
                .filter(|(_, m)| **m > 0.5)
                .map(|(i, _)| i as u32)
                .collect();
            if keep.len() < k {
                let idx = Tensor::from_vec(keep.clone(), keep.len(), text.device())?;
                text = text.index_select(&idx, 1)?;
                mask = mask.index_select(&idx, 1)?;
            }
        }
        let (start, total) = self.timing_cross.forward(timing)?;
        let timing_tokens = Tensor::stack(&[start, total], 1)?;
        let text_tokens = self.text_proj.forward(&text)?;
        let tokens = Tensor::cat(&[text_tokens, timing_tokens], 1)?;
        let ones = Tensor::ones((b, TIMING_TOKENS), self.dtype(), text.device())?;
        let mask = Tensor::cat(&[mask, ones], 1)?;
        Ok((tokens, mask))
    }

    pub fn bundle(&self, cond: &CondInput, t: &[f64]) -> Result<ConditioningBundle> {
        let (crossattn, crossattn_mask) = self.build_crossattn(&cond.text, &cond.text_mask, &cond.timing)?;
        Ok(ConditioningBundle {
            crossattn,
            crossattn_mask,
            prepend: self.build_prepend(&cond.timing, t)?,
        })
    }

    /// v-prediction for `x: (B, latent_channels, T)`.
    pub fn forward_bundle(&self, x: &Tensor, cond: &ConditioningBundle) -> Result<Tensor> {
        let (b, c, t) = x.dims3()?;
        if c != self.cfg.latent_channels {
            return Err(Error::shape(format!("expected {} latent channels, got {c}", self.cfg.latent_channels)));
        }
        let (pb, p, pd) = cond.prepend.dims3()?;
        let (cb, _, cd) = cond.crossattn.dims3()?;
        if pb != b || cb != b || pd != self.cfg.embed_dim || cd != self.cfg.embed_dim {
            return Err(Error::shape("conditioning does not match batch or width".to_string()));
        }
        let h = self.in_proj.forward(&x.transpose(1, 2)?)?;
        let mut h = Tensor::cat(&[cond.prepend.clone(), h], 1)?;
        let positions: Vec<usize> = (0..p + t).collect();
        for block in &self.blocks {
            h = block.forward(&h, &positions, self.cfg.rope_fraction, &cond.crossattn, &cond.crossattn_mask)?;
        }
        let h = h.narrow(1, p, t)?;
        Ok(self.out_proj.forward(&h)?.transpose(1, 2)?.contiguous()?)
    }

    pub fn forward(&self, x: &Tensor, t: &[f64], cond: &CondInput) -> Result<Tensor> {
        self.forward_bundle(x, &self.bundle(cond, t)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn rope_identity_at_zero_and_odd_width_rejected() {
        let x = Tensor::arange(0f64, 16.0, &Device::Cpu).unwrap().reshape((1, 1, 2, 8)).unwrap();
        let y = rope_half(&x, &[0, 0], 0.5).unwrap();
        assert_eq!(
            y.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        let odd = Tensor::zeros((1, 1, 1, 6), DType::F64, &Device::Cpu).unwrap();
        assert!(rope_half(&odd, &[3], 0.5).is_err());
    }

    #[test]
    fn rope_leaves_second_half_untouched() {
        let x = Tensor::arange(1f64, 17.0, &Device::Cpu).unwrap().reshape((1, 1, 2, 8)).unwrap();
        let y = rope_half(&x, &[5, 9], 0.5).unwrap();
        let tail_x = x.narrow(3, 4, 4).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let tail_y = y.narrow(3, 4, 4).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(tail_x, tail_y);
    }

    #[test]
    fn config_validation() {
        assert!(DitConfig::default().validate().is_ok());
        let bad = DitConfig {
            embed_dim: 30,
            heads: 4,
            ..DitConfig::default()
        };
        assert!(bad.validate().is_err());
        let odd = DitConfig {
            embed_dim: 24,
            heads: 4,
            ..DitConfig::default()
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn zeroed_gate_silences_mlp() {
        let p = Params::new(1, DType::F64, &Device::Cpu);
        let cfg = DitConfig {
            depth: 1,
            embed_dim: 8,
            heads: 2,
            text_dim: 4,
            cond_feature_dim: 8,
            ..DitConfig::default()
        };
        let block = Block::new(&cfg, &p).unwrap();
        let x = Tensor::arange(0f64, 24.0, &Device::Cpu).unwrap().reshape((1, 3, 8)).unwrap();
        let live = block.mlp.forward(&x).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(live > 0.0);
        let gated = GatedMlp {
            up_a: block.mlp.up_a.clone(),
            up_b: Linear {
                weight: block.mlp.up_b.weight.zeros_like().unwrap(),
                bias: None,
            },
            down: block.mlp.down.clone(),
        };
        let out = gated.forward(&x).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(out, 0.0);
    }
}
