//! Building blocks shared by the codec, the discriminators and the transformer.

use candle_core::{Tensor, D};

use super::ops;
use super::params::{Init, Params};
use crate::error::Result;

const SNAKE_EPS: f64 = 1e-9;

/// `y = x + sin²(beta·x) / beta`, with `beta` broadcast over channels of `(B, C, T)`.
pub fn snake(x: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let beta = beta.maximum(SNAKE_EPS)?.reshape((1, (), 1))?;
    let s = x.broadcast_mul(&beta)?.sin()?.sqr()?;
    Ok((x + s.broadcast_div(&beta)?)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    // x * sigmoid(x), written with primitive ops so it differentiates in f64
    let sig = ((x.neg()?.exp()? + 1.0)?).recip()?;
    Ok((x * sig)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    let pos = x.relu()?;
    let neg = (x - &pos)?;
    Ok((pos + (neg * slope)?)?)
}

#[derive(Debug, Clone)]
pub struct Snake {
    pub beta: Tensor,
}

impl Snake {
    pub fn new(channels: usize, p: &Params) -> Result<Self> {
        Ok(Self {
            beta: p.get(channels, "beta", Init::Const(1.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        snake(x, &self.beta)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, p: &Params) -> Result<Self> {
        let weight = p.get((out_dim, in_dim), "weight", Init::FanIn(in_dim))?;
        let bias = if bias {
            Some(p.get(out_dim, "bias", Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, bias: bool, p: &Params) -> Result<Self> {
        let weight = p.get((out_dim, in_dim), "weight", Init::Const(0.0))?;
        let bias = if bias {
            Some(p.get(out_dim, "bias", Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// `x: (..., in)` to `(..., out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // one 2-D matmul beats a batched one against a broadcast weight
        let dims = x.dims();
        let (lead, in_dim) = dims.split_at(dims.len() - 1);
        let rows: usize = lead.iter().product();
        let mut out_dims = lead.to_vec();
        out_dims.push(self.weight.dim(0)?);
        let y = x.reshape((rows, in_dim[0]))?.matmul(&self.weight.t()?)?.reshape(out_dims)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Layer normalization over the last dimension with a learnable gain and no bias.
#[derive(Debug, Clone)]
pub struct LayerNormNoBias {
    pub gain: Tensor,
    pub eps: f64,
}

impl LayerNormNoBias {
    pub fn new(dim: usize, p: &Params) -> Result<Self> {
        Ok(Self {
            gain: p.get(dim, "gain", Init::Const(1.0))?,
            eps: 1e-5,
        })
    }

    /// Zero-mean, unit-variance activations before the gain is applied.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        Ok(centered.broadcast_div(&(var + self.eps)?.sqrt()?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.normalize(x)?.broadcast_mul(&self.gain)?)
    }
}

/// Effective kernel of a weight-normalized convolution: `g · v / ‖v‖`, norm
/// taken per slice along dim 0.
pub fn weight_norm(direction: &Tensor, magnitude: &Tensor) -> Result<Tensor> {
    let norm = direction.sqr()?.sum_keepdim((1, 2))?.sqrt()?;
    Ok(direction.broadcast_mul(magnitude)?.broadcast_div(&norm)?)
}

fn init_magnitude(direction: &Tensor) -> Result<Tensor> {
    Ok(direction.sqr()?.sum_keepdim((1, 2))?.sqrt()?)
}

/// Weight-normalized 1-D convolution with explicit left/right zero padding.
#[derive(Debug, Clone)]
pub struct WnConv1d {
    pub direction: Tensor,
    pub magnitude: Tensor,
    pub bias: Option<Tensor>,
    pub kernel_size: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

pub struct ConvSpec {
    pub kernel_size: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride-1 convolution whose output has the input length.
    pub fn same(kernel_size: usize, dilation: usize) -> Self {
        let total = dilation * (kernel_size - 1);
        Self {
            kernel_size,
            stride: 1,
            dilation,
            pad_left: total / 2,
            pad_right: total - total / 2,
            bias: true,
        }
    }

    /// Kernel `2·stride` downsampler producing exactly `L / stride` frames.
    pub fn downsample(stride: usize) -> Self {
        Self {
            kernel_size: 2 * stride,
            stride,
            dilation: 1,
            pad_left: stride.div_ceil(2),
            pad_right: stride / 2,
            bias: true,
        }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl WnConv1d {
    pub fn new(in_c: usize, out_c: usize, spec: ConvSpec, p: &Params) -> Result<Self> {
        let k = spec.kernel_size;
        let direction = p.get((out_c, in_c, k), "weight_v", Init::FanIn(in_c * k))?;
        let magnitude = p.get_or_insert("weight_g", &init_magnitude(&direction)?)?;
        let bias = if spec.bias {
            Some(p.get(out_c, "bias", Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            direction,
            magnitude,
            bias,
            kernel_size: k,
            stride: spec.stride,
            dilation: spec.dilation,
            pad_left: spec.pad_left,
            pad_right: spec.pad_right,
        })
    }

    pub fn weight(&self) -> Result<Tensor> {
        weight_norm(&self.direction, &self.magnitude)
    }

    /// Convolution with an explicit kernel, sharing this layer's framing.
    pub fn forward_with_weight(&self, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
        let x = if self.pad_left + self.pad_right > 0 {
            x.pad_with_zeros(D::Minus1, self.pad_left, self.pad_right)?
        } else {
            x.clone()
        };
        let y = ops::conv1d(&x, weight, 0, self.stride, self.dilation)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1))?)?,
            None => y,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with_weight(x, &self.weight()?)
    }
}

/// Weight-normalized transposed convolution, kernel `k ≥ stride`, output
/// exactly `L · stride` frames (the full output is cropped by `(k - stride) / 2`
/// on the left).
#[derive(Debug, Clone)]
pub struct WnConvTranspose1d {
    pub direction: Tensor,
    pub magnitude: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub kernel_size: usize,
}

impl WnConvTranspose1d {
    pub fn new(in_c: usize, out_c: usize, stride: usize, kernel_size: usize, p: &Params) -> Result<Self> {
        if kernel_size < stride {
            return Err(crate::error::Error::Config(format!(
                "transposed conv kernel {kernel_size} shorter than stride {stride}"
            )));
        }
        let fan_in = (in_c * kernel_size / stride).max(1);
        let direction = p.get((in_c, out_c, kernel_size), "weight_v", Init::FanIn(fan_in))?;
        let magnitude = p.get_or_insert("weight_g", &init_magnitude(&direction)?)?;
        let bias = Some(p.get(out_c, "bias", Init::Const(0.0))?);
        Ok(Self {
            direction,
            magnitude,
            bias,
            stride,
            kernel_size,
        })
    }

    /// Frames cropped from the left of the full transposed output.
    pub fn crop_left(&self) -> usize {
        (self.kernel_size - self.stride) / 2
    }

    pub fn weight(&self) -> Result<Tensor> {
        weight_norm(&self.direction, &self.magnitude)
    }

    pub fn forward_with_weight(&self, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
        let len = x.dim(D::Minus1)?;
        let full = ops::conv_transpose1d(x, weight, self.stride)?;
        let y = full.narrow(D::Minus1, self.crop_left(), len * self.stride)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1))?)?,
            None => y,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with_weight(x, &self.weight()?)
    }
}
