//! Differentiable primitives.
//!
//! candle's CPU convolution kernels return wrong values for some operand
//! layouts (batched transposed convolutions, and the views its own conv1d
//! backward produces), and transposed convolution has no backward. Both
//! convolutions here are therefore composed from `index_select`, `matmul`,
//! reshapes and padding, whose gradients candle derives itself. The real FFT
//! is a custom op with an explicit backward.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, D};
use rustfft::{num_complex::Complex, FftPlanner};

type CResult<T> = candle_core::Result<T>;

/// 1-D convolution (cross-correlation), `x: (B, C_in, L)`,
/// `kernel: (C_out, C_in, K)`, symmetric zero padding.
pub fn conv1d(
    x: &Tensor,
    kernel: &Tensor,
    padding: usize,
    stride: usize,
    dilation: usize,
) -> CResult<Tensor> {
    let (b, c, l) = x.dims3()?;
    let (o, c_k, k) = kernel.dims3()?;
    if c != c_k {
        candle_core::bail!("conv1d: input has {c} channels, kernel expects {c_k}")
    }
    let lp = l + 2 * padding;
    let span = dilation * (k - 1) + 1;
    if lp < span {
        candle_core::bail!("conv1d: padded length {lp} shorter than kernel span {span}")
    }
    let l_out = (lp - span) / stride + 1;
    let w = kernel.reshape((o, c * k))?;
    if k == 1 && stride == 1 && padding == 0 {
        let cols = x.transpose(0, 1)?.reshape((c, b * l))?;
        return w.matmul(&cols)?.reshape((o, b, l))?.transpose(0, 1)?.contiguous();
    }
    let xp = if padding > 0 {
        x.pad_with_zeros(D::Minus1, padding, padding)?
    } else {
        x.clone()
    };
    // (C·K, B·L_out) columns, one 2-D matmul, then back to (B, O, L_out)
    let cols = xp.contiguous()?.apply_op1(Im2colOp {
        k,
        stride,
        dilation,
        l_out,
    })?;
    w.matmul(&cols)?
        .reshape((o, b, l_out))?
        .transpose(0, 1)?
        .contiguous()
}

/// `(B, C, L) -> (C·K, B·L_out)` with `cols[c·K + j, b·L_out + t] = x[b, c, t·stride + j·dilation]`.
struct Im2colOp {
    k: usize,
    stride: usize,
    dilation: usize,
    l_out: usize,
}

impl CustomOp1 for Im2colOp {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        fn gather<T: Copy + Default>(x: &[T], (b, c, l): (usize, usize, usize), op: &Im2colOp) -> Vec<T> {
            let (k, lo) = (op.k, op.l_out);
            let mut out = vec![T::default(); c * k * b * lo];
            for ci in 0..c {
                for j in 0..k {
                    let row = &mut out[(ci * k + j) * b * lo..(ci * k + j + 1) * b * lo];
                    for bi in 0..b {
                        let src = &x[(bi * c + ci) * l + j * op.dilation..];
                        for (t, o) in row[bi * lo..(bi + 1) * lo].iter_mut().enumerate() {
                            *o = src[t * op.stride];
                        }
                    }
                }
            }
            out
        }
        let Some((start, end)) = layout.contiguous_offsets() else {
            candle_core::bail!("im2col expects contiguous input")
        };
        let dims = layout.shape().dims3()?;
        let shape = Shape::from((dims.1 * self.k, dims.0 * self.l_out));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(gather(&v[start..end], dims, self)),
            CpuStorage::F64(v) => CpuStorage::F64(gather(&v[start..end], dims, self)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        fn scatter<T: Copy + Default + std::ops::AddAssign>(g: &[T], (b, c, l): (usize, usize, usize), op: &Im2colOp) -> Vec<T> {
            let (k, lo) = (op.k, op.l_out);
            let mut out = vec![T::default(); b * c * l];
            for ci in 0..c {
                for j in 0..k {
                    let row = &g[(ci * k + j) * b * lo..(ci * k + j + 1) * b * lo];
                    for bi in 0..b {
                        let dst = &mut out[(bi * c + ci) * l + j * op.dilation..];
                        for (t, v) in row[bi * lo..(bi + 1) * lo].iter().enumerate() {
                            dst[t * op.stride] += *v;
                        }
                    }
                }
            }
            out
        }
        let dims = arg.dims3()?;
        let g = grad.contiguous()?.flatten_all()?;
        let out = match arg.dtype() {
            DType::F32 => Tensor::from_vec(scatter(&g.to_vec1::<f32>()?, dims, self), dims, arg.device())?,
            DType::F64 => Tensor::from_vec(scatter(&g.to_vec1::<f64>()?, dims, self), dims, arg.device())?,
            dt => candle_core::bail!("im2col does not support {dt:?}"),
        };
        Ok(Some(out))
    }
}

/// Transposed 1-D convolution without padding: `x: (B, C_in, L)`,
/// `kernel: (C_in, C_out, K)`, output length `(L - 1) * stride + K`.
pub fn conv_transpose1d(x: &Tensor, kernel: &Tensor, stride: usize) -> CResult<Tensor> {
    let (b, c, l) = x.dims3()?;
    let (c_k, o, k) = kernel.dims3()?;
    if c != c_k {
        candle_core::bail!("conv_transpose1d: input has {c} channels, kernel expects {c_k}")
    }
    // split taps into phases j = m·stride + r, padding the kernel to whole phases
    let m_count = k.div_ceil(stride);
    let kernel = if m_count * stride > k {
        kernel.pad_with_zeros(D::Minus1, 0, m_count * stride - k)?
    } else {
        kernel.clone()
    };
    // p[b, o, m, r, q] = sum_i k[i, o, m·s + r] x[b, i, q]
    let w = kernel.reshape((c, o * m_count * stride))?.t()?;
    let cols = x.transpose(0, 1)?.reshape((c, b * l))?;
    let p = w
        .matmul(&cols)?
        .reshape((o, m_count, stride, b, l))?
        .permute((3, 0, 1, 2, 4))?;
    // y[b, o, (q + m)·s + r] += p[b, o, m, r, q]
    let mut acc: Option<Tensor> = None;
    for m in 0..m_count {
        let part = p
            .narrow(2, m, 1)?
            .squeeze(2)?
            .pad_with_zeros(D::Minus1, m, m_count - 1 - m)?;
        acc = Some(match acc {
            Some(a) => (a + part)?,
            None => part,
        });
    }
    let acc = acc.expect("kernel has at least one phase");
    // (B, O, r, q') -> (B, O, q', r) -> (B, O, q'·s + r)
    let full = acc
        .transpose(2, 3)?
        .reshape((b, o, (l + m_count - 1) * stride))?;
    full.narrow(D::Minus1, 0, (l - 1) * stride + k)
}

fn storage_to_tensor(storage: &CpuStorage, layout: &Layout) -> CResult<Tensor> {
    let Some((start, end)) = layout.contiguous_offsets() else {
        candle_core::bail!("custom op expects contiguous input")
    };
    match storage {
        CpuStorage::F32(v) => Tensor::from_slice(&v[start..end], layout.shape(), &candle_core::Device::Cpu),
        CpuStorage::F64(v) => Tensor::from_slice(&v[start..end], layout.shape(), &candle_core::Device::Cpu),
        _ => candle_core::bail!("custom op supports f32 and f64 only"),
    }
}

struct RfftOp;

fn rows_f64(t: &Tensor) -> CResult<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()
}

impl CustomOp1 for RfftOp {
    fn name(&self) -> &'static str {
        "rfft"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let x = storage_to_tensor(storage, layout)?;
        let dims = x.dims().to_vec();
        let n = *dims.last().unwrap();
        let bins = n / 2 + 1;
        let data = rows_f64(&x)?;
        let rows = data.len() / n;
        let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
        let mut out = vec![0f64; rows * 2 * bins];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for r in 0..rows {
            for (b, v) in buf.iter_mut().zip(&data[r * n..(r + 1) * n]) {
                *b = Complex::new(*v, 0.0);
            }
            fft.process(&mut buf);
            let row = &mut out[r * 2 * bins..(r + 1) * 2 * bins];
            for k in 0..bins {
                row[k] = buf[k].re;
                row[bins + k] = buf[k].im;
            }
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = 2 * bins;
        let storage = match storage {
            CpuStorage::F32(_) => CpuStorage::F32(out.iter().map(|v| *v as f32).collect()),
            _ => CpuStorage::F64(out),
        };
        Ok((storage, Shape::from(out_dims)))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let n = arg.dim(candle_core::D::Minus1)?;
        let bins = n / 2 + 1;
        let g = rows_f64(&grad.contiguous()?)?;
        let rows = g.len() / (2 * bins);
        let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
        let mut out = vec![0f64; rows * n];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for r in 0..rows {
            let row = &g[r * 2 * bins..(r + 1) * 2 * bins];
            buf.iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
            for k in 0..bins {
                buf[k] = Complex::new(row[k], row[bins + k]);
            }
            ifft.process(&mut buf);
            for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(&buf) {
                *o = b.re;
            }
        }
        let t = Tensor::from_vec(out, arg.shape(), arg.device())?.to_dtype(arg.dtype())?;
        Ok(Some(t))
    }
}

/// "Same"-length convolution of every row of `(..., L)` with fixed odd-length
/// `taps` centred on the middle tap, zero outside the signal.
pub fn fir_same(x: &Tensor, taps: &[f64]) -> CResult<Tensor> {
    if taps.len() % 2 == 0 {
        candle_core::bail!("fir_same needs an odd number of taps, got {}", taps.len())
    }
    x.contiguous()?.apply_op1(FirOp { taps: taps.to_vec() })
}

struct FirOp {
    taps: Vec<f64>,
}

/// `y[n] = sum_m h[m] x[n - m + c]`, or its adjoint `x[i] = sum_m h[m] y[i + m - c]`.
fn fir_rows(data: &[f64], n: usize, taps: &[f64], adjoint: bool) -> Vec<f64> {
    let c = (taps.len() / 2) as isize;
    let mut out = vec![0f64; data.len()];
    for (row_in, row_out) in data.chunks(n).zip(out.chunks_mut(n)) {
        for (m, &h) in taps.iter().enumerate() {
            let shift = if adjoint { m as isize - c } else { c - m as isize };
            // row_out[i] += h * row_in[i + shift] where in range
            let lo = (-shift).max(0) as usize;
            let hi = (n as isize - shift).min(n as isize).max(0) as usize;
            for i in lo..hi {
                row_out[i] += h * row_in[(i as isize + shift) as usize];
            }
        }
    }
    out
}

impl CustomOp1 for FirOp {
    fn name(&self) -> &'static str {
        "fir_same"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let x = storage_to_tensor(storage, layout)?;
        let n = x.dim(D::Minus1)?;
        let out = fir_rows(&rows_f64(&x)?, n, &self.taps, false);
        let storage = match storage {
            CpuStorage::F32(_) => CpuStorage::F32(out.iter().map(|v| *v as f32).collect()),
            _ => CpuStorage::F64(out),
        };
        Ok((storage, x.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let n = arg.dim(D::Minus1)?;
        let g = fir_rows(&rows_f64(&grad.contiguous()?)?, n, &self.taps, true);
        Ok(Some(Tensor::from_vec(g, arg.shape(), arg.device())?.to_dtype(arg.dtype())?))
    }
}

/// Windowed framing followed by a real FFT. Rows of `(..., L)` are cut into
/// `frames` windows of `window.len()` samples every `hop`; the result is
/// `(..., frames, 2 * (N/2 + 1))` in the same `[re.., im..]` layout as [`rfft`].
/// Equivalent to gathering frames, multiplying by the window and calling
/// [`rfft`], without materialising the overlapping frames in the graph.
pub fn framed_rfft(x: &Tensor, window: &[f64], hop: usize, frames: usize) -> CResult<Tensor> {
    let n = window.len();
    let len = x.dim(D::Minus1)?;
    if frames == 0 || hop == 0 || (frames - 1) * hop + n > len {
        candle_core::bail!("framed_rfft: {frames} frames of {n} every {hop} do not fit in {len}")
    }
    x.contiguous()?.apply_op1(FramedRfftOp {
        window: window.to_vec(),
        hop,
        frames,
    })
}

struct FramedRfftOp {
    window: Vec<f64>,
    hop: usize,
    frames: usize,
}

impl CustomOp1 for FramedRfftOp {
    fn name(&self) -> &'static str {
        "framed_rfft"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> CResult<(CpuStorage, Shape)> {
        let x = storage_to_tensor(storage, layout)?;
        let mut dims = x.dims().to_vec();
        let len = dims.pop().unwrap();
        let n = self.window.len();
        let bins = n / 2 + 1;
        let data = rows_f64(&x)?;
        let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut out = Vec::with_capacity(data.len() / len * self.frames * 2 * bins);
        for row in data.chunks(len) {
            for f in 0..self.frames {
                let seg = &row[f * self.hop..f * self.hop + n];
                for ((b, v), w) in buf.iter_mut().zip(seg).zip(&self.window) {
                    *b = Complex::new(v * w, 0.0);
                }
                fft.process(&mut buf);
                out.extend(buf[..bins].iter().map(|c| c.re));
                out.extend(buf[..bins].iter().map(|c| c.im));
            }
        }
        dims.extend([self.frames, 2 * bins]);
        let storage = match storage {
            CpuStorage::F32(_) => CpuStorage::F32(out.iter().map(|v| *v as f32).collect()),
            _ => CpuStorage::F64(out),
        };
        Ok((storage, Shape::from(dims)))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let len = arg.dim(D::Minus1)?;
        let n = self.window.len();
        let bins = n / 2 + 1;
        let g = rows_f64(&grad.contiguous()?)?;
        let rows = arg.elem_count() / len;
        let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut out = vec![0f64; rows * len];
        for (r, out_row) in out.chunks_mut(len).enumerate() {
            for f in 0..self.frames {
                let gf = &g[(r * self.frames + f) * 2 * bins..(r * self.frames + f + 1) * 2 * bins];
                buf.iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
                for k in 0..bins {
                    buf[k] = Complex::new(gf[k], gf[bins + k]);
                }
                ifft.process(&mut buf);
                let seg = &mut out_row[f * self.hop..f * self.hop + n];
                for ((o, b), w) in seg.iter_mut().zip(&buf).zip(&self.window) {
                    *o += b.re * w;
                }
            }
        }
        Ok(Some(Tensor::from_vec(out, arg.shape(), arg.device())?.to_dtype(arg.dtype())?))
    }
}

/// Real FFT along the last dimension. `(..., N)` becomes `(..., 2 * (N/2 + 1))`
/// laid out as `[re_0 .. re_F, im_0 .. im_F]`.
pub fn rfft(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(RfftOp)
}
