//! Tensor helpers shared by the backbone, the prompt modules and the head.

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;

/// Denominator guard for L2 normalisation.
pub const L2_EPS: f64 = 1e-12;

/// Layer normalisation over the last dimension.
///
/// Written with primitive ops so it differentiates in both f32 and f64.
pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(weight)?.broadcast_add(bias)?)
}

/// `x / sqrt(sum(x^2) + eps)` along `dim`.
pub fn l2_normalize<Dm: candle_core::shape::Dim>(x: &Tensor, dim: Dm) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(dim)? + L2_EPS)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// `[N, L, C]` tokens to a `[N, C, H, W]` map.
pub fn tokens_to_map(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, l, c) = tokens.dims3()?;
    if l != h * w {
        return Err(crate::VcpError::Shape(format!(
            "{l} tokens cannot form a {h}x{w} map"
        )));
    }
    Ok(tokens.transpose(1, 2)?.reshape((n, c, h, w))?)
}

/// `[N, C, H, W]` map to `[N, H*W, C]` tokens.
pub fn map_to_tokens(map: &Tensor) -> Result<Tensor> {
    Ok(map.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

/// Row-stochastic bilinear interpolation weights, half-pixel centres, edges clamped.
pub fn bilinear_weights(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[i * inp + i0] += 1.0 - frac;
        m[i * inp + i1] += frac;
    }
    m
}

fn weight_tensor(out: usize, inp: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(bilinear_weights(out, inp), (out, inp), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of a `[N, C, H, W]` map, expressed as two matmuls so it has a gradient.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let ah = weight_tensor(out_h, h, x.dtype(), x.device())?;
    let aw_t = weight_tensor(out_w, w, x.dtype(), x.device())?.t()?.contiguous()?;
    let flat = x.reshape((n * c * h, w))?.matmul(&aw_t)?;
    let flat = flat.reshape((n * c, h, out_w))?;
    let ah = ah.unsqueeze(0)?.broadcast_as((n * c, out_h, h))?.contiguous()?;
    Ok(ah.matmul(&flat)?.reshape((n, c, out_h, out_w))?)
}

/// Source index of the nearest-neighbour rule `floor(i * in / out)`.
pub fn nearest_indices(out: usize, inp: usize) -> Vec<u32> {
    (0..out).map(|i| ((i * inp) / out) as u32).collect()
}

/// Nearest-neighbour resize of a `[N, C, H, W]` map.
pub fn resize_nearest(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rows = Tensor::new(nearest_indices(out_h, h), dev)?;
    let cols = Tensor::new(nearest_indices(out_w, w), dev)?;
    Ok(x.index_select(&rows, 2)?.index_select(&cols, 3)?)
}

/// Dense layer on the last dimension. Weight is `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = dilation * (self.kernel / 2);
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = &self.spec;
        let depthwise = s.groups > 1 && s.groups == s.in_channels && s.groups == s.out_channels;
        let y = if depthwise && s.stride == 1 && s.dilation == 1 && 2 * s.padding + 1 == s.kernel {
            depthwise_same(x, &self.weight, s.kernel)?
        } else if s.groups == 1 {
            conv2d_im2col(x, &self.weight, s.padding, s.stride, s.dilation)?
        } else {
            x.conv2d(&self.weight, s.padding, s.stride, s.dilation, s.groups)?
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, s.out_channels, 1, 1))?)?,
            None => y,
        })
    }
}

/// `count` entries of `dim` starting at `start`, `stride` apart. Reads past the
/// end see zeros.
fn take_strided(x: &Tensor, dim: usize, start: usize, count: usize, stride: usize) -> Result<Tensor> {
    if stride == 1 {
        return Ok(x.narrow(dim, start, count)?);
    }
    let len = count * stride;
    let size = x.dim(dim)?;
    let x = if start + len > size {
        x.pad_with_zeros(dim, 0, start + len - size)?
    } else {
        x.clone()
    };
    let region = x.narrow(dim, start, len)?;
    let mut split: Vec<usize> = region.dims().to_vec();
    split[dim] = count;
    split.insert(dim + 1, stride);
    Ok(region.reshape(split)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)?)
}

/// Dense convolution as patch extraction followed by one matmul.
///
/// Numerically equivalent to a direct convolution; its gradient is made of
/// slicing and matmul backward passes, which are much faster on CPU than the
/// library's transposed convolution.
pub fn conv2d_im2col(x: &Tensor, weight: &Tensor, padding: usize, stride: usize, dilation: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, ci, kh, kw) = weight.dims4()?;
    if ci != c {
        return Err(crate::VcpError::Shape(format!(
            "convolution expects {ci} input channels, got {c}"
        )));
    }
    let span_h = dilation * (kh - 1) + 1;
    let span_w = dilation * (kw - 1) + 1;
    if h + 2 * padding < span_h || w + 2 * padding < span_w {
        return Err(crate::VcpError::Shape(format!(
            "{h}x{w} input is smaller than a {kh}x{kw} kernel with dilation {dilation}"
        )));
    }
    let ho = (h + 2 * padding - span_h) / stride + 1;
    let wo = (w + 2 * padding - span_w) / stride + 1;
    let padded = if padding > 0 {
        x.pad_with_zeros(2, padding, padding)?.pad_with_zeros(3, padding, padding)?
    } else {
        x.clone()
    };
    let cols = if kh == 1 && kw == 1 {
        take_strided(&take_strided(&padded, 2, 0, ho, stride)?, 3, 0, wo, stride)?
    } else {
        let mut taps = Vec::with_capacity(kh * kw);
        for a in 0..kh {
            let rows = take_strided(&padded, 2, a * dilation, ho, stride)?;
            for b in 0..kw {
                taps.push(take_strided(&rows, 3, b * dilation, wo, stride)?);
            }
        }
        Tensor::cat(&taps, 1)?
    };
    let cols = cols.reshape((n, kh * kw * c, ho * wo))?;
    let wmat = weight.permute((0, 2, 3, 1))?.reshape((o, kh * kw * c))?;
    Ok(wmat.broadcast_matmul(&cols)?.reshape((n, o, ho, wo))?)
}

/// Depthwise `k x k` convolution with same padding, as a sum of shifted products.
///
/// Grouped convolution in the tensor library runs one kernel per channel,
/// which is far slower than this for wide layers.
pub fn depthwise_same(x: &Tensor, weight: &Tensor, k: usize) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let pad = k / 2;
    let padded = x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?;
    let mut acc: Option<Tensor> = None;
    for a in 0..k {
        let rows = padded.narrow(2, a, h)?;
        for b in 0..k {
            let tap = weight.narrow(2, a, 1)?.narrow(3, b, 1)?.reshape((1, c, 1, 1))?;
            let term = rows.narrow(3, b, w)?.broadcast_mul(&tap)?;
            acc = Some(match acc {
                Some(t) => (t + term)?,
                None => term,
            });
        }
    }
    Ok(acc.expect("kernel has at least one tap"))
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.weight, &self.bias, self.eps)
    }
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

/// Copies a tensor to a flat `Vec<f64>` regardless of its dtype.
pub fn to_vec_f64(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
