//! Consensus prompt disperser: handcrafted high-frequency prompts, fusion of
//! the three prompt sources and per-layer dispersion to the encoder width.

use candle_core::{Tensor, D};
use rustfft::{num_complex::Complex64, FftPlanner};

use crate::backbone::BackboneConfig;
use crate::config::{reduced_width, Fusion, MlpSharing};
use crate::error::{Result, VcpError};
use crate::ops::{self, Conv2d, ConvSpec, LayerNorm, Linear};
use crate::params::ParamStore;

/// Half side of the centred low-frequency square removed for ratio `tau`.
pub fn low_frequency_half_side(h: usize, w: usize, tau: f64) -> usize {
    ((h * w) as f64 * tau).sqrt() as usize / 2
}

/// Whether unshifted frequency index `(u, v)` lies inside the removed square.
pub fn in_low_frequency_square(u: usize, v: usize, h: usize, w: usize, half: usize) -> bool {
    let su = (u + h / 2) % h;
    let sv = (v + w / 2) % w;
    let inside = |s: usize, n: usize| s + half >= n / 2 && s < n / 2 + half;
    inside(su, h) && inside(sv, w)
}

/// High-frequency component of one `h x w` channel: the real part of the inverse
/// transform after zeroing the centred low-frequency square.
pub fn high_frequency(channel: &[f64], h: usize, w: usize, tau: f64) -> Result<Vec<f64>> {
    if h < 2 || w < 2 || channel.len() != h * w {
        return Err(VcpError::InvalidInput(format!(
            "cannot take the spectrum of a {h}x{w} image with {} values",
            channel.len()
        )));
    }
    let mut planner = FftPlanner::<f64>::new();
    let (row_fwd, row_inv) = (planner.plan_fft_forward(w), planner.plan_fft_inverse(w));
    let (col_fwd, col_inv) = (planner.plan_fft_forward(h), planner.plan_fft_inverse(h));
    let mut buf: Vec<Complex64> = channel.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let mut col = vec![Complex64::new(0.0, 0.0); h];

    for row in buf.chunks_exact_mut(w) {
        row_fwd.process(row);
    }
    for v in 0..w {
        for u in 0..h {
            col[u] = buf[u * w + v];
        }
        col_fwd.process(&mut col);
        for u in 0..h {
            buf[u * w + v] = col[u];
        }
    }
    let half = low_frequency_half_side(h, w, tau);
    for u in 0..h {
        for v in 0..w {
            if in_low_frequency_square(u, v, h, w, half) {
                buf[u * w + v] = Complex64::new(0.0, 0.0);
            }
        }
    }
    for v in 0..w {
        for u in 0..h {
            col[u] = buf[u * w + v];
        }
        col_inv.process(&mut col);
        for u in 0..h {
            buf[u * w + v] = col[u];
        }
    }
    for row in buf.chunks_exact_mut(w) {
        row_inv.process(row);
    }
    let scale = 1.0 / (h * w) as f64;
    Ok(buf.iter().map(|c| c.re * scale).collect())
}

/// Channel-wise high-frequency image of a `[N, C, H, W]` batch.
pub fn high_frequency_images(images: &Tensor, tau: f64) -> Result<Tensor> {
    let (n, c, h, w) = images.dims4()?;
    let data = ops::to_vec_f64(images)?;
    let mut out = Vec::with_capacity(data.len());
    for plane in data.chunks_exact(h * w) {
        out.extend(high_frequency(plane, h, w, tau)?);
    }
    Ok(Tensor::from_vec(out, (n, c, h, w), images.device())?.to_dtype(images.dtype())?)
}

/// Tunable overlapping patch embeddings applied to the high-frequency image.
#[derive(Clone, Debug)]
pub struct HandcraftedPrompts {
    pub tau: f64,
    pub stages: Vec<(Conv2d, LayerNorm)>,
}

impl HandcraftedPrompts {
    /// Builds the chain up to and including stage `last`.
    pub fn new(store: &mut ParamStore, backbone: &BackboneConfig, r: usize, last: usize, tau: f64) -> Result<Self> {
        let mut stages = Vec::new();
        let mut c_in = backbone.in_channels;
        for s in 0..=last {
            let st = &backbone.stages[s];
            let c_r = reduced_width(st.channels, r)?;
            let spec = ConvSpec::new(c_in, c_r, st.patch_size).stride(st.stride);
            let conv = store.conv(&format!("hand.{s}.proj"), spec, true)?;
            let norm = store.layer_norm(&format!("hand.{s}.norm"), c_r, backbone.layer_norm_eps)?;
            stages.push((conv, norm));
            c_in = c_r;
        }
        Ok(Self { tau, stages })
    }

    /// One `[N, L_s, C_r]` prompt per built stage.
    pub fn forward(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let (_, _, h, w) = images.dims4()?;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(VcpError::InvalidInput(format!(
                "handcrafted prompts need sides divisible by 32, got {h}x{w}"
            )));
        }
        let mut x = high_frequency_images(images, self.tau)?;
        let mut out = Vec::with_capacity(self.stages.len());
        for (conv, norm) in &self.stages {
            let map = conv.forward(&x)?;
            let (_, _, sh, sw) = map.dims4()?;
            let tokens = norm.forward(&ops::map_to_tokens(&map)?)?;
            x = ops::tokens_to_map(&tokens, sh, sw)?;
            out.push(tokens);
        }
        Ok(out)
    }
}

/// Combines the three prompt sources into visual consensus prompts.
pub fn fuse_prompts(p_em: &Tensor, p_hand: &Tensor, p_co: &Tensor, fusion: Fusion) -> Result<Tensor> {
    if p_em.dims() != p_hand.dims() || p_em.dims() != p_co.dims() {
        return Err(VcpError::Shape(format!(
            "prompt shapes differ: {:?}, {:?}, {:?}",
            p_em.dims(),
            p_hand.dims(),
            p_co.dims()
        )));
    }
    let a = (p_em + p_co)?;
    let b = (p_hand + p_co)?;
    Ok(match fusion {
        Fusion::Concat => Tensor::cat(&[&a, &b], D::Minus1)?,
        Fusion::Add => (a + b)?,
    })
}

/// Per-stage dispersion MLPs.
#[derive(Clone, Debug)]
pub struct StageDisperser {
    pub depth: usize,
    pub sharing: MlpSharing,
    pub down: Vec<Linear>,
    pub up: Vec<Linear>,
}

impl StageDisperser {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        reduced: usize,
        channels: usize,
        depth: usize,
        sharing: MlpSharing,
    ) -> Result<Self> {
        let (n_down, n_up) = match sharing {
            MlpSharing::Adaptive => (depth, 1),
            MlpSharing::Share => (1, 1),
            MlpSharing::Unshare => (depth, depth),
        };
        let down = (0..n_down)
            .map(|n| store.linear(&format!("{prefix}.down.{n}"), input, reduced, true))
            .collect::<Result<Vec<_>>>()?;
        let up = (0..n_up)
            .map(|n| store.linear(&format!("{prefix}.up.{n}"), reduced, channels, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            depth,
            sharing,
            down,
            up,
        })
    }

    /// Prompt for layer `n`: `up(gelu(down_n(p_visual)))`.
    pub fn disperse(&self, p_visual: &Tensor, n: usize) -> Result<Tensor> {
        if n >= self.depth {
            return Err(VcpError::InvalidInput(format!(
                "layer {n} out of range for a stage of depth {}",
                self.depth
            )));
        }
        let down = &self.down[n.min(self.down.len() - 1)];
        let up = &self.up[n.min(self.up.len() - 1)];
        up.forward(&ops::gelu(&down.forward(p_visual)?)?)
    }
}
