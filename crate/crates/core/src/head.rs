//! Prediction head: unified projections, ASPP on the deepest stage, top-down
//! FPN decoding and a linear group classifier.

use candle_core::{Tensor, D};

use crate::backbone::StageEmbedding;
use crate::config::HeadConfig;
use crate::error::{Result, VcpError};
use crate::ops::{self, Conv2d, ConvSpec, Linear};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// Co-saliency logits at input resolution, `[N, 1, H, W]`.
    pub logits: Tensor,
    /// Group classification logits, `[N, num_classes]`.
    pub class_logits: Tensor,
}

#[derive(Clone, Debug)]
struct Aspp {
    point: Conv2d,
    atrous: Vec<Conv2d>,
    pool: Conv2d,
    project: Conv2d,
    bottleneck: Conv2d,
}

impl Aspp {
    fn new(store: &mut ParamStore, width: usize, rates: &[usize]) -> Result<Self> {
        let atrous = rates
            .iter()
            .enumerate()
            .map(|(i, &r)| store.conv(&format!("head.aspp.atrous.{i}"), ConvSpec::new(width, width, 3).dilation(r), true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            point: store.conv("head.aspp.point", ConvSpec::new(width, width, 1), true)?,
            pool: store.conv("head.aspp.pool", ConvSpec::new(width, width, 1), true)?,
            project: store.conv("head.aspp.project", ConvSpec::new((rates.len() + 2) * width, width, 1), true)?,
            bottleneck: store.conv("head.aspp.bottleneck", ConvSpec::new(width, width, 3), true)?,
            atrous,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let mut branches = vec![self.point.forward(x)?.relu()?];
        for conv in &self.atrous {
            branches.push(conv.forward(x)?.relu()?);
        }
        let pooled = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
        let pooled = self.pool.forward(&pooled)?.relu()?;
        branches.push(pooled.broadcast_as((n, c, h, w))?.contiguous()?);
        let y = self.project.forward(&Tensor::cat(&branches, 1)?)?.relu()?;
        Ok(self.bottleneck.forward(&y)?.relu()?)
    }
}

#[derive(Clone, Debug)]
pub struct FpnHead {
    lateral: Vec<Conv2d>,
    deep: Conv2d,
    aspp: Aspp,
    top: Conv2d,
    smooth: Vec<Conv2d>,
    refine: Conv2d,
    predict: Conv2d,
    classifier: Linear,
}

#[derive(Clone, Debug)]
pub struct SegformerHead {
    linear: Vec<Linear>,
    fuse: Conv2d,
    predict: Conv2d,
    classifier: Linear,
}

#[derive(Clone, Debug)]
pub enum Head {
    Fpn(FpnHead),
    /// All-MLP decoder, kept as a configuration variant.
    Segformer(SegformerHead),
}

fn check_ladder(features: &[StageEmbedding]) -> Result<()> {
    if features.len() != 4 {
        return Err(VcpError::Shape(format!("head needs 4 stage features, got {}", features.len())));
    }
    for s in 1..4 {
        let (a, b) = (&features[s - 1], &features[s]);
        if b.height > a.height || b.width > a.width || a.tokens.dim(0)? != b.tokens.dim(0)? {
            return Err(VcpError::Shape(format!(
                "stage {s} is {}x{} after a {}x{} stage",
                b.height, b.width, a.height, a.width
            )));
        }
    }
    Ok(())
}

impl Head {
    pub fn new(store: &mut ParamStore, channels: [usize; 4], cfg: &HeadConfig) -> Result<Self> {
        let d = cfg.head_dim;
        if cfg.use_segformer_head {
            let linear = (0..4)
                .map(|s| store.linear(&format!("head.linear.{s}"), channels[s], d, true))
                .collect::<Result<Vec<_>>>()?;
            return Ok(Head::Segformer(SegformerHead {
                linear,
                fuse: store.conv("head.fuse", ConvSpec::new(4 * d, d, 1), true)?,
                predict: store.conv("head.predict", ConvSpec::new(d, 1, 1), true)?,
                classifier: store.linear("head.classifier", d, cfg.num_classes, true)?,
            }));
        }
        let a = cfg.aspp_channels;
        let lateral = (0..3)
            .map(|s| store.conv(&format!("head.lateral.{s}"), ConvSpec::new(channels[s], d, 1), true))
            .collect::<Result<Vec<_>>>()?;
        let deep = store.conv("head.deep", ConvSpec::new(channels[3], a, 1), true)?;
        let aspp = Aspp::new(store, a, &cfg.aspp_rates)?;
        let top = store.conv("head.top", ConvSpec::new(a, d, 1), true)?;
        let smooth = (0..3)
            .map(|s| store.conv(&format!("head.smooth.{s}"), ConvSpec::new(d, d, 3), true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Head::Fpn(FpnHead {
            lateral,
            deep,
            aspp,
            top,
            smooth,
            refine: store.conv("head.refine", ConvSpec::new(d, d, 3), true)?,
            predict: store.conv("head.predict", ConvSpec::new(d, 1, 1), true)?,
            classifier: store.linear("head.classifier", a, cfg.num_classes, true)?,
        }))
    }

    /// Decodes the four stage features into an `out_h x out_w` map and class logits.
    pub fn predict(&self, features: &[StageEmbedding], out_h: usize, out_w: usize) -> Result<HeadOutput> {
        check_ladder(features)?;
        let maps = features.iter().map(|f| f.to_map()).collect::<Result<Vec<_>>>()?;
        match self {
            Head::Fpn(h) => h.predict(&maps, out_h, out_w),
            Head::Segformer(h) => h.predict(&maps, out_h, out_w),
        }
    }
}

fn global_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.mean(D::Minus1)?)
}

impl FpnHead {
    fn predict(&self, maps: &[Tensor], out_h: usize, out_w: usize) -> Result<HeadOutput> {
        let context = self.aspp.forward(&self.deep.forward(&maps[3])?)?;
        let class_logits = self.classifier.forward(&global_pool(&context)?)?;
        let mut p = self.top.forward(&context)?;
        for s in (0..3).rev() {
            let (_, _, h, w) = maps[s].dims4()?;
            let merged = (self.lateral[s].forward(&maps[s])? + ops::resize_bilinear(&p, h, w)?)?;
            p = self.smooth[s].forward(&merged)?.relu()?;
        }
        let p = self.refine.forward(&p)?.relu()?;
        let logits = ops::resize_bilinear(&self.predict.forward(&p)?, out_h, out_w)?;
        Ok(HeadOutput { logits, class_logits })
    }
}

impl SegformerHead {
    fn predict(&self, maps: &[Tensor], out_h: usize, out_w: usize) -> Result<HeadOutput> {
        let (_, _, h1, w1) = maps[0].dims4()?;
        let mut parts = Vec::with_capacity(4);
        for (s, m) in maps.iter().enumerate() {
            let (_, _, h, w) = m.dims4()?;
            let t = self.linear[s].forward(&ops::map_to_tokens(m)?)?;
            parts.push(ops::resize_bilinear(&ops::tokens_to_map(&t, h, w)?, h1, w1)?);
        }
        let fused = self.fuse.forward(&Tensor::cat(&parts, 1)?)?.relu()?;
        let class_logits = self.classifier.forward(&global_pool(&fused)?)?;
        let logits = ops::resize_bilinear(&self.predict.forward(&fused)?, out_h, out_w)?;
        Ok(HeadOutput { logits, class_logits })
    }
}
