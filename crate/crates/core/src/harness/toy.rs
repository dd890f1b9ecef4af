//! Desk-scale setup: tiny backbone, small prompt modules, toy shapes.

use candle_core::Tensor;

use crate::backbone::{BackboneConfig, MixTransformer};
use crate::config::{Config, CpgConfig};
use crate::data::{self, ImageGroup, SHAPES};
use crate::error::Result;
use crate::metrics::{self, EvalRecord};
use crate::model::VcpModel;
use crate::ops;

/// Configuration that trains on the toy dataset in a few minutes on one core.
pub fn toy_config() -> Config {
    let mut cfg = Config::default();
    cfg.model.backbone = BackboneConfig::tiny();
    cfg.model.cpg = CpgConfig {
        r: 2,
        j: 8,
        k: 8,
        seed_mlp_hidden: 32,
    };
    cfg.model.head.head_dim = 32;
    cfg.model.head.aspp_channels = 32;
    cfg.model.head.num_classes = SHAPES.len();
    cfg.train.input_size = 96;
    cfg.train.steps = Some(200);
    cfg.train.lr = 1e-2;
    cfg.train.lr_final = 1e-5;
    cfg
}

/// Scores predictions for every image of `groups` at `input_size`, one group per
/// forward pass.
pub fn evaluate_groups(
    model: &VcpModel,
    backbone: &MixTransformer,
    groups: &[ImageGroup],
    input_size: usize,
    chunk: usize,
) -> Result<EvalRecord> {
    let device = model.store.device().clone();
    let mut items = Vec::new();
    for group in groups {
        let n = group.len();
        let mut xs = Vec::with_capacity(n * 3 * input_size * input_size);
        let mut masks = Vec::with_capacity(n);
        for (img, mask) in group.images.iter().zip(&group.masks) {
            xs.extend(data::preprocess_image(img, input_size)?);
            masks.push(data::preprocess_mask(mask, input_size)?);
        }
        let x = Tensor::from_vec(xs, (n, 3, input_size, input_size), &device)?.to_dtype(model.dtype())?;
        let out = model.forward_chunked(backbone, &x, chunk, false)?;
        let probs = ops::to_vec_f64(&ops::sigmoid(&out.logits)?)?;
        let plane = input_size * input_size;
        for (i, mask) in masks.iter().enumerate() {
            let gt: Vec<f64> = mask.iter().map(|&v| v as f64).collect();
            items.push(metrics::evaluate_image(&probs[i * plane..(i + 1) * plane], &gt, input_size, input_size)?);
        }
    }
    metrics::aggregate(&items)
}
