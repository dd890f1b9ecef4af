//! Training objective: BCE + soft-IoU map loss on the final and auxiliary maps
//! plus group classification cross-entropy.

use candle_core::{DType, Tensor, D};

use crate::config::LossConfig;
use crate::error::{Result, VcpError};
use crate::ops;

pub const IOU_EPS: f64 = 1e-6;

fn check_binary(gt: &Tensor) -> Result<()> {
    let values = ops::to_vec_f64(gt)?;
    if let Some(v) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(VcpError::InvalidInput(format!("ground truth holds {v}, expected 0 or 1")));
    }
    Ok(())
}

/// Mean binary cross-entropy on logits, `max(x,0) - x*g + log(1 + exp(-|x|))`.
pub fn bce_with_logits(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let softplus = ((logits.abs()?.neg()?.exp()? + 1.0)?).log()?;
    let per_pixel = ((logits.relu()? - (logits * gt)?)? + softplus)?;
    Ok(per_pixel.mean_all()?)
}

/// `1 - (sum(pg) + eps) / (sum(p) + sum(g) - sum(pg) + eps)` per image, averaged over the batch.
pub fn soft_iou_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let n = logits.dim(0)?;
    let p = ops::sigmoid(logits)?.reshape((n, ()))?;
    let g = gt.reshape((n, ()))?;
    let inter = (&p * &g)?.sum(1)?;
    let union = ((p.sum(1)? + g.sum(1)?)? - &inter)?;
    let ratio = ((inter + IOU_EPS)? / (union + IOU_EPS)?)?;
    Ok(ratio.neg()?.affine(1.0, 1.0)?.mean_all()?)
}

/// Map loss on `[N, 1, h, w]` logits against a same-sized binary mask.
pub fn map_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if logits.dims() != gt.dims() {
        return Err(VcpError::Shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            logits.dims(),
            gt.dims()
        )));
    }
    check_binary(gt)?;
    let gt = gt.to_dtype(logits.dtype())?;
    Ok((bce_with_logits(logits, &gt)? + soft_iou_loss(logits, &gt)?)?)
}

/// Mean cross-entropy of `[N, K]` logits against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(VcpError::Shape(format!("{n} logit rows for {} labels", labels.len())));
    }
    let mut onehot = vec![0.0f64; n * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(VcpError::InvalidInput(format!("label {l} outside 0..{k}")));
        }
        onehot[i * k + l] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (n, k), logits.device())?.to_dtype(logits.dtype())?;
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok((logp * onehot)?.sum(1)?.neg()?.mean_all()?)
}

/// Differentiable total plus unweighted terms for logging.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub final_map: f64,
    pub aux_maps: Vec<f64>,
    pub classification: f64,
    pub alpha_term: f64,
    pub beta_term: f64,
    pub lambda_term: f64,
}

impl LossBreakdown {
    pub fn total_value(&self) -> Result<f64> {
        Ok(self.total.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `alpha * L(M) + beta * sum_s L(M^s) + lambda * CE`.
///
/// The mask is nearest-downsampled to each auxiliary resolution. A zero
/// `beta` or a disabled classifier keeps those terms out of the graph.
pub fn total_loss(
    logits: &Tensor,
    aux_logits: &[Tensor],
    class_logits: &Tensor,
    gt: &Tensor,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let final_loss = map_loss(logits, gt)?;
    let mut total = (&final_loss * cfg.alpha)?;
    let mut aux_maps = Vec::with_capacity(aux_logits.len());
    let mut aux_sum: Option<Tensor> = None;
    for aux in aux_logits {
        let (_, _, h, w) = aux.dims4()?;
        let target = ops::resize_nearest(gt, h, w)?;
        let l = if cfg.beta == 0.0 {
            map_loss(&aux.detach(), &target)?
        } else {
            map_loss(aux, &target)?
        };
        aux_maps.push(scalar(&l)?);
        if cfg.beta != 0.0 {
            aux_sum = Some(match aux_sum {
                Some(acc) => (acc + l)?,
                None => l,
            });
        }
    }
    if let Some(acc) = &aux_sum {
        total = (total + (acc * cfg.beta)?)?;
    }
    let ce = cross_entropy(class_logits, labels)?;
    let classification = scalar(&ce)?;
    let lambda_term = if cfg.use_classifier {
        total = (total + (&ce * cfg.lambda)?)?;
        cfg.lambda * classification
    } else {
        0.0
    };
    let final_map = scalar(&final_loss)?;
    Ok(LossBreakdown {
        total,
        final_map,
        alpha_term: cfg.alpha * final_map,
        beta_term: if cfg.beta == 0.0 { 0.0 } else { cfg.beta * aux_maps.iter().sum::<f64>() },
        aux_maps,
        classification,
        lambda_term,
    })
}
