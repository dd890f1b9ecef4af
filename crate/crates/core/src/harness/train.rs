//! Optimisation loop over the tunable parameters.

use std::collections::HashMap;
use std::path::PathBuf;

use candle_core::{Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::MixTransformer;
use crate::config::Config;
use crate::data::{self, ImageGroup, GROUPS_PER_BATCH};
use crate::error::{Result, VcpError};
use crate::model::VcpModel;
use crate::objectives::total_loss;

/// Cosine decay from `lr` at step 0 to `lr_final` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr: f64, lr_final: f64) -> f64 {
    if total == 0 {
        return lr;
    }
    let t = (step.min(total) as f64) / total as f64;
    lr_final + 0.5 * (lr - lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Number of optimisation steps implied by the training section.
pub fn total_steps(cfg: &Config, num_groups: usize) -> usize {
    if let Some(s) = cfg.train.steps {
        return s;
    }
    let per_epoch = cfg
        .train
        .steps_per_epoch
        .unwrap_or_else(|| num_groups.div_ceil(GROUPS_PER_BATCH).max(1));
    cfg.train.epochs * per_epoch
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub alpha_term: f64,
    pub beta_term: f64,
    pub lambda_term: f64,
    pub final_map: f64,
    pub aux_maps: Vec<f64>,
    pub classification: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,lr,total,alpha_term,beta_term,lambda_term,final_map,aux_maps,classification";

    pub fn csv_row(&self) -> String {
        let aux: Vec<String> = self.aux_maps.iter().map(|v| format!("{v:.6}")).collect();
        format!(
            "{},{:.8},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6}",
            self.step,
            self.lr,
            self.total,
            self.alpha_term,
            self.beta_term,
            self.lambda_term,
            self.final_map,
            aux.join(";"),
            self.classification
        )
    }
}

pub struct TrainOutcome {
    pub model: VcpModel,
    pub log: Vec<StepLog>,
    pub steps: usize,
}

/// Splits variables into weight-decayed matrices/kernels and undecayed biases and norm scales.
pub fn decay_groups(model: &VcpModel) -> (Vec<Var>, Vec<Var>) {
    let mut decay = Vec::new();
    let mut plain = Vec::new();
    for (_, var) in model.store.vars() {
        if var.rank() >= 2 {
            decay.push(var);
        } else {
            plain.push(var);
        }
    }
    (decay, plain)
}

/// Keeps decoded images in memory when the dataset is small enough.
struct SampleCache {
    size: usize,
    enabled: bool,
    entries: HashMap<PathBuf, (Vec<f32>, Vec<f32>)>,
}

impl SampleCache {
    const MAX_BYTES: usize = 1 << 30;

    fn new(groups: &[ImageGroup], size: usize) -> Self {
        let images: usize = groups.iter().map(|g| g.len()).sum();
        Self {
            size,
            enabled: images * size * size * 16 <= Self::MAX_BYTES,
            entries: HashMap::new(),
        }
    }

    fn load(&mut self, group: &ImageGroup, members: &[usize], model: &VcpModel) -> Result<(Tensor, Tensor)> {
        let (dtype, device) = (model.dtype(), model.store.device().clone());
        let s = self.size;
        let n = members.len();
        if !self.enabled {
            let imgs: Vec<PathBuf> = members.iter().map(|&i| group.images[i].clone()).collect();
            let masks: Vec<PathBuf> = members.iter().map(|&i| group.masks[i].clone()).collect();
            let (x, y) = data::load_batch(&imgs, Some(&masks), s, dtype, &device)?;
            return Ok((x, y.expect("masks requested")));
        }
        let mut xs = Vec::with_capacity(n * 3 * s * s);
        let mut ys = Vec::with_capacity(n * s * s);
        for &i in members {
            let key = group.images[i].clone();
            if !self.entries.contains_key(&key) {
                let x = data::preprocess_image(&group.images[i], s)?;
                let y = data::preprocess_mask(&group.masks[i], s)?;
                self.entries.insert(key.clone(), (x, y));
            }
            let (x, y) = &self.entries[&key];
            xs.extend_from_slice(x);
            ys.extend_from_slice(y);
        }
        Ok((
            Tensor::from_vec(xs, (n, 3, s, s), &device)?.to_dtype(dtype)?,
            Tensor::from_vec(ys, (n, 1, s, s), &device)?.to_dtype(dtype)?,
        ))
    }
}

fn finite(step: usize, term: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(VcpError::NonFinite {
            step,
            term: term.to_string(),
        })
    }
}

/// Trains a fresh model on `groups`. `on_step` sees every logged step.
pub fn train(
    cfg: &Config,
    groups: &[ImageGroup],
    backbone: &MixTransformer,
    device: &Device,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if groups.len() < GROUPS_PER_BATCH {
        return Err(VcpError::InvalidInput(format!(
            "training needs at least {GROUPS_PER_BATCH} groups, found {}",
            groups.len()
        )));
    }
    if let Some(g) = groups.iter().find(|g| g.label_index >= cfg.model.head.num_classes) {
        return Err(VcpError::Config(format!(
            "group `{}` has label {} but the classifier has {} classes",
            g.name, g.label_index, cfg.model.head.num_classes
        )));
    }
    let tc = &cfg.train;
    let model = VcpModel::new(&cfg.model, tc.seed, tc.precision.dtype(), device)?;
    let steps = total_steps(cfg, groups.len());
    let (decay, plain) = decay_groups(&model);
    let params = |wd: f64| ParamsAdamW {
        lr: tc.lr,
        beta1: tc.beta1,
        beta2: tc.beta2,
        eps: tc.eps,
        weight_decay: wd,
    };
    let mut opt_decay = AdamW::new(decay, params(tc.weight_decay))?;
    let mut opt_plain = AdamW::new(plain, params(0.0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let sizes: Vec<usize> = groups.iter().map(|g| g.len()).collect();
    let mut cache = SampleCache::new(groups, tc.input_size);
    let mut log = Vec::with_capacity(steps);

    for step in 0..steps {
        let lr = cosine_lr(step, steps, tc.lr, tc.lr_final);
        opt_decay.set_learning_rate(lr);
        opt_plain.set_learning_rate(lr);
        let batch = data::sample_batch(&sizes, tc.max_group_size, &mut rng)?;
        let mut total: Option<Tensor> = None;
        let mut entry = StepLog {
            step,
            lr,
            total: 0.0,
            alpha_term: 0.0,
            beta_term: 0.0,
            lambda_term: 0.0,
            final_map: 0.0,
            aux_maps: Vec::new(),
            classification: 0.0,
        };
        let share = 1.0 / GROUPS_PER_BATCH as f64;
        for (g, members) in batch.groups.iter().zip(&batch.members) {
            let group = &groups[*g];
            let (x, y) = cache.load(group, members, &model)?;
            let out = model.forward(backbone, &x)?;
            let labels = vec![group.label_index; members.len()];
            let loss = total_loss(&out.logits, &out.aux_logits, &out.class_logits, &y, &labels, &cfg.loss)?;
            entry.alpha_term += share * loss.alpha_term;
            entry.beta_term += share * loss.beta_term;
            entry.lambda_term += share * loss.lambda_term;
            entry.final_map += share * loss.final_map;
            entry.classification += share * loss.classification;
            if entry.aux_maps.is_empty() {
                entry.aux_maps = vec![0.0; loss.aux_maps.len()];
            }
            for (acc, v) in entry.aux_maps.iter_mut().zip(&loss.aux_maps) {
                *acc += share * v;
            }
            let scaled = (loss.total * share)?;
            total = Some(match total {
                Some(t) => (t + scaled)?,
                None => scaled,
            });
        }
        let total = total.expect("three groups per batch");
        entry.total = total.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        finite(step, "total", entry.total)?;
        finite(step, "alpha", entry.alpha_term)?;
        finite(step, "beta", entry.beta_term)?;
        finite(step, "lambda", entry.lambda_term)?;
        let grads = total.backward()?;
        opt_decay.step(&grads)?;
        opt_plain.step(&grads)?;
        if tc.log_every > 0 && (step % tc.log_every == 0 || step + 1 == steps) {
            log::info!(
                "step {step}/{steps} lr {lr:.2e} loss {:.4} (alpha {:.4}, beta {:.4}, lambda {:.4})",
                entry.total,
                entry.alpha_term,
                entry.beta_term,
                entry.lambda_term
            );
        }
        on_step(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log, steps })
}
