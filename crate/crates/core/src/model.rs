//! Assembly of the tunable modules around a frozen encoder.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};

use crate::backbone::{MixTransformer, StageEmbedding};
use crate::config::{Fusion, ModelConfig};
use crate::cpd::{fuse_prompts, HandcraftedPrompts, StageDisperser};
use crate::cpg::StageCpg;
use crate::error::{Result, VcpError};
use crate::head::Head;
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[N, 1, H, W]`
    pub logits: Tensor,
    /// `[N, num_classes]`
    pub class_logits: Tensor,
    /// Saliency logits of every prompted stage, in stage order.
    pub aux_logits: Vec<Tensor>,
    /// Indices into the group's flattened pixel embeddings chosen as consensus seeds.
    pub consensus: Vec<Option<Vec<usize>>>,
}

/// Tunable parameter counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamTable {
    pub backbone: usize,
    pub cpg: usize,
    pub cpd: usize,
    pub head: usize,
}

impl ParamTable {
    pub fn total(&self) -> usize {
        self.backbone + self.cpg + self.cpd + self.head
    }

    pub fn rows(&self) -> [(&'static str, usize); 4] {
        [
            ("backbone", self.backbone),
            ("cpg", self.cpg),
            ("cpd", self.cpd),
            ("head", self.head),
        ]
    }

    /// Bytes of the tunable tensors in 32-bit storage.
    pub fn fp32_bytes(&self) -> usize {
        4 * self.total()
    }
}

pub struct VcpModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub cpg: Vec<Option<StageCpg>>,
    pub hand: Option<HandcraftedPrompts>,
    pub dispersers: Vec<Option<StageDisperser>>,
    pub head: Head,
}

impl VcpModel {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype, device);
        let bb = &config.backbone;
        let channels = bb.channels();
        let reduced = config.reduced_channels()?;
        let mut cpg = Vec::with_capacity(4);
        for s in 0..4 {
            cpg.push(if config.stage_mask[s] {
                Some(StageCpg::new(&mut store, &format!("cpg.{s}"), channels[s], &config.cpg)?)
            } else {
                None
            });
        }
        let last = (0..4).rev().find(|&s| config.stage_mask[s]);
        let hand = match last {
            Some(last) => Some(HandcraftedPrompts::new(
                &mut store,
                bb,
                config.cpg.r,
                last,
                config.cpd.fft_mask_ratio,
            )?),
            None => None,
        };
        let mut dispersers = Vec::with_capacity(4);
        for s in 0..4 {
            dispersers.push(if config.stage_mask[s] {
                let input = match config.cpd.fusion {
                    Fusion::Concat => 2 * reduced[s],
                    Fusion::Add => reduced[s],
                };
                Some(StageDisperser::new(
                    &mut store,
                    &format!("cpd.{s}"),
                    input,
                    reduced[s],
                    channels[s],
                    bb.stages[s].depth,
                    config.cpd.mlp_sharing,
                )?)
            } else {
                None
            });
        }
        let head = Head::new(&mut store, channels, &config.head)?;
        Ok(Self {
            config: config.clone(),
            store,
            cpg,
            hand,
            dispersers,
            head,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn param_table(&self) -> ParamTable {
        let by_module: BTreeMap<String, usize> = self.store.count_by_module();
        let get = |k: &str| by_module.get(k).copied().unwrap_or(0);
        ParamTable {
            backbone: 0,
            cpg: get("cpg"),
            cpd: get("cpd") + get("hand"),
            head: get("head"),
        }
    }

    fn check_backbone(&self, backbone: &MixTransformer) -> Result<()> {
        if backbone.config().stages != self.config.backbone.stages {
            return Err(VcpError::Config(
                "backbone weights do not match the model's backbone configuration".into(),
            ));
        }
        Ok(())
    }

    /// Forward pass over one group.
    pub fn forward(&self, backbone: &MixTransformer, images: &Tensor) -> Result<ModelOutput> {
        let n = images.dim(0)?;
        self.forward_chunked(backbone, images, n.max(1), true)
    }

    /// Forward pass over one group, pushing at most `chunk` images through the
    /// encoder at a time. Consensus seeds are still chosen over the whole group.
    /// With `track_grad = false` intermediate graphs are dropped after every layer.
    pub fn forward_chunked(
        &self,
        backbone: &MixTransformer,
        images: &Tensor,
        chunk: usize,
        track_grad: bool,
    ) -> Result<ModelOutput> {
        self.check_backbone(backbone)?;
        let (n, _, h, w) = images.dims4()?;
        if n == 0 || chunk == 0 {
            return Err(VcpError::InvalidInput("empty group or zero chunk size".into()));
        }
        let images = images.to_dtype(self.dtype())?;
        let mut xs = Vec::new();
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            xs.push(images.narrow(0, start, len)?);
            start += len;
        }
        let hand = match &self.hand {
            Some(hp) => xs.iter().map(|x| hp.forward(x)).collect::<Result<Vec<_>>>()?,
            None => vec![Vec::new(); xs.len()],
        };
        let keep = |t: Tensor| if track_grad { t } else { t.detach() };

        let mut features: Vec<Vec<StageEmbedding>> = vec![Vec::new(); xs.len()];
        let mut aux_logits = Vec::new();
        let mut consensus = Vec::with_capacity(4);
        for s in 0..4 {
            let embs = xs
                .iter()
                .map(|x| backbone.patch_embed(s, x))
                .collect::<Result<Vec<_>>>()?;
            let (sh, sw) = (embs[0].height, embs[0].width);
            let visual = match &self.cpg[s] {
                Some(cpg) => {
                    let p_em = embs
                        .iter()
                        .map(|e| cpg.project_embeddings(&e.tokens))
                        .collect::<Result<Vec<_>>>()?;
                    let sal = p_em
                        .iter()
                        .map(|p| cpg.estimate_saliency(p, sh, sw))
                        .collect::<Result<Vec<_>>>()?;
                    let mut query = cpg.query_sum(&p_em[0], &sal[0].map)?;
                    for (p, e) in p_em.iter().zip(&sal).skip(1) {
                        query = (query + cpg.query_sum(p, &e.map)?)?;
                    }
                    let query = (query / n as f64)?;
                    let rows = p_em
                        .iter()
                        .map(|p| p.flatten_to(1))
                        .collect::<candle_core::Result<Vec<_>>>()?;
                    let found = cpg.select(Tensor::cat(&rows, 0)?, query)?;
                    let mut visual = Vec::with_capacity(xs.len());
                    for (c, p) in p_em.iter().enumerate() {
                        let p_co = cpg.build_consensus_prompt(p, &found.rep, sh, sw)?;
                        visual.push(fuse_prompts(p, &hand[c][s], &p_co.prompt, self.config.cpd.fusion)?);
                    }
                    let aux: Vec<Tensor> = sal.into_iter().map(|e| e.logits).collect();
                    aux_logits.push(keep(Tensor::cat(&aux, 0)?));
                    consensus.push(Some(found.indices));
                    Some(visual)
                }
                None => {
                    consensus.push(None);
                    None
                }
            };
            let mut next = Vec::with_capacity(xs.len());
            for (c, emb) in embs.into_iter().enumerate() {
                let mut tokens = emb.tokens;
                for layer in 0..self.config.backbone.stages[s].depth {
                    if let (Some(v), Some(d)) = (&visual, &self.dispersers[s]) {
                        tokens = (tokens + d.disperse(&v[c], layer)?)?;
                    }
                    tokens = keep(backbone.layer(s, layer, &tokens, sh, sw)?);
                }
                let tokens = backbone.stage_norm(s, &tokens)?;
                next.push(crate::ops::tokens_to_map(&tokens, sh, sw)?);
                features[c].push(StageEmbedding {
                    tokens,
                    height: sh,
                    width: sw,
                });
            }
            xs = next;
        }
        let mut logits = Vec::with_capacity(features.len());
        let mut class_logits = Vec::with_capacity(features.len());
        for f in &features {
            let out = self.head.predict(f, h, w)?;
            logits.push(keep(out.logits));
            class_logits.push(keep(out.class_logits));
        }
        Ok(ModelOutput {
            logits: Tensor::cat(&logits, 0)?,
            class_logits: Tensor::cat(&class_logits, 0)?,
            aux_logits,
            consensus,
        })
    }
}
