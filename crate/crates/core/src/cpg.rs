//! Consensus prompt generator.
//!
//! Per stage: a down-projection of the frozen embedding, learnable saliency
//! seeds clustered NetVLAD-style into a saliency map, group-level selection of
//! the top-k pixel embeddings, and a correlation-based consensus prompt.

use candle_core::{Tensor, D};

use crate::config::{reduced_width, CpgConfig};
use crate::error::{Result, VcpError};
use crate::ops::{self, Conv2d, ConvSpec, Linear};
use crate::params::{Init, ParamStore};

/// Output of the saliency-seed clustering for one stage.
#[derive(Clone, Debug)]
pub struct SaliencyEstimate {
    /// Soft assignment of every token to every seed, `[N, j, L]`; sums to 1 over `j`.
    pub s_soft: Tensor,
    /// Normalised aggregated seed descriptor, `[N, j * C_r]`.
    pub descriptor: Tensor,
    /// Saliency logits `[N, 1, H, W]`.
    pub logits: Tensor,
    /// `sigmoid(logits)`.
    pub map: Tensor,
}

/// Group-level consensus seeds.
#[derive(Clone, Debug)]
pub struct Consensus {
    /// Pixel embeddings of the whole group, `[N * L, C_r]`.
    pub co_seed: Tensor,
    /// Query vector `[C_r]`.
    pub query: Tensor,
    /// Inner product of every row of `co_seed` with the query.
    pub score: Vec<f64>,
    /// Selected rows of `co_seed`, best first.
    pub indices: Vec<usize>,
    /// `[k, C_r]`
    pub rep: Tensor,
}

#[derive(Clone, Debug)]
pub struct ConsensusPrompt {
    /// Correlation of the normalised embedding with each representative seed, `[N, L, k]`.
    pub correlation: Tensor,
    /// Consensus features lifted to the stage width, `[N, L, C_s]`.
    pub features: Tensor,
    /// Spatial attention `[N, 1, H, W]`.
    pub attention: Tensor,
    /// `[N, L, C_r]`
    pub prompt: Tensor,
}

#[derive(Clone, Debug)]
pub struct CpgOutput {
    /// Reduced embedding prompt `[N, L, C_r]`.
    pub p_em: Tensor,
    pub saliency: SaliencyEstimate,
    pub consensus: Consensus,
    pub p_co: ConsensusPrompt,
}

/// Generator for one encoder stage.
#[derive(Clone, Debug)]
pub struct StageCpg {
    pub channels: usize,
    pub reduced: usize,
    pub num_seeds: usize,
    pub top_k: usize,
    pub embed: Linear,
    pub assign: Linear,
    pub seeds: Tensor,
    pub seed_fc1: Linear,
    pub seed_fc2: Linear,
    pub saliency: Linear,
    pub lift1: Linear,
    pub lift2: Linear,
    pub spatial: Conv2d,
    pub fuse: Linear,
}

impl StageCpg {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, cfg: &CpgConfig) -> Result<Self> {
        let c_r = reduced_width(channels, cfg.r)?;
        let (j, k) = (cfg.j, cfg.k);
        Ok(Self {
            channels,
            reduced: c_r,
            num_seeds: j,
            top_k: k,
            embed: store.linear(&format!("{prefix}.embed"), channels, c_r, true)?,
            assign: store.linear(&format!("{prefix}.assign"), c_r, j, true)?,
            seeds: store.tensor(&format!("{prefix}.seeds"), &[j, c_r], Init::Normal(0.02))?,
            seed_fc1: store.linear(&format!("{prefix}.seed_mlp.fc1"), j * c_r, cfg.seed_mlp_hidden, true)?,
            seed_fc2: store.linear(&format!("{prefix}.seed_mlp.fc2"), cfg.seed_mlp_hidden, c_r, true)?,
            saliency: store.linear(&format!("{prefix}.saliency"), 2 * c_r, 1, true)?,
            lift1: store.linear(&format!("{prefix}.lift.fc1"), k, channels, true)?,
            lift2: store.linear(&format!("{prefix}.lift.fc2"), channels, channels, true)?,
            spatial: store.conv(&format!("{prefix}.spatial"), ConvSpec::new(2, 1, 7), true)?,
            fuse: store.linear(&format!("{prefix}.fuse"), channels, c_r, true)?,
        })
    }

    /// `[N, L, C_s]` frozen tokens to `[N, L, C_r]`.
    pub fn project_embeddings(&self, tokens: &Tensor) -> Result<Tensor> {
        let c = tokens.dim(D::Minus1)?;
        if c != self.channels {
            return Err(VcpError::Shape(format!(
                "stage expects {} channels, embedding has {c}",
                self.channels
            )));
        }
        self.embed.forward(tokens)
    }

    /// Soft-assigns tokens to the seeds, aggregates residuals and predicts a saliency map.
    pub fn estimate_saliency(&self, p_em: &Tensor, h: usize, w: usize) -> Result<SaliencyEstimate> {
        let (n, l, c) = p_em.dims3()?;
        if c != self.reduced {
            return Err(VcpError::Shape(format!(
                "seeds have width {}, embedding has {c}",
                self.reduced
            )));
        }
        let normed = ops::l2_normalize(p_em, D::Minus1)?;
        let assign = candle_nn::ops::softmax(&self.assign.forward(&normed)?, D::Minus1)?;
        let s_soft = assign.transpose(1, 2)?.contiguous()?;
        // sum_l s[j,l] (x_l - seed_j) = sum_l s[j,l] x_l - seed_j sum_l s[j,l]
        let weighted = s_soft.matmul(p_em)?;
        let mass = s_soft.sum_keepdim(2)?;
        let update = (weighted - mass.broadcast_mul(&self.seeds.unsqueeze(0)?)?)?;
        let update = ops::l2_normalize(&update, D::Minus1)?;
        let descriptor = ops::l2_normalize(&update.reshape((n, self.num_seeds * c))?, D::Minus1)?;
        let global = self
            .seed_fc2
            .forward(&ops::gelu(&self.seed_fc1.forward(&descriptor)?)?)?;
        let global = global.unsqueeze(1)?.broadcast_as((n, l, c))?;
        let joint = Tensor::cat(&[p_em, &global], D::Minus1)?;
        let logits = ops::tokens_to_map(&self.saliency.forward(&joint)?, h, w)?;
        let map = ops::sigmoid(&logits)?;
        Ok(SaliencyEstimate {
            s_soft,
            descriptor,
            logits,
            map,
        })
    }

    /// Sum over images of the spatial average of `P_em * M`, `[C_r]`.
    pub fn query_sum(&self, p_em: &Tensor, map: &Tensor) -> Result<Tensor> {
        let (n, l, _) = p_em.dims3()?;
        let m = map.reshape((n, l, 1))?;
        Ok(p_em.broadcast_mul(&m)?.mean(1)?.sum(0)?)
    }

    /// Ranks the rows of `co_seed` by their inner product with `query` and keeps the top k.
    pub fn select(&self, co_seed: Tensor, query: Tensor) -> Result<Consensus> {
        let rows = co_seed.dim(0)?;
        if self.top_k > rows {
            return Err(VcpError::InvalidInput(format!(
                "top-k of {} exceeds the {rows} pixel embeddings in the group",
                self.top_k
            )));
        }
        let score = ops::to_vec_f64(&co_seed.detach().matmul(&query.detach().unsqueeze(1)?)?)?;
        let indices = top_k_indices(&score, self.top_k);
        let idx = Tensor::new(indices.iter().map(|&i| i as u32).collect::<Vec<_>>(), co_seed.device())?;
        let rep = co_seed.index_select(&idx, 0)?;
        Ok(Consensus {
            co_seed,
            query,
            score,
            indices,
            rep,
        })
    }

    /// Whole-group consensus from the reduced embeddings and saliency maps.
    pub fn select_consensus(&self, p_em: &Tensor, map: &Tensor) -> Result<Consensus> {
        let (n, l, c) = p_em.dims3()?;
        let query = (self.query_sum(p_em, map)? / n as f64)?;
        self.select(p_em.reshape((n * l, c))?, query)
    }

    /// Correlates the normalised embedding with the representative seeds.
    pub fn correlate(&self, p_em: &Tensor, rep: &Tensor) -> Result<Tensor> {
        let normed = ops::l2_normalize(p_em, D::Minus1)?;
        Ok(normed.broadcast_matmul(&rep.t()?)?)
    }

    /// Spatial attention from channel-mean and channel-max of `[N, L, C_s]` features.
    pub fn spatial_attention(&self, features: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let avg = features.mean_keepdim(D::Minus1)?;
        let max = features.max_keepdim(D::Minus1)?;
        let pooled = ops::tokens_to_map(&Tensor::cat(&[&avg, &max], D::Minus1)?, h, w)?;
        ops::sigmoid(&self.spatial.forward(&pooled)?)
    }

    /// Applies `attention` (`[N, 1, H, W]`) to `features` and maps back to `C_r`.
    pub fn prompt_from_features(&self, features: &Tensor, attention: &Tensor) -> Result<Tensor> {
        let (n, l, _) = features.dims3()?;
        let att = attention.reshape((n, l, 1))?;
        self.fuse.forward(&features.broadcast_mul(&att)?)
    }

    pub fn build_consensus_prompt(&self, p_em: &Tensor, rep: &Tensor, h: usize, w: usize) -> Result<ConsensusPrompt> {
        let correlation = self.correlate(p_em, rep)?;
        let features = self
            .lift2
            .forward(&ops::gelu(&self.lift1.forward(&correlation)?)?)?;
        let attention = self.spatial_attention(&features, h, w)?;
        let prompt = self.prompt_from_features(&features, &attention)?;
        Ok(ConsensusPrompt {
            correlation,
            features,
            attention,
            prompt,
        })
    }

    /// Runs the generator on the embedding of a whole group.
    pub fn generate(&self, tokens: &Tensor, h: usize, w: usize) -> Result<CpgOutput> {
        let p_em = self.project_embeddings(tokens)?;
        let saliency = self.estimate_saliency(&p_em, h, w)?;
        let consensus = self.select_consensus(&p_em, &saliency.map)?;
        let p_co = self.build_consensus_prompt(&p_em, &consensus.rep, h, w)?;
        Ok(CpgOutput {
            p_em,
            saliency,
            consensus,
            p_co,
        })
    }
}

/// Indices of the `k` largest scores; ties go to the lower index.
pub fn top_k_indices(score: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..score.len()).collect();
    idx.sort_by(|&a, &b| score[b].partial_cmp(&score[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
