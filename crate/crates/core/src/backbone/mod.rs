//! Frozen hierarchical Mix-Transformer encoder with per-layer prompt injection.
//!
//! Weights are plain tensors rather than variables, so no gradient can reach them.

mod config;

pub use config::{BackboneConfig, BackboneFamily, StageConfig};

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VcpError};
use crate::ops::{self, Conv2d, ConvSpec, LayerNorm, Linear};
use crate::params::{sample, Init};

/// Token sequence of one stage together with its spatial layout.
#[derive(Clone, Debug)]
pub struct StageEmbedding {
    /// `[N, H*W, C]`
    pub tokens: Tensor,
    pub height: usize,
    pub width: usize,
}

impl StageEmbedding {
    pub fn to_map(&self) -> Result<Tensor> {
        ops::tokens_to_map(&self.tokens, self.height, self.width)
    }
}

#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// Patch-embedding output of every stage, before its transformer layers.
    pub embeddings: Vec<StageEmbedding>,
    /// Normalised output of every stage.
    pub features: Vec<StageEmbedding>,
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    reduction: Option<(Conv2d, LayerNorm)>,
    out: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    dwconv: Conv2d,
    fc2: Linear,
    heads: usize,
}

#[derive(Clone, Debug)]
struct Stage {
    embed: Conv2d,
    embed_norm: LayerNorm,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

/// Expected `(name, shape)` of every encoder weight, in a fixed order.
pub fn weight_layout(cfg: &BackboneConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
    let mut c_in = cfg.in_channels;
    for (s, st) in cfg.stages.iter().enumerate() {
        let c = st.channels;
        let p = format!("encoder.patch_embeddings.{s}");
        push(format!("{p}.proj.weight"), vec![c, c_in, st.patch_size, st.patch_size]);
        push(format!("{p}.proj.bias"), vec![c]);
        push(format!("{p}.layer_norm.weight"), vec![c]);
        push(format!("{p}.layer_norm.bias"), vec![c]);
        let hidden = c * st.mlp_ratio;
        for n in 0..st.depth {
            let b = format!("encoder.block.{s}.{n}");
            for ln in ["layer_norm_1", "layer_norm_2"] {
                push(format!("{b}.{ln}.weight"), vec![c]);
                push(format!("{b}.{ln}.bias"), vec![c]);
            }
            for qkv in ["query", "key", "value"] {
                push(format!("{b}.attention.self.{qkv}.weight"), vec![c, c]);
                push(format!("{b}.attention.self.{qkv}.bias"), vec![c]);
            }
            if st.sr_ratio > 1 {
                push(format!("{b}.attention.self.sr.weight"), vec![c, c, st.sr_ratio, st.sr_ratio]);
                push(format!("{b}.attention.self.sr.bias"), vec![c]);
                push(format!("{b}.attention.self.layer_norm.weight"), vec![c]);
                push(format!("{b}.attention.self.layer_norm.bias"), vec![c]);
            }
            push(format!("{b}.attention.output.dense.weight"), vec![c, c]);
            push(format!("{b}.attention.output.dense.bias"), vec![c]);
            push(format!("{b}.mlp.dense1.weight"), vec![hidden, c]);
            push(format!("{b}.mlp.dense1.bias"), vec![hidden]);
            push(format!("{b}.mlp.dwconv.dwconv.weight"), vec![hidden, 1, 3, 3]);
            push(format!("{b}.mlp.dwconv.dwconv.bias"), vec![hidden]);
            push(format!("{b}.mlp.dense2.weight"), vec![c, hidden]);
            push(format!("{b}.mlp.dense2.bias"), vec![c]);
        }
        push(format!("encoder.layer_norm.{s}.weight"), vec![c]);
        push(format!("encoder.layer_norm.{s}.bias"), vec![c]);
        c_in = c;
    }
    out
}

enum MappedKey {
    One(String),
    /// Fused key/value projection, split along the output dimension.
    KeyValue(String),
}

fn strip_index(s: &str, prefix: &str) -> Option<(usize, String)> {
    let rest = s.strip_prefix(prefix)?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    let idx: usize = digits.parse().ok()?;
    Some((idx.checked_sub(1)?, rest[digits.len()..].to_string()))
}

/// Maps Hugging Face or original MiT checkpoint names onto the encoder layout.
fn map_key(raw: &str) -> Option<MappedKey> {
    let mut key = raw;
    for prefix in ["segformer.", "backbone.", "module."] {
        if let Some(k) = key.strip_prefix(prefix) {
            key = k;
        }
    }
    if key.starts_with("encoder.") {
        return Some(MappedKey::One(key.to_string()));
    }
    if let Some((s, rest)) = strip_index(key, "patch_embed") {
        let rest = rest.strip_prefix('.')?;
        let mapped = if let Some(p) = rest.strip_prefix("proj.") {
            format!("proj.{p}")
        } else {
            format!("layer_norm.{}", rest.strip_prefix("norm.")?)
        };
        return Some(MappedKey::One(format!("encoder.patch_embeddings.{s}.{mapped}")));
    }
    if let Some((s, rest)) = strip_index(key, "block") {
        let rest = rest.strip_prefix('.')?;
        let (n, tail) = rest.split_once('.')?;
        let n: usize = n.parse().ok()?;
        let base = format!("encoder.block.{s}.{n}");
        const TABLE: [(&str, &str); 9] = [
            ("norm1.", "layer_norm_1."),
            ("norm2.", "layer_norm_2."),
            ("attn.q.", "attention.self.query."),
            ("attn.sr.", "attention.self.sr."),
            ("attn.norm.", "attention.self.layer_norm."),
            ("attn.proj.", "attention.output.dense."),
            ("mlp.fc1.", "mlp.dense1."),
            ("mlp.dwconv.dwconv.", "mlp.dwconv.dwconv."),
            ("mlp.fc2.", "mlp.dense2."),
        ];
        if let Some(p) = tail.strip_prefix("attn.kv.") {
            return Some(MappedKey::KeyValue(format!("{base}.attention.self.{{}}.{p}")));
        }
        for (from, to) in TABLE {
            if let Some(p) = tail.strip_prefix(from) {
                return Some(MappedKey::One(format!("{base}.{to}{p}")));
            }
        }
        return None;
    }
    if let Some((s, rest)) = strip_index(key, "norm") {
        let p = rest.strip_prefix('.')?;
        return Some(MappedKey::One(format!("encoder.layer_norm.{s}.{p}")));
    }
    None
}

/// Frozen encoder.
#[derive(Clone, Debug)]
pub struct MixTransformer {
    config: BackboneConfig,
    weights: BTreeMap<String, Tensor>,
    stages: Vec<Stage>,
}

impl MixTransformer {
    /// Seeded synthetic weights using the usual transformer initialisation.
    pub fn random(config: &BackboneConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = BTreeMap::new();
        for (name, shape) in weight_layout(config) {
            let init = if name.ends_with(".bias") {
                Init::Zeros
            } else if name.contains("norm") {
                Init::Ones
            } else if shape.len() == 4 {
                Init::ConvFanOut
            } else {
                Init::TruncNormal(0.02)
            };
            let init = match (init, &name) {
                (Init::ConvFanOut, n) if n.contains("dwconv") => {
                    let fan_out = 9.0;
                    Init::Normal((2.0 / fan_out as f64).sqrt())
                }
                (i, _) => i,
            };
            let t = Tensor::from_vec(sample(&mut rng, init, &shape), shape.as_slice(), device)?
                .to_dtype(dtype)?;
            weights.insert(name, t);
        }
        Self::from_weights(config, weights)
    }

    /// Reads a safetensors checkpoint.
    ///
    /// Unknown keys (decoder heads, classifiers) are skipped with a warning;
    /// any missing encoder key is an error.
    pub fn load(path: &Path, config: &BackboneConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let raw = candle_core::safetensors::load(path, &Device::Cpu)?;
        let mut weights = BTreeMap::new();
        let mut keys: Vec<_> = raw.keys().cloned().collect();
        keys.sort();
        for key in keys {
            let t = &raw[&key];
            match map_key(&key) {
                Some(MappedKey::One(name)) => {
                    weights.insert(name, t.clone());
                }
                Some(MappedKey::KeyValue(pattern)) => {
                    let half = t.dim(0)? / 2;
                    weights.insert(pattern.replace("{}", "key"), t.narrow(0, 0, half)?);
                    weights.insert(pattern.replace("{}", "value"), t.narrow(0, half, half)?);
                }
                None => log::warn!("ignoring unrecognised backbone weight `{key}`"),
            }
        }
        let layout = weight_layout(config);
        let expected: BTreeMap<_, _> = layout.iter().cloned().collect();
        for name in weights.keys() {
            if !expected.contains_key(name) {
                log::warn!("ignoring backbone weight `{name}` not used by this configuration");
            }
        }
        let mut kept = BTreeMap::new();
        for (name, shape) in layout {
            let t = weights
                .remove(&name)
                .ok_or_else(|| VcpError::MissingWeight(name.clone()))?;
            if t.dims() != shape.as_slice() {
                return Err(VcpError::WeightShape {
                    name,
                    expected: shape,
                    found: t.dims().to_vec(),
                });
            }
            kept.insert(name, t.to_dtype(dtype)?.to_device(device)?);
        }
        Self::from_weights(config, kept)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.weights.clone().into_iter().collect(), path)?;
        Ok(())
    }

    fn from_weights(config: &BackboneConfig, weights: BTreeMap<String, Tensor>) -> Result<Self> {
        let eps = config.layer_norm_eps;
        let get = |name: &str| -> Result<Tensor> {
            weights
                .get(name)
                .cloned()
                .ok_or_else(|| VcpError::MissingWeight(name.to_string()))
        };
        let lin = |p: &str| -> Result<Linear> {
            Ok(Linear {
                weight: get(&format!("{p}.weight"))?,
                bias: Some(get(&format!("{p}.bias"))?),
            })
        };
        let norm = |p: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                weight: get(&format!("{p}.weight"))?,
                bias: get(&format!("{p}.bias"))?,
                eps,
            })
        };
        let conv = |p: &str, spec: ConvSpec| -> Result<Conv2d> {
            Ok(Conv2d {
                spec,
                weight: get(&format!("{p}.weight"))?,
                bias: Some(get(&format!("{p}.bias"))?),
            })
        };
        let mut stages = Vec::new();
        let mut c_in = config.in_channels;
        for (s, st) in config.stages.iter().enumerate() {
            let c = st.channels;
            let p = format!("encoder.patch_embeddings.{s}");
            let embed = conv(
                &format!("{p}.proj"),
                ConvSpec::new(c_in, c, st.patch_size).stride(st.stride),
            )?;
            let embed_norm = norm(&format!("{p}.layer_norm"))?;
            let hidden = c * st.mlp_ratio;
            let mut blocks = Vec::new();
            for n in 0..st.depth {
                let b = format!("encoder.block.{s}.{n}");
                let reduction = if st.sr_ratio > 1 {
                    Some((
                        conv(
                            &format!("{b}.attention.self.sr"),
                            ConvSpec::new(c, c, st.sr_ratio).stride(st.sr_ratio).padding(0),
                        )?,
                        norm(&format!("{b}.attention.self.layer_norm"))?,
                    ))
                } else {
                    None
                };
                blocks.push(Block {
                    norm1: norm(&format!("{b}.layer_norm_1"))?,
                    query: lin(&format!("{b}.attention.self.query"))?,
                    key: lin(&format!("{b}.attention.self.key"))?,
                    value: lin(&format!("{b}.attention.self.value"))?,
                    reduction,
                    out: lin(&format!("{b}.attention.output.dense"))?,
                    norm2: norm(&format!("{b}.layer_norm_2"))?,
                    fc1: lin(&format!("{b}.mlp.dense1"))?,
                    dwconv: conv(
                        &format!("{b}.mlp.dwconv.dwconv"),
                        ConvSpec::new(hidden, hidden, 3).groups(hidden),
                    )?,
                    fc2: lin(&format!("{b}.mlp.dense2"))?,
                    heads: st.heads,
                });
            }
            stages.push(Stage {
                embed,
                embed_norm,
                blocks,
                norm: norm(&format!("encoder.layer_norm.{s}"))?,
            });
            c_in = c;
        }
        Ok(Self {
            config: config.clone(),
            weights,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn num_params(&self) -> usize {
        self.weights.values().map(|t| t.elem_count()).sum()
    }

    /// Overlapping patch embedding of stage `s` applied to a `[N, C, H, W]` map.
    pub fn patch_embed(&self, s: usize, x: &Tensor) -> Result<StageEmbedding> {
        let stage = &self.stages[s];
        let map = stage.embed.forward(x)?;
        let (_, _, h, w) = map.dims4()?;
        let tokens = stage.embed_norm.forward(&ops::map_to_tokens(&map)?)?;
        Ok(StageEmbedding {
            tokens,
            height: h,
            width: w,
        })
    }

    /// One transformer layer. `tokens` already carries any prompt.
    pub fn layer(&self, s: usize, n: usize, tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let blk = &self.stages[s].blocks[n];
        let y = blk.norm1.forward(tokens)?;
        let tokens = (tokens + blk.attention(&y, h, w)?)?;
        let y = blk.norm2.forward(&tokens)?;
        let hidden = blk.fc1.forward(&y)?;
        let hidden = blk.dwconv.forward(&ops::tokens_to_map(&hidden, h, w)?)?;
        let hidden = ops::gelu(&ops::map_to_tokens(&hidden)?)?;
        Ok((tokens + blk.fc2.forward(&hidden)?)?)
    }

    pub fn stage_norm(&self, s: usize, tokens: &Tensor) -> Result<Tensor> {
        self.stages[s].norm.forward(tokens)
    }

    /// Runs the encoder. `prompt(stage, layer, embedding)` may return a
    /// `[N, L_s, C_s]` tensor that is added to the input of that layer.
    /// `embedding` is the patch-embedding output of the stage.
    pub fn forward_with_prompts<F>(&self, images: &Tensor, mut prompt: F) -> Result<BackboneOutput>
    where
        F: FnMut(usize, usize, &StageEmbedding) -> Result<Option<Tensor>>,
    {
        let (_, c, _, _) = images.dims4()?;
        if c != self.config.in_channels {
            return Err(VcpError::Shape(format!(
                "backbone expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let mut x = images.clone();
        let mut embeddings = Vec::with_capacity(4);
        let mut features = Vec::with_capacity(4);
        for s in 0..self.stages.len() {
            let emb = self.patch_embed(s, &x)?;
            let (h, w) = (emb.height, emb.width);
            let mut tokens = emb.tokens.clone();
            for n in 0..self.stages[s].blocks.len() {
                if let Some(p) = prompt(s, n, &emb)? {
                    if p.dims() != tokens.dims() {
                        return Err(VcpError::Shape(format!(
                            "prompt for stage {s} layer {n} has shape {:?}, tokens are {:?}",
                            p.dims(),
                            tokens.dims()
                        )));
                    }
                    tokens = (tokens + p)?;
                }
                tokens = self.layer(s, n, &tokens, h, w)?;
            }
            let tokens = self.stage_norm(s, &tokens)?;
            x = ops::tokens_to_map(&tokens, h, w)?;
            embeddings.push(emb);
            features.push(StageEmbedding {
                tokens,
                height: h,
                width: w,
            });
        }
        Ok(BackboneOutput {
            embeddings,
            features,
        })
    }

    /// Prompt-free forward pass.
    pub fn forward(&self, images: &Tensor) -> Result<BackboneOutput> {
        self.forward_with_prompts(images, |_, _, _| Ok(None))
    }
}

impl Block {
    fn attention(&self, y: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (n, l, c) = y.dims3()?;
        let dh = c / self.heads;
        let split = |t: Tensor, len: usize| -> Result<Tensor> {
            Ok(t.reshape((n, len, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.query.forward(y)?, l)?;
        let kv_in = match &self.reduction {
            Some((conv, norm)) => {
                let reduced = conv.forward(&ops::tokens_to_map(y, h, w)?)?;
                norm.forward(&ops::map_to_tokens(&reduced)?)?
            }
            None => y.clone(),
        };
        let lk = kv_in.dim(1)?;
        let k = split(self.key.forward(&kv_in)?, lk)?;
        let v = split(self.value.forward(&kv_in)?, lk)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.reshape((n, l, c))?;
        self.out.forward(&ctx)
    }
}
