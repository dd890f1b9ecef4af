//! Configuration surface shared by the library and the CLI.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{Result, VcpError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Concat,
    Add,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MlpSharing {
    /// Per-layer down maps with one up-projection per stage.
    #[default]
    Adaptive,
    Share,
    Unshare,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpgConfig {
    /// Down-projection factor, `C_r = C_s / r`.
    pub r: usize,
    /// Number of learnable saliency seeds.
    pub j: usize,
    /// Number of representative consensus seeds.
    pub k: usize,
    /// Hidden width of the seed MLP.
    pub seed_mlp_hidden: usize,
}

impl Default for CpgConfig {
    fn default() -> Self {
        Self {
            r: 4,
            j: 35,
            k: 32,
            seed_mlp_hidden: 240,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpdConfig {
    pub fusion: Fusion,
    pub mlp_sharing: MlpSharing,
    pub fft_mask_ratio: f64,
}

impl Default for CpdConfig {
    fn default() -> Self {
        Self {
            fusion: Fusion::Concat,
            mlp_sharing: MlpSharing::Adaptive,
            fft_mask_ratio: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub head_dim: usize,
    /// Width of the projected deepest feature and of the ASPP block.
    pub aspp_channels: usize,
    /// Dilations of the 3x3 ASPP branches; a 1x1 branch and image pooling are always present.
    pub aspp_rates: Vec<usize>,
    pub num_classes: usize,
    pub use_segformer_head: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            head_dim: 128,
            aspp_channels: 128,
            aspp_rates: vec![6, 12, 18],
            num_classes: 291,
            use_segformer_head: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Stages that receive prompts.
    pub stage_mask: [bool; 4],
    pub cpg: CpgConfig,
    pub cpd: CpdConfig,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::mit_b4(),
            stage_mask: [true; 4],
            cpg: CpgConfig::default(),
            cpd: CpdConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Reduced width `C_r` of every stage.
    pub fn reduced_channels(&self) -> Result<[usize; 4]> {
        let ch = self.backbone.channels();
        let mut out = [0; 4];
        for s in 0..4 {
            out[s] = reduced_width(ch[s], self.cpg.r)?;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.reduced_channels()?;
        let c = &self.cpg;
        if c.j == 0 || c.k == 0 || c.seed_mlp_hidden == 0 {
            return Err(VcpError::Config("cpg.j, cpg.k and cpg.seed_mlp_hidden must be positive".into()));
        }
        let tau = self.cpd.fft_mask_ratio;
        if !(tau >= 0.0 && tau < 1.0) {
            return Err(VcpError::Config(format!("fft_mask_ratio {tau} outside [0, 1)")));
        }
        let h = &self.head;
        if h.head_dim < 8 {
            return Err(VcpError::Config(format!("head_dim {} below 8", h.head_dim)));
        }
        if h.use_segformer_head && h.head_dim != 128 {
            return Err(VcpError::Config("use_segformer_head supports head_dim = 128 only".into()));
        }
        if h.num_classes == 0 || h.aspp_channels == 0 {
            return Err(VcpError::Config("num_classes and aspp_channels must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form; identifies the tunable layout.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("model config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// `C_s / r`, rejecting non-divisible pairs.
pub fn reduced_width(channels: usize, r: usize) -> Result<usize> {
    if r == 0 || channels % r != 0 || channels / r == 0 {
        return Err(VcpError::Config(format!(
            "stage width {channels} is not divisible by r = {r}"
        )));
    }
    Ok(channels / r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub use_classifier: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 2.0,
            lambda: 0.1,
            use_classifier: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_final: f64,
    pub epochs: usize,
    /// Overrides `epochs * steps_per_epoch` when set.
    pub steps: Option<usize>,
    /// Defaults to enough batches to visit every group once.
    pub steps_per_epoch: Option<usize>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub input_size: usize,
    pub max_group_size: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Largest number of images pushed through the encoder at once during inference.
    pub chunk_size: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            lr_final: 1e-5,
            epochs: 200,
            steps: None,
            steps_per_epoch: None,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            input_size: 288,
            max_group_size: 16,
            seed: 0,
            precision: Precision::F32,
            chunk_size: 32,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > self.lr_final && self.lr_final > 0.0) {
            return Err(VcpError::Config(format!(
                "need lr > lr_final > 0, got lr = {}, lr_final = {}",
                self.lr, self.lr_final
            )));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(VcpError::Config(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.max_group_size == 0 || self.chunk_size == 0 {
            return Err(VcpError::Config("max_group_size and chunk_size must be positive".into()));
        }
        Ok(())
    }
}

/// Whole TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let l = &self.loss;
        if l.alpha < 0.0 || l.beta < 0.0 || l.lambda < 0.0 {
            return Err(VcpError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}
