use serde::{Deserialize, Serialize};

use crate::error::{Result, VcpError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackboneFamily {
    #[default]
    MixTransformer,
    /// Reserved for a PVTv2 encoder. Configs naming it are rejected.
    PvtV2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub sr_ratio: usize,
    pub patch_size: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BackboneSection", into = "BackboneSection")]
pub struct BackboneConfig {
    pub family: BackboneFamily,
    pub preset: Option<String>,
    pub in_channels: usize,
    pub layer_norm_eps: f64,
    pub stages: Vec<StageConfig>,
}

/// On-disk form: either a preset name or explicit stages.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackboneSection {
    #[serde(default)]
    family: BackboneFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stages: Option<Vec<StageConfig>>,
}

impl TryFrom<BackboneSection> for BackboneConfig {
    type Error = VcpError;

    fn try_from(s: BackboneSection) -> Result<Self> {
        let mut cfg = match (s.preset.as_deref(), s.stages) {
            (Some(p), None) => Self::preset(p)?,
            (None, Some(stages)) => Self {
                stages,
                preset: None,
                ..Self::mit_b4()
            },
            (None, None) => Self::mit_b4(),
            (Some(_), Some(_)) => {
                return Err(VcpError::Config(
                    "backbone takes either `preset` or `stages`, not both".into(),
                ))
            }
        };
        cfg.family = s.family;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<BackboneConfig> for BackboneSection {
    fn from(c: BackboneConfig) -> Self {
        match c.preset {
            Some(p) => Self {
                family: c.family,
                preset: Some(p),
                stages: None,
            },
            None => Self {
                family: c.family,
                preset: None,
                stages: Some(c.stages),
            },
        }
    }
}

fn stages(
    channels: [usize; 4],
    depths: [usize; 4],
    heads: [usize; 4],
) -> Vec<StageConfig> {
    const SR: [usize; 4] = [8, 4, 2, 1];
    const PATCH: [usize; 4] = [7, 3, 3, 3];
    const STRIDE: [usize; 4] = [4, 2, 2, 2];
    (0..4)
        .map(|s| StageConfig {
            channels: channels[s],
            depth: depths[s],
            heads: heads[s],
            mlp_ratio: 4,
            sr_ratio: SR[s],
            patch_size: PATCH[s],
            stride: STRIDE[s],
        })
        .collect()
}

impl BackboneConfig {
    pub fn mit_b4() -> Self {
        Self {
            family: BackboneFamily::MixTransformer,
            preset: Some("mit_b4".into()),
            in_channels: 3,
            layer_norm_eps: 1e-6,
            stages: stages([64, 128, 320, 512], [3, 8, 27, 3], [1, 2, 5, 8]),
        }
    }

    /// Small encoder used by tests and the toy experiments.
    pub fn tiny() -> Self {
        Self {
            family: BackboneFamily::MixTransformer,
            preset: Some("tiny".into()),
            in_channels: 3,
            layer_norm_eps: 1e-6,
            stages: stages([8, 16, 32, 64], [1, 1, 1, 1], [1, 1, 1, 1]),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mit_b4" | "b4" => Ok(Self::mit_b4()),
            "tiny" => Ok(Self::tiny()),
            other => Err(VcpError::Config(format!("unknown backbone preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.family != BackboneFamily::MixTransformer {
            return Err(VcpError::Config(format!(
                "backbone family {:?} is not available in this build",
                self.family
            )));
        }
        if self.stages.len() != 4 {
            return Err(VcpError::Config(format!(
                "expected 4 encoder stages, got {}",
                self.stages.len()
            )));
        }
        for (s, st) in self.stages.iter().enumerate() {
            if st.channels == 0 || st.depth == 0 || st.heads == 0 || st.sr_ratio == 0 {
                return Err(VcpError::Config(format!("stage {s} has a zero-sized field")));
            }
            if st.channels % st.heads != 0 {
                return Err(VcpError::Config(format!(
                    "stage {s}: {} channels do not split over {} heads",
                    st.channels, st.heads
                )));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|s| self.stages[s].channels)
    }

    pub fn depths(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|s| self.stages[s].depth)
    }

    /// Spatial size of every stage for an `h x w` input.
    pub fn stage_sizes(&self, h: usize, w: usize) -> [(usize, usize); 4] {
        let mut out = [(0, 0); 4];
        let (mut ch, mut cw) = (h, w);
        for (s, st) in self.stages.iter().enumerate() {
            let pad = st.patch_size / 2;
            ch = (ch + 2 * pad - st.patch_size) / st.stride + 1;
            cw = (cw + 2 * pad - st.patch_size) / st.stride + 1;
            out[s] = (ch, cw);
        }
        out
    }

    /// Token counts per stage for an `h x w` input.
    pub fn token_counts(&self, h: usize, w: usize) -> [usize; 4] {
        self.stage_sizes(h, w).map(|(a, b)| a * b)
    }
}
