//! Whole-experiment configuration: one TOML document with a section per
//! pipeline module. Unknown keys are rejected everywhere so typos fail loudly,
//! and every constant has a recorded default in the commented template.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::features::FrozenEncoderConfig;
use crate::stage1::{ForecasterConfig, Stage1TrainConfig};
use crate::stage2::sample::{GuidanceConfig, SamplerConfig};
use crate::stage2::train::Stage2TrainConfig;
use crate::synthworld::WorldConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PcaConfig {
    /// Projected semantic channel count C_h.
    pub c_h: usize,
}

impl Default for PcaConfig {
    fn default() -> Self {
        PcaConfig { c_h: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Context frames M handed to the pipeline at evaluation time.
    pub m_context: usize,
    /// Independent sampling runs per evaluation.
    pub runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            m_context: 13,
            runs: 3,
        }
    }
}

/// Top-level seeds threaded into each stage; keeping them in one section
/// makes seed sweeps a single-key edit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SeedsConfig {
    pub data: u64,
    pub stage1: u64,
    pub stage2: u64,
    pub sampler: u64,
}

impl Default for SeedsConfig {
    fn default() -> Self {
        SeedsConfig {
            data: 7,
            stage1: 11,
            stage2: 13,
            sampler: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct Stage1Section {
    pub model: ForecasterConfig,
    pub train: Stage1TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct Stage2Section {
    pub model: crate::stage2::model::DenoiserConfig,
    pub train: Stage2TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub encoder: FrozenEncoderConfig,
    pub pca: PcaConfig,
    pub codec: CodecConfig,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceConfig,
    pub eval: EvalConfig,
    pub seeds: SeedsConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// Cross-section validation beyond what each module checks locally.
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.encoder.validate()?;
        self.codec.validate()?;
        self.stage1.model.validate()?;
        self.stage2.model.validate()?;
        self.sampler.validate()?;
        self.stage2.train.mixed.validate()?;
        self.stage2.train.dropout.validate(self.pca.c_h)?;
        if self.pca.c_h == 0 || self.pca.c_h > self.encoder.raw_channels() {
            return Err(Error::Config(format!(
                "pca.c_h must be in 1..={}, got {}",
                self.encoder.raw_channels(),
                self.pca.c_h
            )));
        }
        if self.eval.m_context >= self.world.k {
            return Err(Error::Config(
                "eval.m_context must leave future frames within world.k".into(),
            ));
        }
        if (self.eval.m_context - 1) % self.codec.temporal_factor != 0 {
            return Err(Error::Config(format!(
                "eval.m_context ({}) must satisfy (m - 1) % temporal_factor == 0",
                self.eval.m_context
            )));
        }
        if (self.world.k - 1) % self.codec.temporal_factor != 0 {
            return Err(Error::Config(
                "world.k must satisfy (k - 1) % temporal_factor == 0".into(),
            ));
        }
        if self.world.height % (self.codec.spatial_factor * self.stage2.model.patch_size) != 0
            || self.world.width % (self.codec.spatial_factor * self.stage2.model.patch_size) != 0
        {
            return Err(Error::Config(
                "world size must be divisible by spatial_factor * patch_size".into(),
            ));
        }
        if self.eval.runs == 0 {
            return Err(Error::Config("eval.runs must be >= 1".into()));
        }
        if !self
            .stage2
            .train
            .dropout
            .channel_set
            .contains(&self.guidance.coarse_channels)
        {
            return Err(Error::Config(format!(
                "guidance.coarse_channels ({}) must be one of the trained channel set {:?}",
                self.guidance.coarse_channels, self.stage2.train.dropout.channel_set
            )));
        }
        Ok(())
    }
}

/// Commented default configuration; parses to `ExperimentConfig::default()`.
pub const DEFAULT_TEMPLATE: &str = r#"# Hierarchical video prediction experiment, desk scale.
# Every constant below is overridable; the values shown are the defaults.

[world]
height = 64
width = 64
num_shapes = 4
velocity_range = [0.5, 2.0]
seed = 0
k = 25              # frames per clip
num_clips = 50

[[world.shape_classes]]   # class ids 1.. in order; 0 is background
class_id = 1
color = [0.9019607843137255, 0.2, 0.2]
[[world.shape_classes]]
class_id = 2
color = [0.2, 0.9019607843137255, 0.2]
[[world.shape_classes]]
class_id = 3
color = [0.25098039215686274, 0.34901960784313724, 0.9490196078431372]
[[world.shape_classes]]
class_id = 4
color = [0.9019607843137255, 0.8509803921568627, 0.2]
[[world.shape_classes]]
class_id = 5
color = [0.8509803921568627, 0.30196078431372547, 0.8509803921568627]

[encoder]
patch_size = 4
depth = 8
width = 32
tap_layers = [2, 4, 6, 8]   # multi-depth feature taps
freeze_seed = 7

[pca]
c_h = 64            # projected semantic channels

[codec]
spatial_factor = 4  # s: space-to-depth factor
temporal_factor = 4 # r: causal temporal grouping (25 frames -> 7 latents)
norm_mean = []      # filled by fit; empty = identity
norm_std = []

[stage1.model]
layers = 4
model_dim = 256
heads = 4
n_context = 4       # sliding-window context feature frames N_c (N_p = 1)
mlp_ratio = 4.0
smooth_l1_beta = 1.0
seed = 0

[stage1.train]
steps = 2000
lr = 0.0003
warmup_steps = 50
seed = 0

[stage2.model]
layers = 6
model_dim = 384
heads = 6
patch_size = 2
adaln_rank = 16     # low-rank adapter on the adaptive layer norm
cond_freq_dim = 32
mlp_ratio = 4.0
seed = 0

[stage2.train]
steps = 4000
lr = 0.0003
warmup_steps = 100
schedule = "cosine" # cosine | constant (after warmup)
seed = 0
mode = "mixed"      # mixed | ground_truth_only | no_features

[stage2.train.dropout]
channel_set = [8, 16, 32, 64]   # nested-dropout keep counts

[stage2.train.mixed]
ground_truth_prob = 0.1         # 90/10 forecast/ground-truth mixture

[sampler]
num_steps = 32
sigma_min = 0.002
sigma_max = 80.0
# sigma_mid = 0.9   # optional: jump from sigma_max to here, then refine below
rho = 7.0
seed = 0

[guidance]
weight = 0.5
coarse_channels = 16            # truncated branch for guidance

[eval]
m_context = 13      # context frames M at evaluation
runs = 3            # independent sampling runs

[seeds]
data = 7
stage1 = 11
stage2 = 13
sampler = 17
"#;
