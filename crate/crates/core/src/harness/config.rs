//! Versioned TOML benchmark configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bounds::{CodecConfig, Loss, VanillaPbConfig};
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::select::HierConfig;
use crate::taskgen::{BackboneSpec, TaskDistributionConfig};
use crate::zoo::{AdapterTrainConfig, ZooConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZooSection {
    pub n: usize,
    /// Shots per class in each upstream task's training episode.
    pub shots: usize,
    pub train: AdapterTrainConfig,
}

impl Default for ZooSection {
    fn default() -> Self {
        let z = ZooConfig::default();
        Self {
            n: 500,
            shots: z.shots,
            train: z.train,
        }
    }
}

impl ZooSection {
    pub fn build_config(&self) -> ZooConfig {
        ZooConfig {
            shots: self.shots,
            train: self.train.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchKind {
    Exhaustive,
    Hierarchical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HypothesisSection {
    /// Diffusion samples drawn for the `steel` and `union` sets.
    pub m: usize,
    pub search: SearchKind,
}

impl Default for HypothesisSection {
    fn default() -> Self {
        Self {
            m: 2000,
            search: SearchKind::Exhaustive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSection {
    pub per_shot: usize,
    pub shots: Vec<usize>,
    pub query_per_class: usize,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        Self {
            per_shot: 40,
            shots: vec![1, 2, 4, 8, 16],
            query_per_class: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSection {
    pub epsilon: f64,
    pub loss: Loss,
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            loss: Loss::ZeroOne,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodsSection {
    pub steel: bool,
    pub model_zoo: bool,
    pub union: bool,
    pub sgd_baseline: bool,
    pub vanilla_pb: bool,
}

impl Default for MethodsSection {
    fn default() -> Self {
        Self {
            steel: true,
            model_zoo: true,
            union: false,
            sgd_baseline: true,
            vanilla_pb: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdSection {
    /// Train the baseline head on the wide baseline backbone; otherwise on
    /// the same features as the hypothesis sets.
    pub wide_features: bool,
    pub train: AdapterTrainConfig,
    pub codec: CodecConfig,
}

impl Default for SgdSection {
    fn default() -> Self {
        Self {
            wide_features: true,
            train: AdapterTrainConfig::default(),
            codec: CodecConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Record per-method wall time. Off by default since it breaks
    /// byte-identical reruns.
    pub wall_time: bool,
    /// Write zoo, checkpoint and hypothesis sets next to the results.
    pub save_artifacts: bool,
    /// Row stride of the learning curve written for the first episode of
    /// each shot setting; 0 disables it.
    pub learning_curve_stride: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            wall_time: false,
            save_artifacts: true,
            learning_curve_stride: 20,
        }
    }
}

fn default_baseline_backbone() -> BackboneSpec {
    BackboneSpec {
        d_feat: 512,
        seed: 0x5eed_0002,
        ..BackboneSpec::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub version: u32,
    pub master_seed: u64,
    pub task: TaskDistributionConfig,
    pub baseline_backbone: BackboneSpec,
    pub zoo: ZooSection,
    pub diffusion: DiffusionConfig,
    pub hypothesis: HypothesisSection,
    pub select: HierConfig,
    pub episodes: EpisodeSection,
    pub bounds: BoundsSection,
    pub methods: MethodsSection,
    pub sgd: SgdSection,
    pub vanilla_pb: VanillaPbConfig,
    pub output: OutputSection,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            master_seed: 20_240_601,
            task: TaskDistributionConfig::default(),
            baseline_backbone: default_baseline_backbone(),
            zoo: ZooSection::default(),
            diffusion: DiffusionConfig::default(),
            hypothesis: HypothesisSection::default(),
            select: HierConfig::default(),
            episodes: EpisodeSection::default(),
            bounds: BoundsSection::default(),
            methods: MethodsSection::default(),
            sgd: SgdSection::default(),
            vanilla_pb: VanillaPbConfig::default(),
            output: OutputSection::default(),
        }
    }
}

impl BenchConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!(
                "unsupported config version {}, expected {CONFIG_VERSION}",
                self.version
            ));
        }
        // TOML integers are signed, and the resolved config is written back out
        if self.master_seed > i64::MAX as u64 {
            return bad(format!("master_seed {} exceeds {}", self.master_seed, i64::MAX));
        }
        self.task.validate()?;
        if self.zoo.n == 0 {
            return bad("zoo.n must be at least 1".into());
        }
        if self.zoo.shots == 0 {
            return bad("zoo.shots must be at least 1".into());
        }
        if self.hypothesis.m == 0 {
            return bad("hypothesis.m must be at least 1".into());
        }
        if self.episodes.per_shot == 0 {
            return bad("episodes.per_shot must be at least 1".into());
        }
        if self.episodes.shots.is_empty() || self.episodes.shots.contains(&0) {
            return bad("episodes.shots must list positive shot counts".into());
        }
        if self.episodes.query_per_class == 0 {
            return bad("episodes.query_per_class must be at least 1".into());
        }
        if !(self.bounds.epsilon > 0.0 && self.bounds.epsilon < 1.0) {
            return bad(format!("bounds.epsilon must lie in (0, 1), got {}", self.bounds.epsilon));
        }
        let m = &self.methods;
        if !(m.steel || m.model_zoo || m.union || m.sgd_baseline || m.vanilla_pb) {
            return bad("no method enabled".into());
        }
        if self.baseline_backbone.d_feat == 0 {
            return bad("baseline_backbone.d_feat must be positive".into());
        }
        Ok(())
    }

    pub fn needs_diffusion(&self) -> bool {
        self.methods.steel || self.methods.union
    }

    pub fn needs_zoo(&self) -> bool {
        self.needs_diffusion() || self.methods.model_zoo
    }

    /// Total episodes across shot settings.
    pub fn episode_count(&self) -> usize {
        self.episodes.per_shot * self.episodes.shots.len()
    }
}
