//! TOML configuration with one section per module. Values resolve as
//! built-in defaults, then the file, then `MASKMOTION__SECTION__KEY`
//! environment overrides.

use std::path::Path;

use maskmotion_model::inference::InferenceConfig;
use maskmotion_model::network::NetworkConfig;
use maskmotion_model::tokenizer::{TokenizerConfig, TokenizerTrainConfig};
use maskmotion_model::training::{Stage, StageConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::experiment::TrainOcclusion;
use crate::synthetic::SyntheticMotionConfig;

pub const ENV_PREFIX: &str = "MASKMOTION__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObserveConfig {
    pub focal: f64,
    pub principal_point: [f64; 2],
    pub image_size: [f64; 2],
    pub train: TrainOcclusion,
    /// Temporal-block ratio used for evaluation sets.
    pub eval_ratio: f64,
}

impl Default for ObserveConfig {
    fn default() -> Self {
        ObserveConfig { focal: 600.0, principal_point: [320.0, 240.0], image_size: [640.0, 480.0], train: TrainOcclusion::default(), eval_ratio: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub frames: usize,
    pub steps: Vec<usize>,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { frames: 60, steps: vec![1, 5, 10, 20], repeats: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: SyntheticMotionConfig,
    pub observe: ObserveConfig,
    pub tokenizer: TokenizerConfig,
    pub tokenizer_train: TokenizerTrainConfig,
    /// Every n-th frame of the training set feeds the tokenizer.
    pub tokenizer_stride: usize,
    pub network: NetworkConfig,
    pub motion: StageConfig,
    pub image: StageConfig,
    pub video: StageConfig,
    pub inference: InferenceConfig,
    pub bench: BenchConfig,
}

impl Default for Config {
    fn default() -> Self {
        let tokenizer = TokenizerConfig { codebook_size: 128, hidden: 64, ..TokenizerConfig::default() };
        Config {
            seed: 0,
            data: SyntheticMotionConfig::default(),
            observe: ObserveConfig::default(),
            tokenizer,
            tokenizer_train: TokenizerTrainConfig::default(),
            tokenizer_stride: 6,
            network: NetworkConfig { tokens: tokenizer.tokens, codebook_size: tokenizer.codebook_size, ..NetworkConfig::default() },
            motion: StageConfig::for_stage(Stage::Motion),
            image: StageConfig::for_stage(Stage::Image),
            video: StageConfig::for_stage(Stage::Video),
            inference: InferenceConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses an override value as a TOML literal, falling back to a string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl Config {
    /// Defaults overlaid with `text` and then `env` pairs.
    pub fn resolve(text: Option<&str>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut value = toml::Value::try_from(Config::default()).map_err(|e| HarnessError::Config(e.to_string()))?;
        if let Some(t) = text {
            let file: toml::Table = t.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
            merge(&mut value, toml::Value::Table(file));
        }
        for (k, v) in env {
            let Some(path) = k.strip_prefix(ENV_PREFIX) else { continue };
            let keys: Vec<String> = path.split("__").map(|s| s.to_ascii_lowercase()).collect();
            let mut over = parse_value(&v);
            for key in keys.iter().rev() {
                let mut t = toml::Table::new();
                t.insert(key.clone(), over);
                over = toml::Value::Table(t);
            }
            merge(&mut value, over);
        }
        let cfg: Config = value.try_into().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?),
            None => None,
        };
        Self::resolve(text.as_deref(), std::env::vars())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        for (name, s, stage) in [("motion", &self.motion, Stage::Motion), ("image", &self.image, Stage::Image), ("video", &self.video, Stage::Video)] {
            if s.stage != stage {
                return Err(HarnessError::Config(format!("[{name}] has stage {:?}", s.stage)));
            }
            s.validate()?;
        }
        self.inference.validate()?;
        self.network.validate()?;
        if self.network.tokens != self.tokenizer.tokens || self.network.codebook_size != self.tokenizer.codebook_size {
            return Err(HarnessError::Config("network and tokenizer disagree on tokens or codebook size".into()));
        }
        if self.network.obs_dim != 3 * maskmotion_core::body::DEFAULT_JOINTS || self.network.obs_tokens != 1 {
            return Err(HarnessError::Config("observation features are one 3J-wide token per frame".into()));
        }
        if self.tokenizer_stride == 0 || self.bench.steps.is_empty() || self.bench.steps.contains(&0) || self.bench.repeats == 0 {
            return Err(HarnessError::Config("tokenizer_stride, bench steps and repeats must be positive".into()));
        }
        Ok(())
    }

    /// Replaces every seed with values derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self.tokenizer_train.seed = seed;
        self.motion.seed = seed;
        self.image.seed = seed;
        self.video.seed = seed;
        self
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Motion => &self.motion,
            Stage::Image => &self.image,
            Stage::Video => &self.video,
        }
    }

    pub fn camera(&self) -> Result<maskmotion_core::geometry::CameraIntrinsics<f64>> {
        Ok(maskmotion_core::geometry::CameraIntrinsics::new(self.observe.focal, self.observe.principal_point, self.observe.image_size)?)
    }
}
