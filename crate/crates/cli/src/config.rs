use std::path::Path;

use anyhow::Context;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use semapix::data::WorldConfig;
use semapix::eval::Backbone;
use semapix::model::Architecture;
use semapix::tokenizers::TokenizerConfig;
use semapix::training::{PretrainConfig, StageConfig};

use crate::exit::{Exit, WithCode};

/// A training run: world, model, optional understanding pretraining and the
/// stages to run in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub backbone: Backbone,
    #[serde(default = "mot")]
    pub architecture: Architecture,
    pub pretrain: Option<PretrainConfig>,
    /// Extra checkpoints every this many steps within a stage; 0 saves only at stage ends.
    #[serde(default)]
    pub checkpoint_every: u64,
    pub stages: Vec<StageConfig>,
}

fn mot() -> Architecture {
    Architecture::MoT
}

impl TrainFile {
    /// The three recipe stages with defaults everywhere else.
    pub fn presets() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            tokenizer: TokenizerConfig::default(),
            backbone: Backbone::default(),
            architecture: Architecture::MoT,
            pretrain: Some(PretrainConfig::default()),
            checkpoint_every: 0,
            stages: vec![StageConfig::stage1(), StageConfig::stage2(), StageConfig::stage3()],
        }
    }

    pub fn validate(&self) -> semapix::Result<()> {
        if self.stages.is_empty() {
            return Err(semapix::Error::Config("stages: at least one stage is required".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate()
                .map_err(|e| semapix::Error::Config(format!("stages[{i}] ({}): {e}", s.name)))?;
        }
        Ok(())
    }
}

/// Reads a TOML file into `T`; parse failures exit with code 2 and the
/// parser's field-level message.
pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, Exit> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .code(2)?;
    toml::from_str(&text)
        .with_context(|| format!("invalid config {}", path.display()))
        .code(2)
}
