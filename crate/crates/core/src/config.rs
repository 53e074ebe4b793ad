//! The run configuration shared by every CLI command, and the
//! reproducibility stamp written next to outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Stage, TrainConfig};
use crate::tokenizer::{TokenizerConfig, TokenizerTrainConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    #[default]
    Monologue,
    Dialogue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub kind: CorpusKind,
    /// Utterances or dialogues.
    pub n: usize,
    pub n_speakers: u8,
    pub min_turns: usize,
    pub max_turns: usize,
    pub max_tokens: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            kind: CorpusKind::Monologue,
            n: 64,
            n_speakers: 2,
            min_turns: 3,
            max_turns: 4,
            max_tokens: 3,
        }
    }
}

/// Stage-2 tokenizer training: decoder only, streaming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub steps: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self { steps: 600 }
    }
}

/// Default locations; command-line paths win.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    /// Curriculum stage for `tts train`.
    pub stage: Stage,
    pub corpus: CorpusConfig,
    pub tokenizer: TokenizerConfig,
    pub tokenizer_train: TokenizerTrainConfig,
    pub tokenizer_stage2: Stage2Config,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub engine: EngineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            stage: Stage::Pretrain,
            corpus: CorpusConfig::default(),
            tokenizer: TokenizerConfig::default(),
            tokenizer_train: TokenizerTrainConfig::default(),
            tokenizer_stage2: Stage2Config::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            engine: EngineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Copies the top-level seed into every component that takes one.
    pub fn propagate_seed(&mut self) {
        self.tokenizer_train.seed = self.seed;
        self.train.seed = self.seed;
        self.engine.seed = self.seed;
    }

    pub fn stamp(&self) -> Stamp {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        Stamp {
            config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_sha256: String,
    pub seed: u64,
}

impl Stamp {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = dir.join("stamp.json");
        std::fs::write(&p, serde_json::to_string_pretty(self).expect("stamp serialises") + "\n").map_err(|e| Error::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sede = 3").is_err());
        assert!(RunConfig::from_toml("[model]\nbackbone_dimm = 3").is_err());
        assert!(RunConfig::from_toml("[engine.sampling]\ntemp = 0.1").is_err());
    }

    #[test]
    fn stamp_tracks_config() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.stamp(), b.stamp());
        b.model.backbone_blocks = 3;
        assert_ne!(a.stamp().config_sha256, b.stamp().config_sha256);
    }
}
