//! Run configuration: a TOML file, then flag overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nmt_core::corpus::{Direction, Tokenizer, TokenizerMode, Vocabulary};
use nmt_core::eval::BeamParams;
use nmt_core::init::{CrossAttentionInit, DecoderLayerSource, InitStrategy};
use nmt_core::model::ModelConfig;
use nmt_core::probe::ClassifyConfig;
use nmt_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::experiment::ExperimentConfig;
use crate::toy::{ToySpec, VOCAB_FILE};

/// Bad input from the caller rather than a failure while running.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage_error(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn missing(field: &str) -> anyhow::Error {
    usage_error(format!("missing required field `{field}`"))
}

fn default_max_len() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding `vocab.txt`, `train.*.tsv` and `mono.*.txt`.
    pub dir: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    #[serde(default)]
    pub directions: Vec<String>,
    /// Monolingual languages for pretraining; defaults to the vocabulary's.
    pub languages: Option<Vec<String>>,
    #[serde(default)]
    pub tokenizer: TokenizerMode,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { dir: None, vocab: None, directions: Vec::new(), languages: None, tokenizer: TokenizerMode::default(), max_len: default_max_len() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Tiny,
    Base,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Post-norm layout shared with the masked-LM encoder.
    #[default]
    Compatible,
    Baseline,
}

/// A preset plus optional per-field overrides.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub preset: Preset,
    #[serde(default)]
    pub layout: Layout,
    pub encoder_layers: Option<usize>,
    pub decoder_layers: Option<usize>,
    pub hidden: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub dropout: Option<f64>,
    pub attention_dropout: Option<f64>,
}

impl ModelSection {
    pub fn resolve(&self, vocab_size: usize, max_positions: usize) -> Result<ModelConfig> {
        let mut c = match self.preset {
            Preset::Tiny => ModelConfig::tiny(vocab_size),
            Preset::Base => ModelConfig::base(vocab_size),
        };
        if self.layout == Layout::Baseline {
            c = c.with_baseline_layout();
        }
        c.max_positions = max_positions;
        c.encoder_layers = self.encoder_layers.unwrap_or(c.encoder_layers);
        c.decoder_layers = self.decoder_layers.unwrap_or(c.decoder_layers);
        c.hidden = self.hidden.unwrap_or(c.hidden);
        c.heads = self.heads.unwrap_or(c.heads);
        c.ffn_dim = self.ffn_dim.unwrap_or(c.ffn_dim);
        c.dropout = self.dropout.unwrap_or(c.dropout);
        c.attention_dropout = self.attention_dropout.unwrap_or(c.attention_dropout);
        c.validate()?;
        Ok(c)
    }

    /// Fills every override from `c` so the section pins the architecture.
    fn materialize(&mut self, c: &ModelConfig) {
        self.encoder_layers = Some(c.encoder_layers);
        self.decoder_layers = Some(c.decoder_layers);
        self.hidden = Some(c.hidden);
        self.heads = Some(c.heads);
        self.ffn_dim = Some(c.ffn_dim);
        self.dropout = Some(c.dropout);
        self.attention_dropout = Some(c.attention_dropout);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyName {
    #[default]
    Random,
    Encoder,
    EncoderDecoder,
}

impl std::str::FromStr for StrategyName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(Self::Random),
            "encoder" => Ok(Self::Encoder),
            "encoder-decoder" => Ok(Self::EncoderDecoder),
            _ => Err(format!("unknown init strategy {s:?} (random, encoder, encoder-decoder)")),
        }
    }
}

fn share() -> CrossAttentionInit {
    CrossAttentionInit::ShareSelfAttn
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    #[serde(default)]
    pub strategy: StrategyName,
    /// Pretrained checkpoint for non-random strategies.
    pub source: Option<PathBuf>,
    #[serde(default = "share")]
    pub cross_attention: CrossAttentionInit,
    #[serde(default)]
    pub decoder_layers: DecoderLayerSource,
}

impl Default for InitSection {
    fn default() -> Self {
        Self { strategy: StrategyName::Random, source: None, cross_attention: share(), decoder_layers: DecoderLayerSource::Bottom }
    }
}

impl InitSection {
    pub fn strategy(&self) -> InitStrategy {
        match self.strategy {
            StrategyName::Random => InitStrategy::Random,
            StrategyName::Encoder => InitStrategy::EncoderOnly,
            StrategyName::EncoderDecoder => {
                InitStrategy::EncoderAndDecoder { cross_attention: self.cross_attention, layers: self.decoder_layers }
            }
        }
    }
}

fn default_iterations() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    /// Encoder layer for word alignment (0-based); the final output when unset.
    pub layer: Option<usize>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub classify: ClassifyConfig,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self { layer: None, iterations: default_iterations(), classify: ClassifyConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    pub train: Option<TrainConfig>,
    pub pretrain: Option<TrainConfig>,
    #[serde(default)]
    pub init: InitSection,
    #[serde(default)]
    pub beam: BeamParams,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub toy: ToySpec,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| usage_error(format!("invalid configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| usage_error(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data.dir.as_deref().ok_or_else(|| missing("data.dir"))
    }

    pub fn vocab_path(&self) -> Result<PathBuf> {
        match &self.data.vocab {
            Some(p) => Ok(p.clone()),
            None => Ok(self.data_dir().map_err(|_| missing("data.vocab (or data.dir)"))?.join(VOCAB_FILE)),
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Ok(Vocabulary::load(self.vocab_path()?)?)
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.data.tokenizer)
    }

    pub fn directions(&self) -> Result<Vec<Direction>> {
        if self.data.directions.is_empty() {
            return Err(missing("data.directions"));
        }
        self.data.directions.iter().map(|d| Ok(Direction::parse(d)?)).collect()
    }

    pub fn train_section(&self) -> Result<&TrainConfig> {
        self.train.as_ref().ok_or_else(|| missing("train"))
    }

    pub fn pretrain_section(&self) -> Result<&TrainConfig> {
        self.pretrain.as_ref().ok_or_else(|| missing("pretrain"))
    }

    /// Checks everything a fine-tuning run needs before any work starts.
    pub fn validate_train(&self) -> Result<()> {
        self.data_dir()?;
        self.directions()?;
        self.train_section()?.validate()?;
        if self.init.strategy != StrategyName::Random && self.init.source.is_none() {
            return Err(missing("init.source"));
        }
        self.validate_common()
    }

    pub fn validate_pretrain(&self) -> Result<()> {
        self.data_dir()?;
        self.pretrain_section()?.validate()?;
        self.validate_common()
    }

    pub fn validate_common(&self) -> Result<()> {
        if self.data.max_len < 3 || self.data.max_len > nmt_core::model::MAX_SEQUENCE_LIMIT {
            return Err(usage_error(format!("data.max_len must lie in 3..={}", nmt_core::model::MAX_SEQUENCE_LIMIT)));
        }
        self.beam.validate(self.data.max_len)?;
        if self.probe.iterations == 0 {
            return Err(usage_error("probe.iterations must be at least 1"));
        }
        Ok(())
    }

    /// Architecture for the loaded vocabulary; also pins it in `self.model`.
    pub fn model_config(&mut self, vocab_size: usize) -> Result<ModelConfig> {
        let c = self.model.resolve(vocab_size, self.data.max_len)?;
        self.model.materialize(&c);
        Ok(c)
    }

    /// Applies `--seed` to every seeded section.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let Some(t) = self.train.as_mut() {
            t.seed = seed;
        }
        if let Some(t) = self.pretrain.as_mut() {
            t.seed = seed;
        }
        self.probe.classify.seed = seed;
        self.toy.seed = seed;
    }
}
