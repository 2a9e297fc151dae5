//! Training configuration, serialised as TOML.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ScenarioConfig;
use crate::error::{Error, Result};

/// Which fusion/objective layout a model trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Unit,
    Uwox,
    ImgOnly,
    TxtOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Unit, Mode::Uwox, Mode::ImgOnly, Mode::TxtOnly];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Unit => "unit",
            Mode::Uwox => "uwox",
            Mode::ImgOnly => "img_only",
            Mode::TxtOnly => "txt_only",
        }
    }

    pub fn uses_text(self) -> bool {
        self != Mode::ImgOnly
    }

    pub fn uses_image(self) -> bool {
        self != Mode::TxtOnly
    }

    pub fn uses_pair_matching(self) -> bool {
        self == Mode::Uwox
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}'")))
    }
}

/// Which pooled feature a fine-tuning head reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryType {
    Image,
    Text,
    ImageText,
}

impl FromStr for QueryType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(QueryType::Image),
            "text" => Ok(QueryType::Text),
            "image_text" => Ok(QueryType::ImageText),
            _ => Err(Error::Config(format!("unknown query type '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub block_size: usize,
    pub multiscale: bool,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mask_rate: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stops pre-training after this many optimiser steps when set.
    pub max_steps: Option<u64>,
    pub finetune_epochs: usize,
    pub finetune_max_steps: Option<u64>,
    pub finetune_learning_rate: f64,
    pub seed: u64,
    pub image_size: usize,
    pub max_text_len: usize,
    pub num_classes: usize,
    /// Vocabulary file; the built-in report vocabulary when unset.
    pub vocab_file: Option<String>,
    pub hash_gamma: f64,
    pub hash_quant_weight: f64,
    pub query: QueryType,
    pub scenario: ScenarioConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Settings reported for the full-size model.
    pub fn paper_scale() -> Self {
        TrainConfig {
            mode: Mode::Uwox,
            block_size: 16,
            multiscale: true,
            layers: 12,
            hidden: 768,
            heads: 12,
            mask_rate: 0.15,
            batch_size: 64,
            learning_rate: 1e-4,
            epochs: 10,
            max_steps: None,
            finetune_epochs: 10,
            finetune_learning_rate: 1e-4,
            finetune_max_steps: None,
            seed: 0,
            image_size: 256,
            max_text_len: 150,
            num_classes: 4,
            vocab_file: None,
            hash_gamma: 32.0,
            hash_quant_weight: 0.1,
            query: QueryType::Image,
            scenario: ScenarioConfig::default(),
        }
    }

    /// Small profile that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        TrainConfig {
            block_size: 8,
            layers: 2,
            hidden: 64,
            heads: 4,
            batch_size: 16,
            learning_rate: 1e-3,
            finetune_learning_rate: 1e-3,
            epochs: 20,
            finetune_epochs: 30,
            image_size: 32,
            max_text_len: 32,
            ..TrainConfig::paper_scale()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.block_size == 0 || !self.image_size.is_multiple_of(4 * self.block_size) {
            return bad(format!(
                "image_size {} must be divisible by 4*block_size = {}",
                self.image_size,
                4 * self.block_size
            ));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return bad(format!("mask_rate {} outside (0, 1)", self.mask_rate));
        }
        if self.batch_size == 0 || self.max_text_len == 0 || self.num_classes == 0 {
            return bad("batch_size, max_text_len and num_classes must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.finetune_learning_rate > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.hash_gamma > 0.0) {
            return bad(format!("hash_gamma {} must be positive", self.hash_gamma));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.batch_size).max(1) as u64
    }

    /// Pre-training optimiser steps for `n` training items.
    pub fn total_steps(&self, n: usize) -> u64 {
        self.max_steps
            .unwrap_or(self.steps_per_epoch(n) * self.epochs as u64)
    }

    /// Fine-tuning optimiser steps for `n` labelled records.
    pub fn finetune_steps(&self, n: usize) -> u64 {
        self.finetune_max_steps
            .unwrap_or(self.steps_per_epoch(n) * self.finetune_epochs as u64)
    }
}
