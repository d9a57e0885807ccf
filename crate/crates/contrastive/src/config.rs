//! Run configuration. Values come from defaults, then a `key = value`
//! file, then command-line flags, each overriding the previous.

use std::path::Path;
use std::str::FromStr;

use contrastive_core::model::{CaMode, ModelConfig};
use contrastive_core::pool::DEFAULT_POOL_SIZE;
use contrastive_core::synth::SynthConfig;
use contrastive_core::train::TrainConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub d: usize,
    pub heads: usize,
    pub pool_size: usize,
    pub embed: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub refresh_pool_every: usize,
    pub clip_norm: Option<f64>,
    pub max_len: usize,
    pub mode: CaMode,
    pub size: usize,
    pub abnormal_rate: f64,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: 0,
            d: 64,
            heads: 6,
            pool_size: DEFAULT_POOL_SIZE,
            embed: 32,
            hidden: 64,
            learning_rate: train.learning_rate,
            steps: train.steps,
            refresh_pool_every: 0,
            clip_norm: train.clip_norm,
            max_len: 60,
            mode: CaMode::Full,
            size: 300,
            abnormal_rate: 0.3,
            synth: SynthConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    /// Sets one option by its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.synth;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "n" | "heads" => self.heads = parse(key, value)?,
            "pool_size" | "n_p" => self.pool_size = parse(key, value)?,
            "e" | "embed" => self.embed = parse(key, value)?,
            "h" | "hidden" => self.hidden = parse(key, value)?,
            "lr" | "learning_rate" => self.learning_rate = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "refresh_pool_every" => self.refresh_pool_every = parse(key, value)?,
            "clip_norm" => {
                self.clip_norm = match value {
                    "none" | "off" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "max_len" => self.max_len = parse(key, value)?,
            "mode" => {
                self.mode = match value {
                    "full" => CaMode::Full,
                    "off" | "baseline" => CaMode::Off,
                    "da-only" | "differentiate-only" => CaMode::DifferentiateOnly,
                    _ => return Err(CliError::Usage(format!("unknown mode {value:?}"))),
                }
            }
            "size" => self.size = parse(key, value)?,
            "abnormal_rate" => self.abnormal_rate = parse(key, value)?,
            "patches" => s.patches = parse(key, value)?,
            "raw_dim" => s.raw_dim = parse(key, value)?,
            "views" => s.views = parse(key, value)?,
            "view_scale" => s.view_scale = parse(key, value)?,
            "noise" => s.noise = parse(key, value)?,
            "block_len" => s.block_len = parse(key, value)?,
            "shift" => s.shift = parse(key, value)?,
            "max_tags" => s.max_tags = parse(key, value)?,
            "vocab_min_count" => s.vocab_min_count = parse(key, value)?,
            _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("config line {}: expected key = value", n + 1))
            })?;
            self.set(key.trim(), value.trim().trim_matches('"'))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn model_config(&self, raw_dim: usize, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            raw_dim,
            d: self.d,
            heads: self.heads,
            embed: self.embed,
            hidden: self.hidden,
            vocab_size,
            mode: self.mode,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            learning_rate: self.learning_rate,
            seed: self.seed,
            refresh_pool_every: self.refresh_pool_every,
            clip_norm: self.clip_norm,
            ..TrainConfig::default()
        }
    }
}
