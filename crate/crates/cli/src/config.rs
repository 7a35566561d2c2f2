use std::path::Path;

use anyhow::{bail, Context, Result};
use dualform::nncore::{ModelConfig, TrainConfig};
use dualform::synthlang::GenerationConfig;
use serde::{Deserialize, Serialize};

/// History recording knobs. A stride of 0 disables the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistoryOptions {
    pub stride: u32,
    /// 1-based layers whose output-side gradients are stored.
    pub grad_layers: Vec<usize>,
}

impl Default for HistoryOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            grad_layers: vec![3],
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub profile: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: GenerationConfig,
    pub history: HistoryOptions,
    /// Checkpoints are kept at epoch 0, every `checkpoint_every` epochs and at the end.
    pub checkpoint_every: u32,
    /// Seeds parameter init; training shuffles and dropout use `train.rng_seed`.
    pub init_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        profile("sgd-small").expect("builtin profile")
    }
}

pub const PROFILES: [&str; 2] = ["sgd-small", "adamw-large"];

pub fn profile(name: &str) -> Result<RunConfig> {
    let base = RunConfig {
        profile: name.to_string(),
        model: ModelConfig::default(),
        train: TrainConfig::sgd(),
        data: GenerationConfig::small(),
        history: HistoryOptions::default(),
        checkpoint_every: 10,
        init_seed: 0,
    };
    Ok(match name {
        "sgd-small" => base,
        "adamw-large" => RunConfig {
            train: TrainConfig::adamw(),
            data: GenerationConfig::large(),
            history: HistoryOptions {
                stride: 0,
                grad_layers: vec![],
            },
            ..base
        },
        other => bail!("unknown profile {other:?} (known: {PROFILES:?})"),
    })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        if self.model.max_seq_len + 1 < self.data.max_seq_len {
            bail!(
                "dataset allows {} tokens but the model only {} positions",
                self.data.max_seq_len,
                self.model.max_seq_len
            );
        }
        if let Some(&bad) = self.history.grad_layers.iter().find(|&&l| l == 0 || l > self.model.n_layers) {
            bail!("gradient layer {bad} outside 1..={}", self.model.n_layers);
        }
        Ok(())
    }

    pub fn is_checkpoint_epoch(&self, epoch: u32) -> bool {
        epoch == 0 || epoch == self.train.epochs || (self.checkpoint_every > 0 && epoch % self.checkpoint_every == 0)
    }
}
