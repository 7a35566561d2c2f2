use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dualform::histlog::HistoryReader;
use dualform::nncore::{load_checkpoint_expect, AnyState};
use dualform::synthlang::{read_dataset, DatasetSplit};

use crate::config::RunConfig;

/// On-disk layout of one training run.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.root.join("dataset.jsonl")
    }

    pub fn history_path(&self) -> PathBuf {
        self.root.join("history.hlog")
    }

    pub fn last_path(&self) -> PathBuf {
        self.root.join("last.ckpt")
    }

    pub fn train_log_path(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint_path(&self, epoch: u32) -> PathBuf {
        self.checkpoint_dir().join(format!("epoch_{epoch:04}.ckpt"))
    }

    pub fn config(&self) -> Result<RunConfig> {
        let p = self.config_path();
        if !p.exists() {
            bail!("{} is not a run directory (missing config.json)", self.root.display());
        }
        RunConfig::load(&p)
    }

    /// The run's dataset, checked against the generation config it was made from.
    pub fn dataset(&self, cfg: &RunConfig) -> Result<DatasetSplit> {
        let p = self.dataset_path();
        let ds = read_dataset(&p, false).with_context(|| format!("reading dataset {}", p.display()))?;
        if ds.config != cfg.data {
            bail!("dataset {} was generated with a different config than the run", p.display());
        }
        Ok(ds)
    }

    /// Epochs with a saved checkpoint, ascending.
    pub fn checkpoint_epochs(&self) -> Result<Vec<u32>> {
        let dir = self.checkpoint_dir();
        if !dir.exists() {
            return Ok(vec![]);
        }
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&dir)? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(e) = name.strip_prefix("epoch_").and_then(|s| s.strip_suffix(".ckpt")) {
                if let Ok(e) = e.parse() {
                    out.push(e);
                }
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn checkpoint(&self, cfg: &RunConfig, epoch: u32) -> Result<AnyState> {
        let p = self.checkpoint_path(epoch);
        if !p.exists() {
            bail!("no checkpoint for epoch {epoch} in {}", self.checkpoint_dir().display());
        }
        Ok(load_checkpoint_expect(&p, &cfg.model)?)
    }

    pub fn history(&self, cfg: &RunConfig) -> Result<HistoryReader> {
        let p = self.history_path();
        if !p.exists() {
            bail!("run has no history log ({} missing)", p.display());
        }
        let r = HistoryReader::open(&p)?;
        r.check_config(&cfg.model)?;
        if r.truncated() {
            log::warn!("history log {} has a damaged tail", p.display());
        }
        Ok(r)
    }
}
