use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dualform::histlog::{HistoryHeader, HistoryWriter};
use dualform::nncore::{
    eval_loss, load_checkpoint_typed, save_checkpoint, train_epoch, HistorySink, ModelState, NullSink, OptimizerRegistry, Precision, Real,
};
use dualform::synthlang::{build_dataset, read_dataset, write_dataset, DatasetSplit};

use crate::config::RunConfig;
use crate::rundir::RunDir;

/// Trains according to `cfg` into `dir`, resuming when the directory holds
/// an unfinished run with the same config.
pub fn train_run(cfg: &RunConfig, dir: &RunDir, data: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(dir.checkpoint_dir())?;
    let resuming = dir.config_path().exists() && dir.last_path().exists();
    if resuming {
        let old = dir.config()?;
        if &old != cfg {
            bail!(
                "{} already holds a run with a different config; choose another --out",
                dir.root.display()
            );
        }
    }
    let ds = if resuming {
        dir.dataset(cfg)?
    } else {
        let ds = match data {
            Some(p) => {
                let ds = read_dataset(p, true).with_context(|| format!("reading dataset {}", p.display()))?;
                if ds.config != cfg.data {
                    bail!("dataset {} does not match the run's generation config", p.display());
                }
                ds
            }
            None => build_dataset(&cfg.data)?,
        };
        write_dataset(&ds, &dir.dataset_path())?;
        cfg.save(&dir.config_path())?;
        ds
    };
    match cfg.model.precision {
        Precision::F32 => train_typed::<f32>(cfg, dir, &ds, resuming),
        Precision::F64 => train_typed::<f64>(cfg, dir, &ds, resuming),
    }
}

fn train_typed<T: Real>(cfg: &RunConfig, dir: &RunDir, ds: &DatasetSplit, resuming: bool) -> Result<()> {
    let mut state = if resuming {
        let st = load_checkpoint_typed::<T>(&dir.last_path())?;
        log::info!("resuming at epoch {}", st.epoch);
        st
    } else {
        ModelState::<T>::new(&cfg.model, &cfg.train, cfg.init_seed)?
    };
    if state.config != cfg.model {
        bail!("checkpoint config differs from the run config: {}", state.config.diff(&cfg.model).join("; "));
    }
    if resuming && state.epoch >= cfg.train.epochs {
        log::info!("run already complete at epoch {}", state.epoch);
        return Ok(());
    }
    let mut writer = if cfg.history.stride > 0 {
        let plain = OptimizerRegistry::<T>::default().build(&cfg.train)?.is_plain_sgd();
        Some(if resuming {
            HistoryWriter::resume(&dir.history_path(), state.epoch)?
        } else {
            let header = HistoryHeader::new(
                &cfg.model,
                T::PRECISION,
                cfg.history.stride,
                cfg.history.grad_layers.clone(),
                &cfg.train.optimizer,
                plain,
            );
            HistoryWriter::create(&dir.history_path(), header)?
        })
    } else {
        None
    };
    let log_path = dir.train_log_path();
    let mut log = std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
    if !resuming {
        log.set_len(0)?;
        writeln!(log, "epoch,train_loss,val_loss,lr,clipped")?;
        save_checkpoint(&state, &dir.checkpoint_path(0))?;
        save_checkpoint(&state, &dir.last_path())?;
    }
    let mut null = NullSink;
    while state.epoch < cfg.train.epochs {
        let sink: &mut dyn HistorySink<T> = match writer.as_mut() {
            Some(w) => w,
            None => &mut null,
        };
        let summary = train_epoch(&mut state, &ds.train, &cfg.train, sink)?;
        if let Some(w) = writer.as_mut() {
            w.flush()?;
        }
        let val = if cfg.is_checkpoint_epoch(state.epoch) {
            save_checkpoint(&state, &dir.checkpoint_path(state.epoch))?;
            format!("{:.6}", eval_loss(&state, &ds.validation)?)
        } else {
            String::new()
        };
        save_checkpoint(&state, &dir.last_path())?;
        writeln!(
            log,
            "{},{:.6},{},{},{}",
            state.epoch, summary.mean_loss, val, summary.lr, summary.clipped
        )?;
        log::info!("epoch {} loss {:.4}", state.epoch, summary.mean_loss);
    }
    if let Some(w) = writer {
        let n = w.finish()?;
        log::info!("history holds {n} records");
    }
    Ok(())
}
