use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backward, forward, schedule_by_name, DropoutMasks, Gradients, LayerTrace, ModelState, NnError, OptimizerRegistry, Real};
use crate::synthlang::{shuffled_indices, TokenSequence};

/// Optimization settings. [`TrainConfig::sgd`] and [`TrainConfig::adamw`]
/// are the two reference profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: String,
    pub lr: f64,
    pub epochs: u32,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub lr_schedule: String,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::sgd()
    }
}

impl TrainConfig {
    pub fn sgd() -> Self {
        Self {
            optimizer: "sgd".into(),
            lr: 1.0,
            epochs: 174,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
            lr_schedule: "constant".into(),
            rng_seed: 0,
        }
    }

    pub fn adamw() -> Self {
        Self {
            optimizer: "adamw".into(),
            lr: 1e-3,
            epochs: 300,
            weight_decay: 0.1,
            max_grad_norm: 1.0,
            lr_schedule: "cosine".into(),
            rng_seed: 0,
        }
    }
}

/// Everything one supervised sequence contributed to an update, handed to a
/// [`HistorySink`] before the weights change.
pub struct StepRecord<'a, T> {
    pub epoch: u32,
    pub sequence_id: u32,
    pub sequence: &'a TokenSequence,
    /// Global token-step index of the sequence's first position.
    pub first_step: u64,
    pub trace: &'a LayerTrace<T>,
    pub grads: &'a Gradients<T>,
    /// Effective learning rate `lr * clip_scale`.
    pub eta: f64,
}

/// Receives per-sequence training data.
pub trait HistorySink<T: Real> {
    fn record(&mut self, step: &StepRecord<'_, T>) -> std::io::Result<()>;
}

/// Discards everything.
pub struct NullSink;

impl<T: Real> HistorySink<T> for NullSink {
    fn record(&mut self, _: &StepRecord<'_, T>) -> std::io::Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u32,
    /// Mean per-token training loss (dropout active).
    pub mean_loss: f64,
    pub lr: f64,
    /// Number of updates whose gradient was clipped.
    pub clipped: usize,
}

fn epoch_rng(seed: u64, epoch: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Runs one epoch: seeded shuffle, one update per sequence on the summed
/// token losses, global-norm clipping, history handed to `sink`.
///
/// If the sink fails, the state is rolled back to the start of the epoch so
/// it can be checkpointed and resumed.
pub fn train_epoch<T: Real>(
    state: &mut ModelState<T>,
    data: &[TokenSequence],
    cfg: &TrainConfig,
    sink: &mut dyn HistorySink<T>,
) -> Result<EpochSummary, NnError> {
    let optimizer = OptimizerRegistry::<T>::default().build(cfg)?;
    if optimizer.name() != state.optim.name {
        return Err(NnError::Config(format!(
            "state carries {} optimizer state but the config asks for {}",
            state.optim.name,
            optimizer.name()
        )));
    }
    let schedule = schedule_by_name(&cfg.lr_schedule)?;
    let epoch = state.epoch;
    let lr = schedule.lr_at(cfg.lr, epoch, cfg.epochs);
    let mut rng = epoch_rng(cfg.rng_seed, epoch);
    let order = shuffled_indices(data.len(), &mut rng);
    let snapshot = state.clone();

    let mut loss_sum = 0.0;
    let mut tokens = 0usize;
    let mut clipped = 0;
    for &idx in &order {
        let seq = &data[idx];
        let n = seq.n_targets();
        let masks = DropoutMasks::<T>::sample(&state.config, n, &mut rng);
        let fwd = forward(&state.params, &state.config, &seq.tokens, masks.as_ref())?;
        let grads = backward(&state.params, &state.config, &fwd);
        let norm = grads.params.sq_norm().sqrt();
        let clip = if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
            clipped += 1;
            cfg.max_grad_norm / norm
        } else {
            1.0
        };
        let rec = StepRecord {
            epoch,
            sequence_id: idx as u32,
            sequence: seq,
            first_step: state.step,
            trace: &fwd.trace,
            grads: &grads,
            eta: lr * clip,
        };
        if let Err(e) = sink.record(&rec) {
            *state = snapshot;
            return Err(NnError::Sink(e));
        }
        optimizer.update(&mut state.params, &grads.params, &mut state.optim, lr, clip);
        state.step += n as u64;
        loss_sum += fwd.total_loss();
        tokens += n;
    }
    if !state.params.all_finite() {
        return Err(NnError::NonFiniteParams { epoch });
    }
    state.epoch += 1;
    Ok(EpochSummary {
        epoch,
        mean_loss: if tokens > 0 { loss_sum / tokens as f64 } else { 0.0 },
        lr,
        clipped,
    })
}

/// Mean per-token loss in evaluation mode.
pub fn eval_loss<T: Real>(state: &ModelState<T>, data: &[TokenSequence]) -> Result<f64, NnError> {
    let mut sum = 0.0;
    let mut n = 0;
    for seq in data {
        let f = forward(&state.params, &state.config, &seq.tokens, None)?;
        sum += f.total_loss();
        n += f.losses.len();
    }
    Ok(if n > 0 { sum / n as f64 } else { 0.0 })
}
