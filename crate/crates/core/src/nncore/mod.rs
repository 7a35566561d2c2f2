//! Decoder-only transformer with hand-written forward and backward passes.

mod backward;
mod checkpoint;
mod config;
mod forward;
mod gradcheck;
mod kernels;
mod optim;
mod params;
mod scalar;
mod train;

pub use backward::{backward, Gradients};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expect, load_checkpoint_typed,
    save_checkpoint, AnyState,
};
pub use config::{Activation, ModelConfig, NormPlacement};
pub use forward::{apply_head, cross_entropy_rows, final_norm, forward, DropoutMasks, Forward, LayerMasks, LayerTrace};
pub use gradcheck::{grad_check, grad_check_random, GradCheckReport, GroupError};
pub use optim::{schedule_by_name, AdamW, Constant, Cosine, LrSchedule, OptimState, Optimizer, OptimizerRegistry, Sgd};
pub use params::{init_params, LayerParams, Params};
pub use scalar::{Precision, Real};
pub use train::{eval_loss, train_epoch, EpochSummary, HistorySink, NullSink, StepRecord, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("non-finite activation at layer {layer}, position {position}")]
    NonFinite { layer: usize, position: usize },
    #[error("parameters became non-finite during epoch {epoch}")]
    NonFiniteParams { epoch: u32 },
    #[error("history sink failed, epoch rolled back: {0}")]
    Sink(std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint was written for a different model config: {}", .0.join("; "))]
    ConfigMismatch(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parameters plus the bookkeeping needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
    pub optim: OptimState<T>,
    /// Number of completed epochs.
    pub epoch: u32,
    /// Number of supervised token positions trained on so far.
    pub step: u64,
}

impl<T: Real> ModelState<T> {
    /// Fresh model with parameters drawn from `seed` and empty optimizer state.
    pub fn new(config: &ModelConfig, train: &TrainConfig, seed: u64) -> Result<Self, NnError> {
        let config = ModelConfig {
            precision: T::PRECISION,
            ..config.clone()
        };
        let params = init_params::<T>(&config, seed)?;
        let optim = OptimizerRegistry::<T>::default().build(train)?.init_state(&params);
        Ok(Self {
            config,
            params,
            optim,
            epoch: 0,
            step: 0,
        })
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: ModelConfig {
                precision: U::PRECISION,
                ..self.config.clone()
            },
            params: self.params.cast(),
            optim: OptimState {
                name: self.optim.name.clone(),
                updates: self.optim.updates,
                slots: self.optim.slots.iter().map(|s| s.cast()).collect(),
            },
            epoch: self.epoch,
            step: self.step,
        }
    }

    /// Evaluation-mode forward pass.
    pub fn eval(&self, tokens: &[u16]) -> Result<Forward<T>, NnError> {
        forward(&self.params, &self.config, tokens, None)
    }
}
