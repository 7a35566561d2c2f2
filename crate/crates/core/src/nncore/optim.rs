//! Optimizers and learning-rate schedules, selected by name.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::kernels::axpy;
use super::params::{flat, flat_mut};
use super::{NnError, Params, Real, TrainConfig};

/// Per-run optimizer state. SGD keeps no slots; AdamW keeps the first and
/// second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub name: String,
    pub updates: u64,
    pub slots: Vec<Params<T>>,
}

/// One update rule.
pub trait Optimizer<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// True when the update is exactly `W -= lr * clip * grad`, the only
    /// case in which training-history reconstruction is exact.
    fn is_plain_sgd(&self) -> bool {
        false
    }

    fn init_state(&self, params: &Params<T>) -> OptimState<T>;

    /// Applies one update. `clip` is the global-norm clipping factor already
    /// folded into the effective learning rate `lr * clip`.
    fn update(&self, params: &mut Params<T>, grads: &Params<T>, state: &mut OptimState<T>, lr: f64, clip: f64);
}

pub struct Sgd;

impl<T: Real> Optimizer<T> for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn is_plain_sgd(&self) -> bool {
        true
    }

    fn init_state(&self, _: &Params<T>) -> OptimState<T> {
        OptimState {
            name: "sgd".into(),
            updates: 0,
            slots: vec![],
        }
    }

    fn update(&self, params: &mut Params<T>, grads: &Params<T>, state: &mut OptimState<T>, lr: f64, clip: f64) {
        let eta = T::from_f64(lr * clip);
        for (mut p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            axpy(-eta, flat(&g), flat_mut(&mut p));
        }
        state.updates += 1;
    }
}

/// Adam with decoupled weight decay (applied to every tensor).
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

impl<T: Real> Optimizer<T> for AdamW {
    fn name(&self) -> &'static str {
        "adamw"
    }

    fn init_state(&self, params: &Params<T>) -> OptimState<T> {
        let mut z = params.clone();
        for mut t in z.tensors_mut() {
            t.fill(T::zero());
        }
        OptimState {
            name: "adamw".into(),
            updates: 0,
            slots: vec![z.clone(), z],
        }
    }

    fn update(&self, params: &mut Params<T>, grads: &Params<T>, state: &mut OptimState<T>, lr: f64, clip: f64) {
        state.updates += 1;
        let t = state.updates as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let decay = T::from_f64(1.0 - lr * self.weight_decay);
        let step = T::from_f64(lr / bc1);
        let bc2_sqrt = T::from_f64(bc2.sqrt());
        let eps = T::from_f64(self.eps);
        let clip = T::from_f64(clip);
        let (m_slot, v_slot) = state.slots.split_at_mut(1);
        for (((mut p, g), mut m), mut v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(m_slot[0].tensors_mut())
            .zip(v_slot[0].tensors_mut())
        {
            let (p, m, v) = (flat_mut(&mut p), flat_mut(&mut m), flat_mut(&mut v));
            for (((p, &g), m), v) in p.iter_mut().zip(flat(&g)).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * clip;
                *p *= decay;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// Learning rate as a function of the epoch.
pub trait LrSchedule: Send + Sync {
    fn name(&self) -> &'static str;
    fn lr_at(&self, base: f64, epoch: u32, total_epochs: u32) -> f64;
}

pub struct Constant;

impl LrSchedule for Constant {
    fn name(&self) -> &'static str {
        "constant"
    }
    fn lr_at(&self, base: f64, _: u32, _: u32) -> f64 {
        base
    }
}

/// Cosine annealing from `base` to zero over the run, stepped per epoch.
pub struct Cosine;

impl LrSchedule for Cosine {
    fn name(&self) -> &'static str {
        "cosine"
    }
    fn lr_at(&self, base: f64, epoch: u32, total_epochs: u32) -> f64 {
        if total_epochs == 0 {
            return base;
        }
        0.5 * base * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos())
    }
}

type OptimizerCtor<T> = fn(&TrainConfig) -> Box<dyn Optimizer<T>>;

/// Name -> constructor table for optimizers.
pub struct OptimizerRegistry<T: Real> {
    entries: BTreeMap<&'static str, OptimizerCtor<T>>,
}

impl<T: Real> Default for OptimizerRegistry<T> {
    fn default() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.register("sgd", |_| Box::new(Sgd));
        r.register("adamw", |c| Box::new(AdamW::new(c.weight_decay)));
        r
    }
}

impl<T: Real> OptimizerRegistry<T> {
    pub fn register(&mut self, name: &'static str, ctor: OptimizerCtor<T>) {
        self.entries.insert(name, ctor);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn build(&self, cfg: &TrainConfig) -> Result<Box<dyn Optimizer<T>>, NnError> {
        self.entries
            .get(cfg.optimizer.as_str())
            .map(|ctor| ctor(cfg))
            .ok_or_else(|| NnError::Config(format!("unknown optimizer {:?} (known: {:?})", cfg.optimizer, self.names())))
    }
}

/// Looks up a learning-rate schedule by name.
pub fn schedule_by_name(name: &str) -> Result<Box<dyn LrSchedule>, NnError> {
    let all: Vec<Box<dyn LrSchedule>> = vec![Box::new(Constant), Box::new(Cosine)];
    let names: Vec<&str> = all.iter().map(|s| s.name()).collect::<Vec<_>>();
    let known = format!("{names:?}");
    all.into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| NnError::Config(format!("unknown lr schedule {name:?} (known: {known})")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(Cosine.lr_at(1e-3, 0, 300), 1e-3);
        assert!((Cosine.lr_at(1e-3, 150, 300) - 5e-4).abs() < 1e-15);
        assert!(Cosine.lr_at(1e-3, 300, 300).abs() < 1e-18);
        assert_eq!(Constant.lr_at(1.0, 17, 174), 1.0);
    }

    #[test]
    fn registry_lookup() {
        let reg = OptimizerRegistry::<f64>::default();
        assert_eq!(reg.names(), vec!["adamw", "sgd"]);
        let cfg = TrainConfig::sgd();
        assert!(reg.build(&cfg).unwrap().is_plain_sgd());
        let bad = TrainConfig {
            optimizer: "lion".into(),
            ..TrainConfig::sgd()
        };
        assert!(reg.build(&bad).is_err());
        assert!(schedule_by_name("cosine").is_ok());
        assert!(schedule_by_name("step").is_err());
    }
}
