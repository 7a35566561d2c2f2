use ndarray::{Array1, Array2};
use serde::Serialize;

use super::{by_sequence, probe_instances, PositionPolicy, ProbeError};
use crate::nncore::{apply_head, cross_entropy_rows, ModelState, Real};
use crate::synthlang::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerLossConfig {
    pub policy: PositionPolicy,
    /// Apply the model's final norm before the head (when the model has one).
    pub use_final_norm: bool,
    /// Drop instances whose last-layer loss exceeds this value.
    pub filter_loss: Option<f64>,
}

impl Default for InnerLossConfig {
    fn default() -> Self {
        Self {
            policy: PositionPolicy::LastToken,
            use_final_norm: true,
            filter_loss: None,
        }
    }
}

/// Per-layer losses for layers `1..=L`: `mean[l - 1]` is the mean over kept
/// instances, `instances[i][l - 1]` one instance's curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InnerLossCurve {
    pub mean: Vec<f64>,
    pub instances: Vec<Vec<f64>>,
    pub filtered: usize,
}

fn finish(curves: Vec<Vec<f64>>, filter: Option<f64>) -> Result<InnerLossCurve, ProbeError> {
    let total = curves.len();
    let kept: Vec<Vec<f64>> = curves
        .into_iter()
        .filter(|c| filter.map_or(true, |m| c.last().map_or(true, |&v| v <= m)))
        .collect();
    if kept.is_empty() {
        return Err(ProbeError::Input(if total == 0 {
            "empty probe set".into()
        } else {
            "every instance was removed by the loss filter".into()
        }));
    }
    let layers = kept[0].len();
    let mean = (0..layers)
        .map(|l| kept.iter().map(|c| c[l]).sum::<f64>() / kept.len() as f64)
        .collect();
    Ok(InnerLossCurve {
        mean,
        filtered: total - kept.len(),
        instances: kept,
    })
}

/// Cross-entropy of feeding each layer's representation straight into the head.
pub fn inner_loss_curve<T: Real>(
    state: &ModelState<T>,
    seqs: &[TokenSequence],
    cfg: &InnerLossConfig,
) -> Result<InnerLossCurve, ProbeError> {
    let instances = probe_instances(seqs, cfg.policy);
    let norm = cfg.use_final_norm && state.config.final_norm_before_head;
    let mut curves = vec![Vec::new(); instances.len()];
    for (si, idx) in by_sequence(&instances) {
        let f = state.eval(&seqs[si].tokens)?;
        for z in &f.trace.z[1..] {
            let losses = cross_entropy_rows(&apply_head(&state.params, &state.config, z, norm), &f.targets);
            for &i in &idx {
                curves[i].push(losses[instances[i].position].as_f64());
            }
        }
    }
    finish(curves, cfg.filter_loss)
}

/// Inner loss of externally supplied representations: `layers[i]` holds one
/// sample's per-layer vectors (rows), `targets[i]` its next token. An optional
/// LayerNorm gain is applied before `head` (vocab x dim).
pub fn inner_loss_from_vectors(
    layers: &[Array2<f64>],
    targets: &[u32],
    head: &Array2<f64>,
    norm_gain: Option<&Array1<f64>>,
    filter_loss: Option<f64>,
) -> Result<InnerLossCurve, ProbeError> {
    if layers.len() != targets.len() {
        return Err(ProbeError::Input(format!("{} samples but {} targets", layers.len(), targets.len())));
    }
    let vocab = head.nrows();
    let mut curves = Vec::with_capacity(layers.len());
    for (z, &t) in layers.iter().zip(targets) {
        if z.ncols() != head.ncols() {
            return Err(ProbeError::Input(format!("vector dim {} != head dim {}", z.ncols(), head.ncols())));
        }
        if t as usize >= vocab {
            return Err(ProbeError::Input(format!("target {t} outside vocabulary of {vocab}")));
        }
        let mut curve = Vec::with_capacity(z.nrows());
        for row in z.rows() {
            let x: Array1<f64> = match norm_gain {
                Some(g) => {
                    let mean = row.sum() / row.len() as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
                    let r = 1.0 / (var + 1e-5).sqrt();
                    row.iter().zip(g).map(|(v, g)| (v - mean) * r * g).collect()
                }
                None => row.to_owned(),
            };
            let logits = head.dot(&x);
            let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            curve.push(lse - logits[t as usize]);
        }
        curves.push(curve);
    }
    finish(curves, filter_loss)
}
