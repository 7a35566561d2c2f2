use ndarray::{s, Array1, Array2};
use serde::Serialize;

use super::{HistError, HistoryHeader, HistoryReader, HistoryRecord, RecordFilter};
use crate::nncore::{ModelConfig, Params};

/// A matrix whose training history is a sum of recorded outer products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum WeightTarget {
    /// LM head, vocab x d_model.
    Head,
    /// One head's block of the attention output projection, d_model x d_head (1-based layer).
    OutProj { layer: usize, head: usize },
    /// FFN output projection, d_model x d_ff (1-based layer).
    Ffn2 { layer: usize },
}

impl std::fmt::Display for WeightTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightTarget::Head => write!(f, "W_LH"),
            WeightTarget::OutProj { layer, head } => write!(f, "W_O[layer {layer}, head {head}]"),
            WeightTarget::Ffn2 { layer } => write!(f, "W_2[layer {layer}]"),
        }
    }
}

impl WeightTarget {
    /// The matrix as stored in a parameter set.
    pub fn extract(&self, params: &Params<f64>, cfg: &ModelConfig) -> Array2<f64> {
        match *self {
            WeightTarget::Head => params.head.clone(),
            WeightTarget::OutProj { layer, head } => {
                let dh = cfg.d_head();
                params.layers[layer - 1].w_o.slice(s![.., head * dh..(head + 1) * dh]).to_owned()
            }
            WeightTarget::Ffn2 { layer } => params.layers[layer - 1].w2.clone(),
        }
    }

    fn check(&self, h: &HistoryHeader) -> Result<(), HistError> {
        let layer_ok = |l: usize| (1..=h.n_layers).contains(&l);
        match *self {
            WeightTarget::Head => Ok(()),
            WeightTarget::OutProj { layer, head } => {
                if !layer_ok(layer) || head >= h.n_heads {
                    return Err(HistError::Range(format!("layer {layer}, head {head}")));
                }
                h.grad_slot(layer)
                    .map(|_| ())
                    .ok_or_else(|| HistError::NotRecorded(format!("attention output gradient of layer {layer}")))
            }
            WeightTarget::Ffn2 { layer } => {
                if !layer_ok(layer) {
                    return Err(HistError::Range(format!("layer {layer}")));
                }
                h.grad_slot(layer)
                    .map(|_| ())
                    .ok_or_else(|| HistError::NotRecorded(format!("FFN output gradient of layer {layer}")))
            }
        }
    }

    fn shape(&self, h: &HistoryHeader) -> (usize, usize) {
        match self {
            WeightTarget::Head => (h.vocab, h.d_model),
            WeightTarget::OutProj { .. } => (h.d_model, h.d_head),
            WeightTarget::Ffn2 { .. } => (h.d_model, h.d_ff),
        }
    }

    /// Adds `eta * grad (x) input` for one record.
    fn accumulate(&self, h: &HistoryHeader, r: &HistoryRecord, acc: &mut Array2<f64>) {
        let add = |acc: &mut Array2<f64>, g: &[f64], x: &[f64]| {
            for (mut row, &gi) in acc.rows_mut().into_iter().zip(g) {
                let c = r.eta * gi;
                if c != 0.0 {
                    for (w, &xj) in row.iter_mut().zip(x) {
                        *w += c * xj;
                    }
                }
            }
        };
        match *self {
            WeightTarget::Head => {
                let mut g = r.s.clone();
                g[r.next_token as usize] -= 1.0;
                add(acc, &g, &r.z);
            }
            WeightTarget::OutProj { layer, head } => {
                add(acc, r.grad_y_layer(h, layer).expect("checked"), r.u_head(h, layer, head));
            }
            WeightTarget::Ffn2 { layer } => {
                add(acc, r.grad_b_layer(h, layer).expect("checked"), r.a_layer(h, layer));
            }
        }
    }
}

fn require_exact(h: &HistoryHeader) -> Result<(), HistError> {
    if !h.plain_sgd {
        return Err(HistError::NotSgd(h.optimizer.clone()));
    }
    if h.epoch_stride != 1 {
        return Err(HistError::Subsampled(h.epoch_stride));
    }
    Ok(())
}

/// `sum_{t <= up_to_step} eta_t grad_t (x) x_t` for each target, in one pass.
pub fn reconstruct_delta(
    reader: &mut HistoryReader,
    targets: &[WeightTarget],
    up_to_step: Option<u64>,
) -> Result<Vec<Array2<f64>>, HistError> {
    let h = reader.header().clone();
    require_exact(&h)?;
    for t in targets {
        t.check(&h)?;
    }
    let mut acc: Vec<Array2<f64>> = targets.iter().map(|t| Array2::zeros(t.shape(&h))).collect();
    reader.scan(&RecordFilter::up_to(up_to_step), |r| {
        for (t, a) in targets.iter().zip(acc.iter_mut()) {
            t.accumulate(&h, r, a);
        }
    })?;
    Ok(acc)
}

/// `W_0 - sum_t eta_t grad_t (x) x_t`: the weight SGD produced after `up_to_step`.
pub fn reconstruct_weight(
    reader: &mut HistoryReader,
    w0: &Params<f64>,
    target: WeightTarget,
    up_to_step: Option<u64>,
) -> Result<Array2<f64>, HistError> {
    let delta = reconstruct_delta(reader, &[target], up_to_step)?.remove(0);
    Ok(target.extract(w0, &reader.header().config) - &delta)
}

/// Logits of the LM head written purely as a sum over history:
/// `sum_t eta_t (y_t - s_t) (z_t . q)` for every row `q` of `queries`.
pub fn dual_head_logits_batch(
    reader: &mut HistoryReader,
    queries: &Array2<f64>,
    up_to_step: Option<u64>,
) -> Result<Array2<f64>, HistError> {
    let h = reader.header().clone();
    if queries.ncols() != h.d_model {
        return Err(HistError::Range(format!("query width {} != d_model {}", queries.ncols(), h.d_model)));
    }
    let mut out = Array2::<f64>::zeros((queries.nrows(), h.vocab));
    let mut g = vec![0.0; h.vocab];
    let n = reader.scan(&RecordFilter::up_to(up_to_step), |r| {
        for (gi, &si) in g.iter_mut().zip(&r.s) {
            *gi = -r.eta * si;
        }
        g[r.next_token as usize] += r.eta;
        for (q, mut o) in queries.rows().into_iter().zip(out.rows_mut()) {
            let w: f64 = q.iter().zip(&r.z).map(|(a, b)| a * b).sum();
            if w != 0.0 {
                for (oi, &gi) in o.iter_mut().zip(&g) {
                    *oi += w * gi;
                }
            }
        }
    })?;
    if n == 0 {
        log::warn!("history is empty, dual logits are zero");
    }
    Ok(out)
}

pub fn dual_head_logits(reader: &mut HistoryReader, z_query: &[f64], up_to_step: Option<u64>) -> Result<Array1<f64>, HistError> {
    let q = Array2::from_shape_vec((1, z_query.len()), z_query.to_vec()).expect("one row");
    Ok(dual_head_logits_batch(reader, &q, up_to_step)?.row(0).to_owned())
}

/// One history step with its weighting factor against a query.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedStep {
    pub step: u64,
    pub epoch: u32,
    pub sequence_id: u32,
    pub position: u16,
    pub seed_label: u16,
    pub next_token: u16,
    pub weight: f64,
}

fn weighted(r: &HistoryRecord, weight: f64) -> WeightedStep {
    WeightedStep {
        step: r.step,
        epoch: r.epoch,
        sequence_id: r.sequence_id,
        position: r.position,
        seed_label: r.seed_label,
        next_token: r.next_token,
        weight,
    }
}

/// `w_t = u_t . u_query` at one attention head, for every recorded step.
pub fn mhsa_weights(
    reader: &mut HistoryReader,
    layer: usize,
    head: usize,
    u_query: &[f64],
    up_to_step: Option<u64>,
) -> Result<Vec<WeightedStep>, HistError> {
    let h = reader.header().clone();
    if !(1..=h.n_layers).contains(&layer) || head >= h.n_heads {
        return Err(HistError::Range(format!("layer {layer}, head {head}")));
    }
    if u_query.len() != h.d_head {
        return Err(HistError::Range(format!("query width {} != d_head {}", u_query.len(), h.d_head)));
    }
    let mut out = Vec::new();
    reader.scan(&RecordFilter::up_to(up_to_step), |r| {
        let w = r.u_head(&h, layer, head).iter().zip(u_query).map(|(a, b)| a * b).sum();
        out.push(weighted(r, w));
    })?;
    Ok(out)
}

/// `w_t = a_t . a_query` at one FFN layer, for every recorded step.
pub fn ffn_weights(
    reader: &mut HistoryReader,
    layer: usize,
    a_query: &[f64],
    up_to_step: Option<u64>,
) -> Result<Vec<WeightedStep>, HistError> {
    let h = reader.header().clone();
    if !(1..=h.n_layers).contains(&layer) {
        return Err(HistError::Range(format!("layer {layer}")));
    }
    if a_query.len() != h.d_ff {
        return Err(HistError::Range(format!("query width {} != d_ff {}", a_query.len(), h.d_ff)));
    }
    let mut out = Vec::new();
    reader.scan(&RecordFilter::up_to(up_to_step), |r| {
        let w = r.a_layer(&h, layer).iter().zip(a_query).map(|(a, b)| a * b).sum();
        out.push(weighted(r, w));
    })?;
    Ok(out)
}
