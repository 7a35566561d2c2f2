use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};
use rand::Rng;

use super::kernels::{axpy, dot, matmul_nt, row, row_mut};
use super::{ModelConfig, NnError, NormPlacement, Params, Real};

/// Dropout multipliers (0 or 1/(1-p)) for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks<T> {
    /// n x d_model, applied to the embedding sum
    pub emb: Array2<T>,
    pub layers: Vec<LayerMasks<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMasks<T> {
    /// Per head, n x n, applied to the attention probabilities.
    pub attn: Vec<Array2<T>>,
    /// Applied to the attention output projection before the residual add.
    pub resid_attn: Array2<T>,
    /// Applied to the FFN output before the residual add.
    pub resid_ffn: Array2<T>,
}

impl<T: Real> DropoutMasks<T> {
    /// Draws masks for `n` positions, or `None` when dropout is disabled.
    pub fn sample<R: Rng + ?Sized>(cfg: &ModelConfig, n: usize, rng: &mut R) -> Option<Self> {
        if cfg.dropout <= 0.0 {
            return None;
        }
        let keep = T::from_f64(1.0 / (1.0 - cfg.dropout));
        let p = cfg.dropout;
        let mut draw = |rows: usize, cols: usize| {
            Array2::from_shape_simple_fn((rows, cols), || if rng.gen::<f64>() < p { T::zero() } else { keep })
        };
        let emb = draw(n, cfg.d_model);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerMasks {
                attn: (0..cfg.n_heads).map(|_| draw(n, n)).collect(),
                resid_attn: draw(n, cfg.d_model),
                resid_ffn: draw(n, cfg.d_model),
            })
            .collect();
        Some(Self { emb, layers })
    }
}

/// Intermediate representations of one forward pass, indexed by position.
///
/// Layer indices follow the model: `z[0]` is the embedding output and
/// `z[l]` the output of transformer layer `l` (1-based), so `z` has
/// `n_layers + 1` entries. The per-layer vectors `u`, `attn` and
/// `ffn_hidden` are indexed `0..n_layers` for layers `1..=n_layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace<T> {
    pub z: Vec<Array2<T>>,
    /// Attention-aggregated values `sum_i v_i softmax(..)_i`, n x d_model;
    /// head `h` occupies columns `h*d_head..(h+1)*d_head`. These are the
    /// exact inputs of the output projection (dropout included).
    pub u: Vec<Array2<T>>,
    /// Softmax attention rows per layer and head, n x n, before dropout.
    pub attn: Vec<Vec<Array2<T>>>,
    /// FFN hidden activations `phi(W_1 x)`, n x d_ff.
    pub ffn_hidden: Vec<Array2<T>>,
    /// Input of the LM head (after the final norm when configured).
    pub pre_head: Array2<T>,
    pub logits: Array2<T>,
    pub probs: Array2<T>,
}

impl<T: Real> LayerTrace<T> {
    pub fn n_positions(&self) -> usize {
        self.pre_head.nrows()
    }

    /// One head's aggregated value at `pos` (`layer` is 1-based).
    pub fn head_value(&self, layer: usize, head: usize, d_head: usize, pos: usize) -> ArrayView1<'_, T> {
        self.u[layer - 1].slice(s![pos, head * d_head..(head + 1) * d_head])
    }
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache<T> {
    pub xhat: Array2<T>,
    pub rstd: Array1<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<T> {
    /// Input of the attention projections.
    pub attn_in: Array2<T>,
    /// pre-norm: norm of the layer input; post-norm: norm of the first residual sum
    pub norm1: NormCache<T>,
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    /// Dropped attention probabilities per head (equal to the trace rows without dropout).
    pub attn_dropped: Vec<Array2<T>>,
    /// Input of the FFN.
    pub ffn_in: Array2<T>,
    pub norm2: NormCache<T>,
    pub ffn_pre: Array2<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct Cache<T> {
    pub layers: Vec<LayerCache<T>>,
    pub final_norm: Option<NormCache<T>>,
    pub masks: Option<DropoutMasks<T>>,
}

/// Result of [`forward`]: per-position losses plus everything backward needs.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub inputs: Vec<u16>,
    pub targets: Vec<u16>,
    /// Cross-entropy of each position against its next token.
    pub losses: Vec<T>,
    pub trace: LayerTrace<T>,
    pub(crate) cache: Cache<T>,
}

impl<T: Real> Forward<T> {
    pub fn total_loss(&self) -> f64 {
        self.losses.iter().map(|l| l.as_f64()).sum()
    }
}

pub(crate) fn layer_norm<T: Real>(x: &Array2<T>, gain: &Array1<T>, eps: f64) -> (Array2<T>, NormCache<T>) {
    let d = T::from_f64(x.ncols() as f64);
    let eps = T::from_f64(eps);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        *r = T::one() / (var + eps).sqrt();
        let rr = *r;
        row.mapv_inplace(|v| v * rr);
    }
    let y = &xhat * &gain.view().insert_axis(Axis(0));
    (y, NormCache { xhat, rstd })
}

fn softmax_rows_causal<T: Real>(scores: &mut Array2<T>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let live = row.slice(s![..=i]);
        let m = live.fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - m).exp();
                sum += *v;
            } else {
                *v = T::zero();
            }
        }
        row.slice_mut(s![..=i]).mapv_inplace(|v| v / sum);
    }
}

/// Row-wise softmax plus the cross-entropy of each row against `targets`.
pub(crate) fn softmax_xent<T: Real>(logits: &Array2<T>, targets: &[u16]) -> (Array2<T>, Vec<T>) {
    let mut probs = logits.clone();
    let mut losses = Vec::with_capacity(targets.len());
    for (row, (mut p, &t)) in logits.rows().into_iter().zip(probs.rows_mut().into_iter().zip(targets)) {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        p.mapv_inplace(|v| (v - lse).exp());
        losses.push(lse - row[t as usize]);
    }
    (probs, losses)
}

fn check_finite<T: Real>(x: &Array2<T>, layer: usize) -> Result<(), NnError> {
    for (pos, row) in x.rows().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite { layer, position: pos });
        }
    }
    Ok(())
}

#[inline]
pub(crate) fn mul_mask<T: Real>(x: &mut Array2<T>, mask: Option<&Array2<T>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

/// `x W^T` for a row-major batch of vectors `x`.
#[inline]
pub(crate) fn linear<T: Real>(x: &Array2<T>, w: &Array2<T>) -> Array2<T> {
    matmul_nt(x, w)
}

/// Runs the model over a full token sequence (BOS .. EOS).
///
/// Position `p` reads `tokens[p]` and is scored against `tokens[p + 1]`, so
/// there are `tokens.len() - 1` positions. Passing masks enables dropout;
/// `None` is evaluation mode.
pub fn forward<T: Real>(
    params: &Params<T>,
    cfg: &ModelConfig,
    tokens: &[u16],
    masks: Option<&DropoutMasks<T>>,
) -> Result<Forward<T>, NnError> {
    if tokens.len() < 2 {
        return Err(NnError::Input("need at least two tokens".into()));
    }
    let inputs = &tokens[..tokens.len() - 1];
    let targets = &tokens[1..];
    let n = inputs.len();
    if n > cfg.max_seq_len {
        return Err(NnError::Input(format!("{n} positions exceed max_seq_len {}", cfg.max_seq_len)));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(NnError::Input(format!("token id {bad} outside vocabulary of {}", cfg.vocab)));
    }
    if let Some(m) = masks {
        if m.emb.nrows() != n {
            return Err(NnError::Input("dropout masks sized for a different length".into()));
        }
    }

    let d = cfg.d_model;
    let dh = cfg.d_head();
    let eps = cfg.layer_norm_eps;
    let scale = if cfg.attn_scale {
        T::from_f64(1.0 / (dh as f64).sqrt())
    } else {
        T::one()
    };

    let mut h = Array2::<T>::zeros((n, d));
    for (p, (&tok, mut row)) in inputs.iter().zip(h.rows_mut()).enumerate() {
        Zip::from(&mut row)
            .and(&params.tok_emb.row(tok as usize))
            .and(&params.pos_emb.row(p))
            .for_each(|o, &a, &b| *o = a + b);
    }
    mul_mask(&mut h, masks.map(|m| &m.emb));
    check_finite(&h, 0)?;

    let mut trace_z = Vec::with_capacity(cfg.n_layers + 1);
    let mut trace_u = Vec::with_capacity(cfg.n_layers);
    let mut trace_attn = Vec::with_capacity(cfg.n_layers);
    let mut trace_a = Vec::with_capacity(cfg.n_layers);
    let mut caches = Vec::with_capacity(cfg.n_layers);
    trace_z.push(h.clone());

    for (li, lp) in params.layers.iter().enumerate() {
        let lm = masks.map(|m| &m.layers[li]);

        // attention sublayer
        let (attn_in, pre_norm1) = match cfg.norm_placement {
            NormPlacement::Pre => {
                let (y, c) = layer_norm(&h, &lp.ln1, eps);
                (y, Some(c))
            }
            NormPlacement::Post => (h.clone(), None),
        };
        let q = linear(&attn_in, &lp.w_q);
        let k = linear(&attn_in, &lp.w_k);
        let v = linear(&attn_in, &lp.w_v);
        let mut u = Array2::<T>::zeros((n, d));
        let mut rows = Vec::with_capacity(cfg.n_heads);
        let mut dropped = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let r = hd * dh..(hd + 1) * dh;
            let mut scores = Array2::<T>::zeros((n, n));
            for i in 0..n {
                let qi = &row(&q, i)[r.clone()];
                let srow = row_mut(&mut scores, i);
                for (j, sj) in srow.iter_mut().enumerate().take(i + 1) {
                    *sj = dot(qi, &row(&k, j)[r.clone()]) * scale;
                }
            }
            softmax_rows_causal(&mut scores);
            let mut pd = scores.clone();
            mul_mask(&mut pd, lm.map(|m| &m.attn[hd]));
            for i in 0..n {
                let prow = row(&pd, i);
                let ui = &mut row_mut(&mut u, i)[r.clone()];
                for (j, &pj) in prow.iter().enumerate().take(i + 1) {
                    if pj != T::zero() {
                        axpy(pj, &row(&v, j)[r.clone()], ui);
                    }
                }
            }
            rows.push(scores);
            dropped.push(pd);
        }
        let mut y = linear(&u, &lp.w_o);
        mul_mask(&mut y, lm.map(|m| &m.resid_attn));
        let sum1 = &h + &y;
        let (mid, norm1) = match pre_norm1 {
            Some(c) => (sum1, c),
            None => layer_norm(&sum1, &lp.ln1, eps),
        };

        // feed-forward sublayer
        let (ffn_in, norm2_pre) = match cfg.norm_placement {
            NormPlacement::Pre => {
                let (y, c) = layer_norm(&mid, &lp.ln2, eps);
                (y, Some(c))
            }
            NormPlacement::Post => (mid.clone(), None),
        };
        let ffn_pre = linear(&ffn_in, &lp.w1);
        let act = cfg.activation;
        let a = ffn_pre.mapv(|x| T::from_f64(act.apply(x.as_f64())));
        let mut b = linear(&a, &lp.w2);
        mul_mask(&mut b, lm.map(|m| &m.resid_ffn));
        let sum2 = &mid + &b;
        let (out, norm2) = match norm2_pre {
            Some(c) => (sum2, c),
            None => layer_norm(&sum2, &lp.ln2, eps),
        };
        check_finite(&out, li + 1)?;

        trace_u.push(u);
        trace_attn.push(rows);
        trace_a.push(a);
        trace_z.push(out.clone());
        caches.push(LayerCache {
            attn_in,
            norm1,
            q,
            k,
            v,
            attn_dropped: dropped,
            ffn_in,
            norm2,
            ffn_pre,
        });
        h = out;
    }

    let (pre_head, final_cache) = if cfg.final_norm_before_head {
        let (y, c) = layer_norm(&h, &params.final_norm, eps);
        (y, Some(c))
    } else {
        (h, None)
    };
    let logits = linear(&pre_head, &params.head);
    check_finite(&logits, cfg.n_layers + 1)?;
    let (probs, losses) = softmax_xent(&logits, targets);

    Ok(Forward {
        inputs: inputs.to_vec(),
        targets: targets.to_vec(),
        losses,
        trace: LayerTrace {
            z: trace_z,
            u: trace_u,
            attn: trace_attn,
            ffn_hidden: trace_a,
            pre_head,
            logits,
            probs,
        },
        cache: Cache {
            layers: caches,
            final_norm: final_cache,
            masks: masks.cloned(),
        },
    })
}

/// Applies the model's head (final norm if configured, then `W_LH`) to
/// arbitrary representations, returning logits.
pub fn apply_head<T: Real>(params: &Params<T>, cfg: &ModelConfig, z: &Array2<T>, use_final_norm: bool) -> Array2<T> {
    if use_final_norm {
        let (y, _) = layer_norm(z, &params.final_norm, cfg.layer_norm_eps);
        linear(&y, &params.head)
    } else {
        linear(&z, &params.head)
    }
}

/// The model's final normalization applied to arbitrary representations.
pub fn final_norm<T: Real>(params: &Params<T>, cfg: &ModelConfig, z: &Array2<T>) -> Array2<T> {
    layer_norm(z, &params.final_norm, cfg.layer_norm_eps).0
}

/// Natural-log softmax cross-entropy of each row against `targets`.
pub fn cross_entropy_rows<T: Real>(logits: &Array2<T>, targets: &[u16]) -> Vec<T> {
    softmax_xent(logits, targets).1
}
