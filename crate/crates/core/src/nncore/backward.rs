use ndarray::{Array1, Array2, Axis};

use super::forward::{mul_mask, NormCache};
use super::kernels::{acc_tn, axpy, dot, matmul_nn, row, row_mut};
use super::{Forward, ModelConfig, NormPlacement, Params, Real};

/// Gradients of the summed per-position cross-entropy.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: Params<T>,
    /// Per layer, n x d_model: gradient at the attention output projection's
    /// output `y = W_O u` (before residual dropout). Every head's slice
    /// `W_O^h u^h` feeds the same sum, so this is also each head's gradient.
    pub d_attn_out: Vec<Array2<T>>,
    /// Per layer, n x d_model: gradient at `b = W_2 a` (before residual dropout).
    pub d_ffn_out: Vec<Array2<T>>,
    /// n x vocab: `softmax(logits) - onehot(target)`.
    pub d_logits: Array2<T>,
}

fn layer_norm_backward<T: Real>(dy: &Array2<T>, cache: &NormCache<T>, gain: &Array1<T>, dgain: &mut Array1<T>) -> Array2<T> {
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    let dxhat = dy * &gain.view().insert_axis(Axis(0));
    let d = T::from_f64(dy.ncols() as f64);
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &r) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean_g = g.sum() / d;
        let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
        for ((o, &gi), &xi) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
            *o = r * (gi - mean_g - xi * mean_gx);
        }
    }
    dx
}

/// `dW += dy^T x` for `y = x W^T`.
#[inline]
fn acc_weight<T: Real>(dw: &mut Array2<T>, dy: &Array2<T>, x: &Array2<T>) {
    acc_tn(dw, dy, x);
}

/// Exact backpropagation through the pass recorded in `fwd`.
pub fn backward<T: Real>(params: &Params<T>, cfg: &ModelConfig, fwd: &Forward<T>) -> Gradients<T> {
    let n = fwd.inputs.len();
    let dh = cfg.d_head();
    let scale = if cfg.attn_scale {
        T::from_f64(1.0 / (dh as f64).sqrt())
    } else {
        T::one()
    };
    let masks = fwd.cache.masks.as_ref();
    let mut g = Params::<T>::zeros(cfg);

    let mut d_logits = fwd.trace.probs.clone();
    for (p, &t) in fwd.targets.iter().enumerate() {
        d_logits[[p, t as usize]] -= T::one();
    }
    acc_weight(&mut g.head, &d_logits, &fwd.trace.pre_head);
    let d_pre_head = matmul_nn(&d_logits, &params.head);
    let mut dh_cur = match &fwd.cache.final_norm {
        Some(c) => layer_norm_backward(&d_pre_head, c, &params.final_norm, &mut g.final_norm),
        None => d_pre_head,
    };

    let mut d_attn_out = vec![Array2::zeros((0, 0)); cfg.n_layers];
    let mut d_ffn_out = vec![Array2::zeros((0, 0)); cfg.n_layers];

    for li in (0..cfg.n_layers).rev() {
        let lp = &params.layers[li];
        let lc = &fwd.cache.layers[li];
        let gl = &mut g.layers[li];
        let lm = masks.map(|m| &m.layers[li]);
        let a = &fwd.trace.ffn_hidden[li];
        let u = &fwd.trace.u[li];

        // FFN sublayer
        let d_sum2 = match cfg.norm_placement {
            NormPlacement::Pre => dh_cur.clone(),
            NormPlacement::Post => layer_norm_backward(&dh_cur, &lc.norm2, &lp.ln2, &mut gl.ln2),
        };
        let mut db = d_sum2.clone();
        mul_mask(&mut db, lm.map(|m| &m.resid_ffn));
        acc_weight(&mut gl.w2, &db, a);
        let da = matmul_nn(&db, &lp.w2);
        let act = cfg.activation;
        let mut dpre = da;
        ndarray::Zip::from(&mut dpre)
            .and(&lc.ffn_pre)
            .for_each(|g, &x| *g *= T::from_f64(act.derivative(x.as_f64())));
        acc_weight(&mut gl.w1, &dpre, &lc.ffn_in);
        let d_ffn_in = matmul_nn(&dpre, &lp.w1);
        let d_mid = match cfg.norm_placement {
            NormPlacement::Pre => d_sum2 + &layer_norm_backward(&d_ffn_in, &lc.norm2, &lp.ln2, &mut gl.ln2),
            NormPlacement::Post => d_sum2 + &d_ffn_in,
        };
        d_ffn_out[li] = db;

        // attention sublayer
        let d_sum1 = match cfg.norm_placement {
            NormPlacement::Pre => d_mid,
            NormPlacement::Post => layer_norm_backward(&d_mid, &lc.norm1, &lp.ln1, &mut gl.ln1),
        };
        let mut dy = d_sum1.clone();
        mul_mask(&mut dy, lm.map(|m| &m.resid_attn));
        acc_weight(&mut gl.w_o, &dy, u);
        let du = matmul_nn(&dy, &lp.w_o);
        let mut dq = Array2::<T>::zeros((n, cfg.d_model));
        let mut dk = Array2::<T>::zeros((n, cfg.d_model));
        let mut dv = Array2::<T>::zeros((n, cfg.d_model));
        for hd in 0..cfg.n_heads {
            let r = hd * dh..(hd + 1) * dh;
            let probs = &fwd.trace.attn[li][hd];
            let pd = &lc.attn_dropped[hd];
            let amask = lm.map(|m| &m.attn[hd]);
            let mut ds = vec![T::zero(); n];
            for i in 0..n {
                // u_i = sum_j pd_ij v_j
                let du_i = &row(&du, i)[r.clone()];
                let p_i = row(probs, i);
                let pd_i = row(pd, i);
                for j in 0..=i {
                    let mut g = dot(du_i, &row(&lc.v, j)[r.clone()]);
                    if let Some(m) = amask {
                        g *= m[[i, j]];
                    }
                    ds[j] = g;
                    if pd_i[j] != T::zero() {
                        axpy(pd_i[j], du_i, &mut row_mut(&mut dv, j)[r.clone()]);
                    }
                }
                // softmax backward over the causal prefix
                let mut inner = T::zero();
                for j in 0..=i {
                    inner += ds[j] * p_i[j];
                }
                let q_i = row(&lc.q, i)[r.clone()].to_vec();
                for j in 0..=i {
                    let g = p_i[j] * (ds[j] - inner) * scale;
                    if g != T::zero() {
                        axpy(g, &row(&lc.k, j)[r.clone()], &mut row_mut(&mut dq, i)[r.clone()]);
                        axpy(g, &q_i, &mut row_mut(&mut dk, j)[r.clone()]);
                    }
                }
            }
        }
        acc_weight(&mut gl.w_q, &dq, &lc.attn_in);
        acc_weight(&mut gl.w_k, &dk, &lc.attn_in);
        acc_weight(&mut gl.w_v, &dv, &lc.attn_in);
        let d_attn_in = matmul_nn(&dq, &lp.w_q) + matmul_nn(&dk, &lp.w_k) + matmul_nn(&dv, &lp.w_v);
        dh_cur = match cfg.norm_placement {
            NormPlacement::Pre => d_sum1 + &layer_norm_backward(&d_attn_in, &lc.norm1, &lp.ln1, &mut gl.ln1),
            NormPlacement::Post => d_sum1 + &d_attn_in,
        };
        d_attn_out[li] = dy;
    }

    let mut d_emb = dh_cur;
    mul_mask(&mut d_emb, masks.map(|m| &m.emb));
    for (p, (&tok, row)) in fwd.inputs.iter().zip(d_emb.rows()).enumerate() {
        let mut te = g.tok_emb.row_mut(tok as usize);
        te += &row;
        let mut pe = g.pos_emb.row_mut(p);
        pe += &row;
    }

    Gradients {
        params: g,
        d_attn_out,
        d_ffn_out,
        d_logits,
    }
}
