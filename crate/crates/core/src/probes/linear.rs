use ndarray::{s, Array1, Array2};
use serde::Serialize;

use super::{sym_eig, ProbeError};
use crate::nncore::{ModelConfig, Params};

/// A transformer layer with linear attention and no normalization:
/// `W_linear = (I + W_FFN)(I + W_MHSA)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub w_mhsa: Array2<f64>,
    pub w_ffn: Array2<f64>,
    pub w_linear: Array2<f64>,
}

/// Builds the linearized form of `layer` (1-based) around a context whose
/// layer inputs are the rows of `context`.
///
/// `W_MHSA = sum_h W_O^h W_V^h (sum_i z_i z_i^T) W_K^h^T W_Q^h`, where the
/// per-head blocks are rows of the Q/K/V projections and columns of W_O.
/// The FFN is taken as `W_2 W_1` regardless of the activation.
pub fn build_linear_layer(
    params: &Params<f64>,
    cfg: &ModelConfig,
    layer: usize,
    context: &Array2<f64>,
) -> Result<LinearLayer, ProbeError> {
    let d = cfg.d_model;
    if !(1..=cfg.n_layers).contains(&layer) {
        return Err(ProbeError::Input(format!("layer {layer} outside 1..={}", cfg.n_layers)));
    }
    if context.nrows() == 0 || context.ncols() != d {
        return Err(ProbeError::Input(format!("context must be a non-empty n x {d} matrix")));
    }
    let lp = &params.layers[layer - 1];
    let c = context.t().dot(context);
    let dh = cfg.d_head();
    let mut w_mhsa = Array2::<f64>::zeros((d, d));
    for h in 0..cfg.n_heads {
        let rows = s![h * dh..(h + 1) * dh, ..];
        let wq = lp.w_q.slice(rows);
        let wk = lp.w_k.slice(rows);
        let wv = lp.w_v.slice(rows);
        let wo = lp.w_o.slice(s![.., h * dh..(h + 1) * dh]);
        w_mhsa += &wo.dot(&wv).dot(&c).dot(&wk.t()).dot(&wq);
    }
    let w_ffn = lp.w2.dot(&lp.w1);
    let eye = Array2::<f64>::eye(d);
    let w_linear = (&eye + &w_ffn).dot(&(&eye + &w_mhsa));
    if w_linear.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::Input("linearized layer has non-finite entries".into()));
    }
    Ok(LinearLayer { w_mhsa, w_ffn, w_linear })
}

/// Both routes to deciding `||W x|| >= ||x||`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prop1 {
    /// `sum_i lambda_i a_i b_i >= sum_i a_i b_i` over the Gram eigenbasis.
    pub condition_holds: bool,
    /// `||W x|| >= ||x||` computed directly.
    pub norm_nondec: bool,
    /// The verdicts agree, or disagree only inside the relative tie band.
    pub consistent: bool,
    pub eigen_lhs: f64,
    pub eigen_rhs: f64,
    pub wx_sq: f64,
    pub x_sq: f64,
}

const TIE: f64 = 1e-9;

pub fn prop1_check(w: &Array2<f64>, x: &Array1<f64>) -> Result<Prop1, ProbeError> {
    if w.ncols() != x.len() {
        return Err(ProbeError::Input(format!("W has {} columns but x has {} entries", w.ncols(), x.len())));
    }
    let gram = w.t().dot(w);
    let gram = (&gram + &gram.t()) * 0.5;
    let eig = sym_eig(&gram)?;
    let a = eig.vectors.t().dot(x);
    // U is orthonormal, so U^-1 x = U^T x
    let b = a.clone();
    let eigen_lhs: f64 = eig.values.iter().zip(a.iter().zip(&b)).map(|(l, (ai, bi))| l * ai * bi).sum();
    let eigen_rhs: f64 = a.iter().zip(&b).map(|(ai, bi)| ai * bi).sum();
    let wx = w.dot(x);
    let wx_sq = wx.dot(&wx);
    let x_sq = x.dot(x);
    let condition_holds = eigen_lhs >= eigen_rhs;
    let norm_nondec = wx_sq.sqrt() >= x_sq.sqrt();
    let near = |l: f64, r: f64| (l - r).abs() <= TIE * l.abs().max(r.abs());
    let consistent = condition_holds == norm_nondec || near(eigen_lhs, eigen_rhs) || near(wx_sq, x_sq);
    Ok(Prop1 {
        condition_holds,
        norm_nondec,
        consistent,
        eigen_lhs,
        eigen_rhs,
        wx_sq,
        x_sq,
    })
}

/// Per-layer outcome of checking linearized layers on many contexts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearCheck {
    pub layer: usize,
    pub contexts: usize,
    pub consistent: usize,
    pub norm_nondec: usize,
}

/// Runs [`prop1_check`] with `W_linear` built from each context's layer
/// inputs, probing the context's final vector. `contexts[i]` holds the
/// inputs of every layer (index `l - 1` for layer `l`).
pub fn linear_layer_check(
    params: &Params<f64>,
    cfg: &ModelConfig,
    contexts: &[Vec<Array2<f64>>],
) -> Result<Vec<LinearCheck>, ProbeError> {
    let mut out: Vec<LinearCheck> = (1..=cfg.n_layers)
        .map(|layer| LinearCheck {
            layer,
            contexts: 0,
            consistent: 0,
            norm_nondec: 0,
        })
        .collect();
    for ctx in contexts {
        for (l, stat) in out.iter_mut().enumerate() {
            let z = &ctx[l];
            let lin = build_linear_layer(params, cfg, l + 1, z)?;
            let x = z.row(z.nrows() - 1).to_owned();
            let p = prop1_check(&lin.w_linear, &x)?;
            stat.contexts += 1;
            stat.consistent += p.consistent as usize;
            stat.norm_nondec += p.norm_nondec as usize;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn scaled_identity() {
        let x = array![0.3, -1.0, 2.0];
        let p = prop1_check(&(Array2::eye(3) * 2.0), &x).unwrap();
        assert!(p.condition_holds && p.norm_nondec && p.consistent);
        assert!((p.wx_sq.sqrt() - 2.0 * p.x_sq.sqrt()).abs() < 1e-12);
        let p = prop1_check(&(Array2::eye(3) * 0.5), &x).unwrap();
        assert!(!p.condition_holds && !p.norm_nondec && p.consistent);
    }

    #[test]
    fn shape_mismatch() {
        assert!(prop1_check(&Array2::eye(3), &array![1.0, 2.0]).is_err());
    }
}
