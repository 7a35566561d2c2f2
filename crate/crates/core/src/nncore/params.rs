use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, NnError, Real};

/// Weights of one transformer layer.
///
/// Per-head projections are stored stacked: rows `h*d_head..(h+1)*d_head` of
/// `w_q`/`w_k`/`w_v` are head `h`'s `d_head x d_model` matrix, and the same
/// column block of `w_o` is its `d_model x d_head` output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1: Array1<T>,
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
    pub w_o: Array2<T>,
    pub ln2: Array1<T>,
    /// d_ff x d_model
    pub w1: Array2<T>,
    /// d_model x d_ff
    pub w2: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub tok_emb: Array2<T>,
    pub pos_emb: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Array1<T>,
    /// vocab x d_model
    pub head: Array2<T>,
}

impl<T: Real> Params<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layer = LayerParams {
            ln1: Array1::zeros(d),
            w_q: Array2::zeros((d, d)),
            w_k: Array2::zeros((d, d)),
            w_v: Array2::zeros((d, d)),
            w_o: Array2::zeros((d, d)),
            ln2: Array1::zeros(d),
            w1: Array2::zeros((cfg.d_ff, d)),
            w2: Array2::zeros((d, cfg.d_ff)),
        };
        Self {
            tok_emb: Array2::zeros((cfg.vocab, d)),
            pos_emb: Array2::zeros((cfg.max_seq_len, d)),
            layers: vec![layer; cfg.n_layers],
            final_norm: Array1::zeros(d),
            head: Array2::zeros((cfg.vocab, d)),
        }
    }

    /// Tensors in the fixed order used by checkpoints and optimizers.
    pub fn named(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let n = i + 1;
            out.push((format!("layer{n}.ln1"), l.ln1.view().into_dyn()));
            out.push((format!("layer{n}.w_q"), l.w_q.view().into_dyn()));
            out.push((format!("layer{n}.w_k"), l.w_k.view().into_dyn()));
            out.push((format!("layer{n}.w_v"), l.w_v.view().into_dyn()));
            out.push((format!("layer{n}.w_o"), l.w_o.view().into_dyn()));
            out.push((format!("layer{n}.ln2"), l.ln2.view().into_dyn()));
            out.push((format!("layer{n}.w1"), l.w1.view().into_dyn()));
            out.push((format!("layer{n}.w2"), l.w2.view().into_dyn()));
        }
        out.push(("final_norm".to_string(), self.final_norm.view().into_dyn()));
        out.push(("head".to_string(), self.head.view().into_dyn()));
        out
    }

    /// Mutable tensors, same order as [`Params::named`].
    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut out = vec![self.tok_emb.view_mut().into_dyn(), self.pos_emb.view_mut().into_dyn()];
        for l in &mut self.layers {
            out.push(l.ln1.view_mut().into_dyn());
            out.push(l.w_q.view_mut().into_dyn());
            out.push(l.w_k.view_mut().into_dyn());
            out.push(l.w_v.view_mut().into_dyn());
            out.push(l.w_o.view_mut().into_dyn());
            out.push(l.ln2.view_mut().into_dyn());
            out.push(l.w1.view_mut().into_dyn());
            out.push(l.w2.view_mut().into_dyn());
        }
        out.push(self.final_norm.view_mut().into_dyn());
        out.push(self.head.view_mut().into_dyn());
        out
    }

    pub fn tensors(&self) -> Vec<ArrayViewD<'_, T>> {
        self.named().into_iter().map(|(_, v)| v).collect()
    }

    /// Sum of squares of every entry, accumulated in f64.
    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| flat(t).iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| flat(t).iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        let c1 = |a: &Array1<T>| a.mapv(|x| U::from_f64(x.as_f64()));
        let c2 = |a: &Array2<T>| a.mapv(|x| U::from_f64(x.as_f64()));
        Params {
            tok_emb: c2(&self.tok_emb),
            pos_emb: c2(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1: c1(&l.ln1),
                    w_q: c2(&l.w_q),
                    w_k: c2(&l.w_k),
                    w_v: c2(&l.w_v),
                    w_o: c2(&l.w_o),
                    ln2: c1(&l.ln2),
                    w1: c2(&l.w1),
                    w2: c2(&l.w2),
                })
                .collect(),
            final_norm: c1(&self.final_norm),
            head: c2(&self.head),
        }
    }

    /// Shapes match those implied by `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<(), NnError> {
        let want = Params::<T>::zeros(cfg);
        let ours = self.named();
        let theirs = want.named();
        if ours.len() != theirs.len() {
            return Err(NnError::Shape(format!("{} tensors, expected {}", ours.len(), theirs.len())));
        }
        for ((name, a), (_, b)) in ours.iter().zip(&theirs) {
            if a.shape() != b.shape() {
                return Err(NnError::Shape(format!("{name}: {:?} != {:?}", a.shape(), b.shape())));
            }
        }
        Ok(())
    }
}

/// Contiguous storage of a parameter tensor (all parameters are owned, standard-layout arrays).
pub(crate) fn flat<'a, T>(t: &'a ArrayViewD<'_, T>) -> &'a [T] {
    t.as_slice_memory_order().expect("contiguous parameter")
}

pub(crate) fn flat_mut<'a, T>(t: &'a mut ArrayViewMutD<'_, T>) -> &'a mut [T] {
    t.as_slice_memory_order_mut().expect("contiguous parameter")
}

/// Zero-mean Gaussian initialization with variance `1/fan_in` per matrix.
///
/// Embedding tables use `1/d_model` so a looked-up row has unit expected
/// norm. Norm gains start at one. No biases exist anywhere.
pub fn init_params<T: Real>(cfg: &ModelConfig, rng_seed: u64) -> Result<Params<T>, NnError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut p = Params::<T>::zeros(cfg);
    let mut fill = |a: &mut Array2<T>, fan_in: usize| {
        let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
        a.mapv_inplace(|_| T::from_f64(normal.sample(&mut rng)));
    };
    let d = cfg.d_model;
    fill(&mut p.tok_emb, d);
    fill(&mut p.pos_emb, d);
    for l in &mut p.layers {
        l.ln1.fill(T::one());
        l.ln2.fill(T::one());
        fill(&mut l.w_q, d);
        fill(&mut l.w_k, d);
        fill(&mut l.w_v, d);
        // W_O acts on one head's d_head-dim value, but the heads are summed
        // so the effective fan-in is the full d_model
        fill(&mut l.w_o, d);
        fill(&mut l.w1, d);
        fill(&mut l.w2, cfg.d_ff);
        if cfg.zero_init_out_proj {
            l.w_o.fill(T::zero());
        }
    }
    p.final_norm.fill(T::one());
    fill(&mut p.head, d);
    if cfg.zero_init_head {
        p.head.fill(T::zero());
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_head_flag() {
        let cfg = ModelConfig {
            zero_init_head: true,
            ..ModelConfig::default()
        };
        let p = init_params::<f32>(&cfg, 1).unwrap();
        assert!(p.head.iter().all(|&x| x == 0.0));
        assert!(p.layers[0].w_q.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn query_variance_is_inverse_fan_in() {
        let cfg = ModelConfig::default();
        let p = init_params::<f64>(&cfg, 4).unwrap();
        let mut n = 0usize;
        let mut ss = 0.0;
        for l in &p.layers {
            for &x in l.w_q.iter() {
                ss += x * x;
                n += 1;
            }
        }
        let var = ss / n as f64;
        assert!((var - 1.0 / 64.0).abs() <= 0.2 / 64.0, "{var}");
    }

    #[test]
    fn deterministic() {
        let cfg = ModelConfig::default();
        assert_eq!(init_params::<f32>(&cfg, 9).unwrap(), init_params::<f32>(&cfg, 9).unwrap());
        assert_ne!(init_params::<f32>(&cfg, 9).unwrap(), init_params::<f32>(&cfg, 10).unwrap());
    }
}
