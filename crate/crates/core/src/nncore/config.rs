use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{NnError, Precision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    /// Normalize the sublayer input (GPT-2).
    Pre,
    /// Normalize after the residual sum.
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// tanh approximation, as in GPT-2
    Gelu,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Architecture of the decoder-only transformer. Defaults match the
/// six-layer synthetic-language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub norm_placement: NormPlacement,
    pub final_norm_before_head: bool,
    pub precision: Precision,
    pub activation: Activation,
    /// Multiply attention scores by 1/sqrt(d_head).
    pub attn_scale: bool,
    pub layer_norm_eps: f64,
    /// Start the LM head at exactly zero.
    pub zero_init_head: bool,
    /// Start every attention output projection at exactly zero.
    pub zero_init_out_proj: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            n_heads: 8,
            d_model: 64,
            d_ff: 128,
            vocab: crate::synthlang::VOCAB_SIZE,
            max_seq_len: crate::synthlang::DEFAULT_MAX_SEQ_LEN,
            dropout: 0.2,
            norm_placement: NormPlacement::Pre,
            final_norm_before_head: true,
            precision: Precision::F32,
            activation: Activation::Gelu,
            attn_scale: false,
            layer_norm_eps: 1e-5,
            zero_init_head: false,
            zero_init_out_proj: false,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Config(m.to_string()));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.vocab == 0 {
            return bad("all dimensions must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive");
        }
        Ok(())
    }

    /// Short stable fingerprint of the serialized config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Field-by-field differences, `name: ours != theirs`.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
            return vec![];
        };
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}: {v} != {}", b.get(k).cloned().unwrap_or_default()))
            .collect()
    }

    pub fn n_params(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + 4 * d * d + 2 * d * self.d_ff;
        self.vocab * d + self.max_seq_len * d + self.n_layers * per_layer + d + self.vocab * d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_six_layer_model() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.d_head(), 8);
        // roughly the 204 thousand parameters reported for the synthetic model
        assert!((190_000..230_000).contains(&c.n_params()), "{}", c.n_params());
    }

    #[test]
    fn rejects_bad_configs() {
        let c = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            dropout: 1.0,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn diff_names_fields() {
        let a = ModelConfig::default();
        let b = ModelConfig {
            n_layers: 2,
            ..a.clone()
        };
        let d = a.diff(&b);
        assert_eq!(d.len(), 1);
        assert!(d[0].starts_with("n_layers"));
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (Activation::Gelu.apply(x + h) - Activation::Gelu.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Gelu.derivative(x)).abs() < 1e-8);
        }
    }
}
