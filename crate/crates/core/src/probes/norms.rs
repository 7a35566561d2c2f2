use serde::Serialize;

use super::{by_sequence, probe_instances, PositionPolicy, ProbeError};
use crate::nncore::{ModelState, Real};
use crate::synthlang::TokenSequence;

/// Monotonicity of norm trajectories, as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormStats {
    /// Consecutive pairs with `|z^{l+1}| >= |z^l|`, over all trajectories.
    pub pair_level: f64,
    /// Trajectories whose every pair is non-decreasing.
    pub sequence_level: f64,
    pub n_pairs: usize,
    pub n_trajectories: usize,
}

pub fn norm_stats(trajectories: &[Vec<f64>], exclude_last: bool) -> Result<NormStats, ProbeError> {
    if trajectories.is_empty() {
        return Err(ProbeError::Input("no trajectories".into()));
    }
    let (mut pairs, mut up_pairs, mut up_seqs) = (0usize, 0usize, 0usize);
    for t in trajectories {
        let t = if exclude_last { &t[..t.len().saturating_sub(1)] } else { &t[..] };
        if t.len() < 2 {
            return Err(ProbeError::Input(format!("trajectory of length {} has no transitions", t.len())));
        }
        if t.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ProbeError::Input("norms must be finite and non-negative".into()));
        }
        let ups = t.windows(2).filter(|w| w[1] >= w[0]).count();
        pairs += t.len() - 1;
        up_pairs += ups;
        up_seqs += (ups == t.len() - 1) as usize;
    }
    Ok(NormStats {
        pair_level: up_pairs as f64 / pairs as f64,
        sequence_level: up_seqs as f64 / trajectories.len() as f64,
        n_pairs: pairs,
        n_trajectories: trajectories.len(),
    })
}

/// `[|z^0|, |z^1|, ..., |z^L|]` for every probed position, `z^0` being the
/// embedding output.
pub fn norm_trajectories<T: Real>(
    state: &ModelState<T>,
    seqs: &[TokenSequence],
    policy: PositionPolicy,
) -> Result<Vec<Vec<f64>>, ProbeError> {
    let instances = probe_instances(seqs, policy);
    let mut out = vec![Vec::new(); instances.len()];
    for (si, idx) in by_sequence(&instances) {
        let f = state.eval(&seqs[si].tokens)?;
        for i in idx {
            let p = instances[i].position;
            out[i] = f
                .trace
                .z
                .iter()
                .map(|z| z.row(p).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
                .collect();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_counts() {
        let s = norm_stats(&[vec![1.0, 1.0, 2.0, 3.0]], false).unwrap();
        assert_eq!((s.pair_level, s.sequence_level), (1.0, 1.0));
        let s = norm_stats(&[vec![1.0, 2.0, 1.5, 3.0]], false).unwrap();
        assert!((s.pair_level - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.sequence_level, 0.0);
        let s = norm_stats(&[vec![1.0, 2.0, 3.0, 0.5]], true).unwrap();
        assert_eq!((s.pair_level, s.n_pairs), (1.0, 2));
    }

    #[test]
    fn rejects_short_and_empty() {
        assert!(norm_stats(&[], false).is_err());
        assert!(norm_stats(&[vec![1.0, 2.0]], true).is_err());
        assert!(norm_stats(&[vec![1.0, f64::NAN]], false).is_err());
    }
}
