use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{by_sequence, kmeans, probe_instances, score_all, ClusterScores, GroundTruth, KMeansConfig, PositionPolicy, ProbeError, ProbeInstance, ProbeReport};
use crate::nncore::{final_norm, ModelState, Real};
use crate::synthlang::TokenSequence;

/// Which form of the layer output is clustered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Raw,
    /// After the model's final norm, as the head would see it.
    FinalNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub policy: PositionPolicy,
    pub representation: Representation,
    pub ground_truths: Vec<GroundTruth>,
    pub kmeans: KMeansConfig,
    pub rng_seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            policy: PositionPolicy::default(),
            representation: Representation::Raw,
            ground_truths: GroundTruth::ALL.to_vec(),
            kmeans: KMeansConfig::default(),
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerScores {
    pub layer: usize,
    pub ground_truth: GroundTruth,
    pub k: usize,
    pub scores: ClusterScores,
}

/// Per-layer probed representations (`out[l - 1]` is n_instances x d).
fn collect<T: Real>(
    state: &ModelState<T>,
    seqs: &[TokenSequence],
    instances: &[ProbeInstance],
    repr: Representation,
) -> Result<Vec<Array2<f64>>, ProbeError> {
    let (l, d) = (state.config.n_layers, state.config.d_model);
    let mut out = vec![Array2::<f64>::zeros((instances.len(), d)); l];
    for (si, idx) in by_sequence(instances) {
        let f = state.eval(&seqs[si].tokens)?;
        for (layer, z) in f.trace.z[1..].iter().enumerate() {
            let z = match repr {
                Representation::Raw => z.clone(),
                Representation::FinalNorm => final_norm(&state.params, &state.config, z),
            };
            for &i in &idx {
                let row = z.row(instances[i].position);
                out[layer].row_mut(i).assign(&row.mapv(|v| v.as_f64()));
            }
        }
    }
    Ok(out)
}

/// KMeans on every layer's probed representations, scored against each ground truth.
pub fn clustering_scores<T: Real>(
    state: &ModelState<T>,
    seqs: &[TokenSequence],
    cfg: &ClusterConfig,
) -> Result<Vec<LayerScores>, ProbeError> {
    let instances = probe_instances(seqs, cfg.policy);
    if instances.is_empty() {
        return Err(ProbeError::Input("empty probe set".into()));
    }
    let reps = collect(state, seqs, &instances, cfg.representation)?;
    let mut out = Vec::new();
    for &gt in &cfg.ground_truths {
        let (truth, k) = gt.labels(&instances);
        if k < 2 {
            return Err(ProbeError::Input(format!("ground truth {} has a single label among probed instances", gt.name())));
        }
        for (l, x) in reps.iter().enumerate() {
            let part = kmeans(x, k, cfg.rng_seed, &cfg.kmeans)?;
            out.push(LayerScores {
                layer: l + 1,
                ground_truth: gt,
                k,
                scores: score_all(&part.labels, &truth)?,
            });
        }
    }
    Ok(out)
}

/// Clustering scores for every (checkpoint, split) pair.
pub fn clustering_report<T: Real>(
    checkpoints: &[&ModelState<T>],
    splits: &[(&str, &[TokenSequence])],
    cfg: &ClusterConfig,
) -> Result<ProbeReport, ProbeError> {
    let mut rep = ProbeReport::new("cluster");
    rep.set_meta("representation", cfg.representation);
    rep.set_meta("position_policy", cfg.policy);
    rep.set_meta("kmeans_seed", cfg.rng_seed);
    for st in checkpoints {
        rep.set_meta("model_config_hash", st.config.hash());
        for (name, seqs) in splits {
            for s in clustering_scores(*st, seqs, cfg)? {
                let g = s.ground_truth.name();
                rep.push(st.epoch, s.layer, name, g, "f1", s.scores.f1);
                rep.push(st.epoch, s.layer, name, g, "ari", s.scores.ari);
                rep.push(st.epoch, s.layer, name, g, "ami", s.scores.ami);
            }
        }
    }
    rep.sort();
    Ok(rep)
}
