//! Analyses over trained models and their training histories.
//!
//! Every probe works on a set of [`ProbeInstance`]s: one supervised position
//! of one sequence, carrying its seed label and next token. Results are
//! collected as flat [`ProbeReport`] rows and written as CSV plus a JSON
//! summary.

mod attention;
mod clustering;
mod inner_loss;
mod kmeans;
mod linalg;
mod linear;
mod metrics;
mod norms;
mod xtrc;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::histlog::HistError;
use crate::nncore::NnError;
use crate::synthlang::TokenSequence;

pub use attention::{attention_history, AttentionConfig, AttentionSummary, ModuleKind, SameLabelStat};
pub use clustering::{clustering_report, clustering_scores, ClusterConfig, LayerScores, Representation};
pub use inner_loss::{inner_loss_curve, inner_loss_from_vectors, InnerLossConfig, InnerLossCurve};
pub use kmeans::{kmeans, KMeansConfig, Partition};
pub use linalg::{pca3, sym_eig, Pca3, SymEig};
pub use linear::{build_linear_layer, linear_layer_check, prop1_check, LinearCheck, LinearLayer, Prop1};
pub use metrics::{ami, ari, densify, expected_mutual_info, pairwise_f1, score_all, ClusterScores};
pub use norms::{norm_stats, norm_trajectories, NormStats};
pub use xtrc::{read_mhead, read_xtrc, write_mhead, write_xtrc, XtrcTrace};

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("invalid probe input: {0}")]
    Input(String),
    #[error("malformed trace file: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    History(#[from] HistError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which label a probed instance is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    Seed,
    NextToken,
    Combination,
}

impl GroundTruth {
    pub const ALL: [GroundTruth; 3] = [GroundTruth::Seed, GroundTruth::NextToken, GroundTruth::Combination];

    pub fn name(self) -> &'static str {
        match self {
            GroundTruth::Seed => "seed",
            GroundTruth::NextToken => "next_token",
            GroundTruth::Combination => "combination",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }

    /// Raw key of one (seed, next token) pair under this ground truth.
    pub fn key(self, seed: u16, next_token: u16) -> u32 {
        match self {
            GroundTruth::Seed => seed as u32,
            GroundTruth::NextToken => next_token as u32,
            GroundTruth::Combination => ((seed as u32) << 16) | next_token as u32,
        }
    }

    /// Dense labels `0..k` for a set of instances.
    pub fn labels(self, instances: &[ProbeInstance]) -> (Vec<usize>, usize) {
        let keys: Vec<u32> = instances.iter().map(|i| self.key(i.seed_label, i.next_token)).collect();
        densify(&keys)
    }
}

/// Which positions of each sequence are probed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionPolicy {
    /// The final supervised position (reads the last letter, predicts EOS).
    LastToken,
    /// One position per sequence, uniform over those that read a letter and
    /// predict a letter; falls back to position 0 for one-letter sequences.
    RandomPrefix { seed: u64 },
    /// Every position from `min_pos` (0-based) on.
    AllFrom { min_pos: usize },
}

impl Default for PositionPolicy {
    fn default() -> Self {
        PositionPolicy::RandomPrefix { seed: 0 }
    }
}

/// One probed position: `tokens[position]` is read, `tokens[position + 1]` predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ProbeInstance {
    pub sequence: usize,
    pub position: usize,
    pub seed_label: u16,
    pub next_token: u16,
}

pub fn probe_instances(seqs: &[TokenSequence], policy: PositionPolicy) -> Vec<ProbeInstance> {
    let mut rng = match policy {
        PositionPolicy::RandomPrefix { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let mut out = Vec::new();
    for (si, s) in seqs.iter().enumerate() {
        let n = s.n_targets();
        if n == 0 {
            continue;
        }
        let positions: Vec<usize> = match policy {
            PositionPolicy::LastToken => vec![n - 1],
            PositionPolicy::RandomPrefix { .. } => {
                let rng = rng.as_mut().expect("seeded above");
                vec![if n >= 3 { rng.gen_range(1..n - 1) } else { 0 }]
            }
            PositionPolicy::AllFrom { min_pos } => (min_pos..n).collect(),
        };
        out.extend(positions.into_iter().map(|p| ProbeInstance {
            sequence: si,
            position: p,
            seed_label: s.seed_id,
            next_token: s.tokens[p + 1],
        }));
    }
    out
}

/// Groups instances by sequence so each sequence is evaluated once.
pub(crate) fn by_sequence(instances: &[ProbeInstance]) -> BTreeMap<usize, Vec<usize>> {
    let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        m.entry(inst.sequence).or_default().push(i);
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub epoch: u32,
    pub layer: usize,
    pub split: String,
    pub ground_truth: String,
    pub metric: String,
    pub value: f64,
}

/// Flat result table plus identifiers of the inputs it was computed from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub analysis: String,
    /// Free-form provenance: config hashes, dataset and checkpoint paths, options.
    pub meta: BTreeMap<String, serde_json::Value>,
    pub rows: Vec<ReportRow>,
}

impl ProbeReport {
    pub fn new(analysis: &str) -> Self {
        Self {
            analysis: analysis.to_string(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, epoch: u32, layer: usize, split: &str, ground_truth: &str, metric: &str, value: f64) {
        self.rows.push(ReportRow {
            epoch,
            layer,
            split: split.to_string(),
            ground_truth: ground_truth.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) {
        self.meta
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
    }

    pub fn extend(&mut self, other: ProbeReport) {
        self.rows.extend(other.rows);
        self.meta.extend(other.meta);
    }

    /// Orders rows by (epoch, layer, split, ground truth, metric).
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            (a.epoch, a.layer, &a.split, &a.ground_truth, &a.metric).cmp(&(b.epoch, b.layer, &b.split, &b.ground_truth, &b.metric))
        });
    }

    /// First row matching every given key.
    pub fn value(&self, epoch: u32, layer: usize, split: &str, ground_truth: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.epoch == epoch && r.layer == layer && r.split == split && r.ground_truth == ground_truth && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), ProbeError> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        if self.rows.is_empty() {
            wr.write_record(["epoch", "layer", "split", "ground_truth", "metric", "value"])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), ProbeError> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Vec<ReportRow>, ProbeError> {
        csv::Reader::from_reader(r).deserialize().map(|r| r.map_err(ProbeError::from)).collect()
    }
}
