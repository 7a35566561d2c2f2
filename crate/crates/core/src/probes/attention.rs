use serde::{Deserialize, Serialize};

use super::{by_sequence, probe_instances, GroundTruth, PositionPolicy, ProbeError, ProbeInstance, ProbeReport};
use crate::histlog::{HistoryReader, HistoryRecord, RecordFilter};
use crate::nncore::{ModelConfig, ModelState, Real};
use crate::synthlang::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Mhsa,
    Ffn,
}

impl ModuleKind {
    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Mhsa => "mhsa",
            ModuleKind::Ffn => "ffn",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub policy: PositionPolicy,
    pub ground_truths: Vec<GroundTruth>,
    pub top_k: usize,
    /// Only read history epochs divisible by this.
    pub epoch_every: Option<u32>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            policy: PositionPolicy::default(),
            ground_truths: vec![GroundTruth::Seed, GroundTruth::Combination],
            top_k: 10,
            epoch_every: None,
        }
    }
}

/// Same-label fractions among the top-k and bottom-k history records,
/// averaged over heads (equally weighted) and then over probe instances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SameLabelStat {
    pub layer: usize,
    pub module: ModuleKind,
    pub ground_truth: GroundTruth,
    pub top: f64,
    pub bottom: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionSummary {
    pub history_records: u64,
    pub instances: usize,
    pub stats: Vec<SameLabelStat>,
}

impl AttentionSummary {
    pub fn get(&self, layer: usize, module: ModuleKind, gt: GroundTruth) -> Option<&SameLabelStat> {
        self.stats
            .iter()
            .find(|s| s.layer == layer && s.module == module && s.ground_truth == gt)
    }

    /// Report rows with metrics `<module>_top_pct` and `<module>_bottom_pct`.
    pub fn to_report(&self, epoch: u32, split: &str) -> ProbeReport {
        let mut rep = ProbeReport::new("attn");
        rep.set_meta("history_records", self.history_records);
        rep.set_meta("instances", self.instances);
        for s in &self.stats {
            let m = s.module.name();
            rep.push(epoch, s.layer, split, s.ground_truth.name(), &format!("{m}_top_pct"), 100.0 * s.top);
            rep.push(epoch, s.layer, split, s.ground_truth.name(), &format!("{m}_bottom_pct"), 100.0 * s.bottom);
        }
        rep.sort();
        rep
    }
}

#[derive(Clone, Copy)]
struct Hit {
    score: f64,
    seed: u16,
    next: u16,
}

/// The `k` largest scores seen; earlier entries win ties.
#[derive(Clone)]
struct TopK {
    items: Vec<Hit>,
    worst: usize,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            items: Vec::with_capacity(k),
            worst: 0,
        }
    }

    #[inline]
    fn offer(&mut self, k: usize, hit: Hit) {
        if self.items.len() < k {
            self.items.push(hit);
            if self.items.len() == k {
                self.refresh();
            }
        } else if hit.score > self.items[self.worst].score {
            self.items[self.worst] = hit;
            self.refresh();
        }
    }

    fn refresh(&mut self) {
        self.worst = (0..self.items.len())
            .min_by(|&a, &b| self.items[a].score.total_cmp(&self.items[b].score))
            .unwrap_or(0);
    }

    fn same_fraction(&self, probe: &ProbeInstance, gt: GroundTruth) -> f64 {
        let key = gt.key(probe.seed_label, probe.next_token);
        let same = self.items.iter().filter(|h| gt.key(h.seed, h.next) == key).count();
        same as f64 / self.items.len() as f64
    }
}

/// Ranks history records (epochs `< history_before`) by their weighting
/// factor against each probe instance, per layer, for every attention head
/// and for the FFN.
pub fn attention_history<T: Real>(
    state: &ModelState<T>,
    reader: &mut HistoryReader,
    probes: &[TokenSequence],
    history_before: u32,
    cfg: &AttentionConfig,
) -> Result<AttentionSummary, ProbeError> {
    let h = reader.header().clone();
    // analyses may run a widened copy of the model that logged the history
    reader.check_config(&ModelConfig {
        precision: h.config.precision,
        ..state.config.clone()
    })?;
    let (nl, nh, dh, dff) = (h.n_layers, h.n_heads, h.d_head, h.d_ff);
    let k = cfg.top_k;
    if k == 0 {
        return Err(ProbeError::Input("top_k must be positive".into()));
    }
    let instances = probe_instances(probes, cfg.policy);
    if instances.is_empty() {
        return Err(ProbeError::Input("empty probe set".into()));
    }
    let np = instances.len();
    // probe queries, laid out [layer][probe] with heads contiguous
    let mut u_q = vec![vec![0.0; np * h.d_model]; nl];
    let mut a_q = vec![vec![0.0; np * dff]; nl];
    for (si, idx) in by_sequence(&instances) {
        let f = state.eval(&probes[si].tokens)?;
        for l in 0..nl {
            for &i in &idx {
                let p = instances[i].position;
                for (dst, v) in u_q[l][i * h.d_model..(i + 1) * h.d_model].iter_mut().zip(f.trace.u[l].row(p)) {
                    *dst = v.as_f64();
                }
                for (dst, v) in a_q[l][i * dff..(i + 1) * dff].iter_mut().zip(f.trace.ffn_hidden[l].row(p)) {
                    *dst = v.as_f64();
                }
            }
        }
    }
    let slots_per = nl * (nh + 1);
    let mut top = vec![TopK::new(k); np * slots_per];
    let mut bottom = top.clone();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    if history_before == 0 {
        return Err(ProbeError::Input("no history precedes epoch 0".into()));
    }
    let filter = RecordFilter {
        epochs: Some((0, history_before - 1)),
        epoch_every: cfg.epoch_every,
        ..RecordFilter::all()
    };
    let n = reader.scan(&filter, |r: &HistoryRecord| {
        for l in 0..nl {
            let layer = l + 1;
            let u = r.u_layer(&h, layer);
            let a = r.a_layer(&h, layer);
            for p in 0..np {
                let base = p * slots_per + l * (nh + 1);
                let uq = &u_q[l][p * h.d_model..(p + 1) * h.d_model];
                for head in 0..nh {
                    let w = dot(&u[head * dh..(head + 1) * dh], &uq[head * dh..(head + 1) * dh]);
                    top[base + head].offer(k, Hit { score: w, seed: r.seed_label, next: r.next_token });
                    bottom[base + head].offer(k, Hit { score: -w, seed: r.seed_label, next: r.next_token });
                }
                let w = dot(a, &a_q[l][p * dff..(p + 1) * dff]);
                top[base + nh].offer(k, Hit { score: w, seed: r.seed_label, next: r.next_token });
                bottom[base + nh].offer(k, Hit { score: -w, seed: r.seed_label, next: r.next_token });
            }
        }
    })?;
    if n < k as u64 {
        return Err(ProbeError::Input(format!("history has {n} records before epoch {history_before}, need at least {k}")));
    }
    let mut stats = Vec::new();
    for l in 0..nl {
        for module in [ModuleKind::Mhsa, ModuleKind::Ffn] {
            let heads: Vec<usize> = match module {
                ModuleKind::Mhsa => (0..nh).collect(),
                ModuleKind::Ffn => vec![nh],
            };
            for &gt in &cfg.ground_truths {
                let (mut t, mut b) = (0.0, 0.0);
                for (p, inst) in instances.iter().enumerate() {
                    let base = p * slots_per + l * (nh + 1);
                    t += heads.iter().map(|&s| top[base + s].same_fraction(inst, gt)).sum::<f64>() / heads.len() as f64;
                    b += heads.iter().map(|&s| bottom[base + s].same_fraction(inst, gt)).sum::<f64>() / heads.len() as f64;
                }
                stats.push(SameLabelStat {
                    layer: l + 1,
                    module,
                    ground_truth: gt,
                    top: t / np as f64,
                    bottom: b / np as f64,
                });
            }
        }
    }
    Ok(AttentionSummary {
        history_records: n,
        instances: np,
        stats,
    })
}
