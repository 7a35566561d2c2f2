use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context as _, Result};
use dualform::nncore::ModelState;
use dualform::probes::{
    attention_history, clustering_report, inner_loss_curve, linear_layer_check, norm_stats, norm_trajectories, pca3, probe_instances,
    AttentionConfig, ClusterConfig, InnerLossConfig, PositionPolicy, ProbeReport, Representation,
};
use dualform::synthlang::{DatasetSplit, TokenSequence};
use ndarray::Array2;
use serde::Serialize;

use crate::config::RunConfig;
use crate::rundir::RunDir;

/// Knobs shared by every analysis. Serialized into the resolved config.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyzeOptions {
    pub splits: Vec<String>,
    /// Split whose sequences serve as probes for `attn` and `eigen`.
    pub probe_split: String,
    pub exclude_last: bool,
    /// Feed raw layer outputs to the head instead of applying the final norm.
    pub raw_head_probe: bool,
    pub filter_loss: Option<f64>,
    /// 1-based first probed position; every later position is probed too.
    pub min_position: Option<usize>,
    pub position_seed: u64,
    pub kmeans_seed: u64,
    pub representation: Representation,
    pub epoch_every: Option<u32>,
    pub top_k: usize,
    pub contexts: usize,
    pub threads: usize,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            splits: vec!["train".into(), "validation".into()],
            probe_split: "validation".into(),
            exclude_last: true,
            raw_head_probe: false,
            filter_loss: None,
            min_position: None,
            position_seed: 0,
            kmeans_seed: 0,
            representation: Representation::Raw,
            epoch_every: None,
            top_k: 10,
            contexts: 100,
            threads: 1,
        }
    }
}

impl AnalyzeOptions {
    fn policy(&self, default: PositionPolicy) -> PositionPolicy {
        match self.min_position {
            Some(m) => PositionPolicy::AllFrom { min_pos: m - 1 },
            None => default,
        }
    }

    fn random_prefix(&self) -> PositionPolicy {
        self.policy(PositionPolicy::RandomPrefix { seed: self.position_seed })
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_position == Some(0) {
            bail!("--min-position is 1-based");
        }
        if self.splits.is_empty() {
            bail!("no splits selected");
        }
        if self.threads == 0 {
            bail!("--threads must be positive");
        }
        Ok(())
    }
}

/// Inputs handed to an analysis.
pub struct Context<'a> {
    pub run: &'a RunDir,
    pub cfg: &'a RunConfig,
    pub data: &'a DatasetSplit,
    pub epochs: &'a [u32],
    pub opts: &'a AnalyzeOptions,
    pub out: &'a Path,
}

impl Context<'_> {
    fn split(&self, name: &str) -> Result<&[TokenSequence]> {
        self.data.split(name).ok_or_else(|| anyhow!("unknown split {name:?} (train, validation)"))
    }

    fn splits(&self) -> Result<Vec<(&str, &[TokenSequence])>> {
        self.opts.splits.iter().map(|s| Ok((s.as_str(), self.split(s)?))).collect()
    }

    fn state(&self, epoch: u32) -> Result<ModelState<f64>> {
        Ok(self.run.checkpoint(self.cfg, epoch)?.to_f64())
    }

    /// Applies `f` to every selected epoch on the worker pool and merges the reports.
    fn per_epoch(&self, name: &str, f: impl Fn(u32) -> Result<ProbeReport> + Sync) -> Result<ProbeReport> {
        let mut rep = ProbeReport::new(name);
        for r in par_map(self.epochs, self.opts.threads, |&e| f(e).with_context(|| format!("epoch {e}")))? {
            rep.extend(r);
        }
        rep.sort();
        Ok(rep)
    }
}

pub trait Analysis: Sync {
    fn name(&self) -> &'static str;
    fn about(&self) -> &'static str;
    fn run(&self, ctx: &Context) -> Result<ProbeReport>;
}

pub struct AnalysisRegistry {
    entries: Vec<Box<dyn Analysis>>,
}

impl Default for AnalysisRegistry {
    fn default() -> Self {
        let mut r = Self { entries: Vec::new() };
        r.register(Box::new(Cluster));
        r.register(Box::new(InnerLoss));
        r.register(Box::new(Attn));
        r.register(Box::new(Norm));
        r.register(Box::new(Pca));
        r.register(Box::new(Eigen));
        r
    }
}

impl AnalysisRegistry {
    pub fn register(&mut self, a: Box<dyn Analysis>) {
        self.entries.retain(|e| e.name() != a.name());
        self.entries.push(a);
    }

    pub fn get(&self, name: &str) -> Option<&dyn Analysis> {
        self.entries.iter().find(|e| e.name() == name).map(|b| b.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name()).collect()
    }
}

/// Maps `f` over `items` with up to `threads` scoped workers, keeping order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("unpoisoned") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("unpoisoned").expect("every slot filled"))
        .collect()
}

/// Resolves an `--epochs` list (`all`, or comma-separated numbers and `final`)
/// against the checkpoints present.
pub fn resolve_epochs(spec: &str, available: &[u32]) -> Result<Vec<u32>> {
    let Some(&last) = available.last() else {
        bail!("run has no checkpoints");
    };
    if spec == "all" {
        return Ok(available.to_vec());
    }
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim) {
        let e = match part {
            "final" | "last" => last,
            p => p.parse().map_err(|_| anyhow!("bad epoch {p:?} in --epochs"))?,
        };
        if !available.contains(&e) {
            bail!("no checkpoint for epoch {e} (available: {available:?})");
        }
        out.push(e);
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// Writes the report plus a resolved config naming everything it depends on.
pub fn save_outputs(ctx: &Context, name: &str, rep: &ProbeReport) -> Result<()> {
    #[derive(Serialize)]
    struct Resolved<'a> {
        analysis: &'a str,
        run: &'a Path,
        epochs: &'a [u32],
        options: &'a AnalyzeOptions,
        run_config: &'a RunConfig,
    }
    rep.save(ctx.out, name)?;
    let resolved = Resolved {
        analysis: name,
        run: &ctx.run.root,
        epochs: ctx.epochs,
        options: ctx.opts,
        run_config: ctx.cfg,
    };
    let path = ctx.out.join(format!("{name}.config.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&resolved)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

struct Cluster;

impl Analysis for Cluster {
    fn name(&self) -> &'static str {
        "cluster"
    }

    fn about(&self) -> &'static str {
        "KMeans F1/ARI/AMI of each layer's outputs against seed, next-token and combination labels"
    }

    fn run(&self, ctx: &Context) -> Result<ProbeReport> {
        let cc = ClusterConfig {
            policy: ctx.opts.random_prefix(),
            representation: ctx.opts.representation,
            rng_seed: ctx.opts.kmeans_seed,
            ..ClusterConfig::default()
        };
        let splits = ctx.splits()?;
        ctx.per_epoch(self.name(), |e| {
            let st = ctx.state(e)?;
            Ok(clustering_report(&[&st], &splits, &cc)?)
        })
    }
}

struct InnerLoss;

impl Analysis for InnerLoss {
    fn name(&self) -> &'static str {
        "inner-loss"
    }

    fn about(&self) -> &'static str {
        "cross-entropy of each layer's output fed straight to the LM head"
    }

    fn run(&self, ctx: &Context) -> Result<ProbeReport> {
        let ic = InnerLossConfig {
            policy: ctx.opts.policy(PositionPolicy::LastToken),
            use_final_norm: !ctx.opts.raw_head_probe,
            filter_loss: ctx.opts.filter_loss,
        };
        let splits = ctx.splits()?;
        ctx.per_epoch(self.name(), |e| {
            let st = ctx.state(e)?;
            let mut rep = ProbeReport::new(self.name());
            rep.set_meta("position_policy", ic.policy);
            rep.set_meta("final_norm", ic.use_final_norm);
            for (name, seqs) in &splits {
                let c = inner_loss_curve(&st, seqs, &ic)?;
                for (l, v) in c.mean.iter().enumerate() {
                    rep.push(e, l + 1, name, "-", "inner_loss", *v);
                }
                rep.push(e, 0, name, "-", "kept", c.instances.len() as f64);
                rep.push(e, 0, name, "-", "filtered", c.filtered as f64);
            }
            Ok(rep)
        })
    }
}

struct Attn;

impl Analysis for Attn {
    fn name(&self) -> &'static str {
        "attn"
    }

    fn about(&self) -> &'static str {
        "same-label share of the top/bottom history records ranked by weighting factor"
    }

    fn run(&self, ctx: &Context) -> Result<ProbeReport> {
        let ac = AttentionConfig {
            policy: ctx.opts.policy(PositionPolicy::LastToken),
            top_k: ctx.opts.top_k,
            epoch_every: ctx.opts.epoch_every,
            ..AttentionConfig::default()
        };
        let probes = ctx.split(&ctx.opts.probe_split)?;
        ctx.per_epoch(self.name(), |e| {
            if e == 0 {
                log::info!("skipping epoch 0: no history precedes it");
                return Ok(ProbeReport::new(self.name()));
            }
            let st = ctx.state(e)?;
            let mut reader = ctx.run.history(ctx.cfg)?;
            let sum = attention_history(&st, &mut reader, probes, e, &ac)?;
            let mut rep = sum.to_report(e, &ctx.opts.probe_split);
            rep.set_meta("position_policy", ac.policy);
            rep.set_meta("top_k", ac.top_k);
            rep.set_meta("epoch_every", ac.epoch_every);
            rep.push(e, 0, &ctx.opts.probe_split, "-", "baseline_top_pct", 100.0 / ac.top_k as f64);
            Ok(rep)
        })
    }
}

fn norm_policy(opts: &AnalyzeOptions) -> PositionPolicy {
    opts.policy(PositionPolicy::AllFrom { min_pos: 0 })
}

struct Norm;

impl Analysis for Norm {
    fn name(&self) -> &'static str {
        "norm"
    }

    fn about(&self) -> &'static str {
        "pair- and sequence-level share of non-decreasing norm trajectories across layers"
    }

    fn run(&self, ctx: &Context) -> Result<ProbeReport> {
        let policy = norm_policy(ctx.opts);
        let splits = ctx.splits()?;
        ctx.per_epoch(self.name(), |e| {
            let st = ctx.state(e)?;
            let mut rep = ProbeReport::new(self.name());
            rep.set_meta("position_policy", policy);
            rep.set_meta("exclude_last", ctx.opts.exclude_last);
            for (name, seqs) in &splits {
                let trajs = norm_trajectories(&st, seqs, policy)?;
                let s = norm_stats(&trajs, ctx.opts.exclude_last)?;
                let transitions = s.n_pairs / s.n_trajectories;
                rep.push(e, 0, name, "-", "pair_pct", 100.0 * s.pair_level);
                rep.push(e, 0, name, "-", "sequence_pct", 100.0 * s.sequence_level);
                rep.push(e, 0, name, "-", "random_sequence_pct", 100.0 * 0.5f64.powi(transitions as i32));
                rep.push(e, 0, name, "-", "trajectories", s.n_trajectories as f64);
            }
            Ok(rep)
        })
    }
}

struct Pca;

impl Analysis for Pca {
    fn name(&self) -> &'static str {
        "pca"
    }

    fn about(&self) -> &'static str {
        "3-D PCA of probed token representations across all layers"
    }

    fn run(&self, ctx: &Context) -> Result<ProbeReport> {
        let policy = ctx.opts.random_prefix();
        let splits = ctx.splits()?;
        let coords = Mutex::new(Vec::new());
        let rep = ctx.per_epoch(self.name(), |e| {
            let st = ctx.state(e)?;
            let mut rep = ProbeReport::new(self.name());
            rep.set_meta("position_policy", policy);
            for (name, seqs) in &splits {
                let inst = probe_instances(seqs, policy);
                let d = st.config.d_model;
                let layers = st.config.n_layers + 1;
                let mut pts = Array2::<f64>::zeros((inst.len() * layers, d));
                for (i, pi) in inst.iter().enumerate() {
                    let f = st.eval(&seqs[pi.sequence].tokens)?;
                    for (l, z) in f.trace.z.iter().enumerate() {
                        pts.row_mut(i * layers + l).assign(&z.row(pi.position));
                    }
                }
                let p = pca3(&pts)?;
                for k in 0..3 {
                    rep.push(e, 0, name, "-", &format!("explained_pc{}", k + 1), p.explained[k]);
                }
                let mut block = Vec::with_capacity(pts.nrows());
                for (r, c) in p.coords.rows().into_iter().enumerate() {
                    let (i, l) = (r / layers, r % layers);
                    block.push((e, name.to_string(), i, l, inst[i].seed_label, [c[0], c[1], c[2]]));
                }
                coords.lock().expect("unpoisoned").push(block);
            }
            Ok(rep)
        })?;
        let mut blocks = coords.into_inner().expect("unpoisoned");
        blocks.sort_by(|a, b| (a[0].0, &a[0].1).cmp(&(b[0].0, &b[0].1)));
        std::fs::create_dir_all(ctx.out)?;
        let path = ctx.out.join("pca_coords.csv");
        let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(w, "epoch,split,instance,layer,seed,pc1,pc2,pc3")?;
        for (e, split, i, l, seed, c) in blocks.into_iter().flatten() {
            writeln!(w, "{e},{split},{i},{l},{seed},{},{},{}", c[0], c[1], c[2])?;
        }
        w.flush()?;
        Ok(rep)
    }
}

struct Eigen;

impl Analysis for Eigen {
    fn name(&self) -> &'static str {
        "eigen"
    }

    fn about(&self) -> &'static str {
        "eigen-route vs direct-route norm checks of each linearized layer"
    }

    fn run(&self, ctx: &Context) -> Result<ProbeReport> {
        let seqs = ctx.split(&ctx.opts.probe_split)?;
        let n = ctx.opts.contexts.min(seqs.len());
        if n == 0 {
            bail!("no contexts to check");
        }
        ctx.per_epoch(self.name(), |e| {
            let st = ctx.state(e)?;
            let contexts = seqs[..n]
                .iter()
                .map(|s| Ok(st.eval(&s.tokens)?.trace.z[..st.config.n_layers].to_vec()))
                .collect::<Result<Vec<Vec<Array2<f64>>>>>()?;
            let mut rep = ProbeReport::new(self.name());
            rep.set_meta("contexts", n);
            for c in linear_layer_check(&st.params, &st.config, &contexts)? {
                let split = &ctx.opts.probe_split;
                rep.push(e, c.layer, split, "-", "consistent_pct", 100.0 * c.consistent as f64 / c.contexts as f64);
                rep.push(e, c.layer, split, "-", "norm_nondec_pct", 100.0 * c.norm_nondec as f64 / c.contexts as f64);
            }
            Ok(rep)
        })
    }
}

/// Default output directory of `analyze`.
pub fn default_out(run: &Path) -> PathBuf {
    run.join("analysis")
}
