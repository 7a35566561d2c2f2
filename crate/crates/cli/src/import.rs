use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use dualform::probes::{inner_loss_from_vectors, norm_stats, read_mhead, read_xtrc, ProbeReport};
use serde::Serialize;

/// Options of `import-trace`. Serialized into the resolved config.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImportOptions {
    pub trace: PathBuf,
    pub head: Option<PathBuf>,
    pub exclude_last: bool,
    pub filter_loss: Option<f64>,
}

/// Norm monotonicity (and, given a head and labels, inner loss) of an
/// externally dumped per-layer trace.
pub fn import_trace(opts: &ImportOptions) -> Result<ProbeReport> {
    let tr = read_xtrc(&opts.trace).with_context(|| format!("reading trace {}", opts.trace.display()))?;
    let (n, points, dim) = tr.data.dim();
    let mut rep = ProbeReport::new("import");
    rep.set_meta("trace", opts.trace.display().to_string());
    rep.set_meta("samples", n);
    rep.set_meta("points", points);
    rep.set_meta("dim", dim);
    rep.set_meta("exclude_last", opts.exclude_last);
    let trajs = tr.norm_trajectories();
    let s = norm_stats(&trajs, opts.exclude_last)?;
    let transitions = s.n_pairs / s.n_trajectories;
    rep.push(0, 0, "trace", "-", "pair_pct", 100.0 * s.pair_level);
    rep.push(0, 0, "trace", "-", "sequence_pct", 100.0 * s.sequence_level);
    rep.push(0, 0, "trace", "-", "random_sequence_pct", 100.0 * 0.5f64.powi(transitions as i32));
    let se = (s.sequence_level * (1.0 - s.sequence_level) / n as f64).sqrt();
    rep.push(0, 0, "trace", "-", "sequence_pct_stderr", 100.0 * se);
    rep.push(0, 0, "trace", "-", "trajectories", n as f64);
    if let Some(hp) = &opts.head {
        let Some(labels) = &tr.labels else {
            bail!("--head needs next-token labels ({}.labels missing)", opts.trace.display());
        };
        let head = read_mhead(hp).with_context(|| format!("reading head {}", hp.display()))?.mapv(f64::from);
        let samples: Vec<_> = (0..n).map(|i| tr.sample(i)).collect();
        let c = inner_loss_from_vectors(&samples, labels, &head, None, opts.filter_loss)?;
        for (p, v) in c.mean.iter().enumerate() {
            rep.push(0, p + 1, "trace", "-", "inner_loss", *v);
        }
        rep.push(0, 0, "trace", "-", "kept", c.instances.len() as f64);
        rep.push(0, 0, "trace", "-", "filtered", c.filtered as f64);
    }
    rep.sort();
    Ok(rep)
}

pub fn save_import(out: &Path, opts: &ImportOptions, rep: &ProbeReport) -> Result<()> {
    rep.save(out, "import")?;
    let path = out.join("import.config.json");
    std::fs::write(&path, serde_json::to_string_pretty(opts)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
