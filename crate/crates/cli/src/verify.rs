use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context as _, Result};
use dualform::histlog::{dual_head_logits_batch, reconstruct_delta, WeightTarget};
use dualform::nncore::{apply_head, grad_check_random, ModelConfig, Precision};
use dualform::probes::{probe_instances, prop1_check, PositionPolicy};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::rundir::RunDir;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyOptions {
    pub run: Option<PathBuf>,
    /// Overrides the verifier's default tolerance.
    pub tolerance: Option<f64>,
    /// Attention head whose output projection `duality` reconstructs.
    pub head: usize,
    pub queries: usize,
    pub seed: u64,
    pub draws: usize,
    pub dim: usize,
    pub epsilon: f64,
    pub seq_len: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            run: None,
            tolerance: None,
            head: 0,
            queries: 100,
            seed: 0,
            draws: 10_000,
            dim: 64,
            epsilon: 1e-5,
            seq_len: 12,
        }
    }
}

impl VerifyOptions {
    fn run_dir(&self, verifier: &str) -> Result<RunDir> {
        match &self.run {
            Some(p) => Ok(RunDir::new(p)),
            None => bail!("verify {verifier} needs --run <dir>"),
        }
    }
}

/// One pass/fail comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    /// Passes when `value <= tolerance`.
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: value <= tolerance,
            value,
            tolerance,
            detail: detail.into(),
        }
    }

    pub fn line(&self, verifier: &str) -> String {
        let mut s = format!(
            "{} {verifier} {}: {:.3e} (tolerance {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance
        );
        if !self.detail.is_empty() {
            s.push_str(" ");
            s.push_str(&self.detail);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub verifier: String,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

pub trait Verifier: Sync {
    fn name(&self) -> &'static str;
    fn about(&self) -> &'static str;
    fn checks(&self, opts: &VerifyOptions) -> Result<Vec<Check>>;

    fn verify(&self, opts: &VerifyOptions) -> Result<Verdict> {
        let t = Instant::now();
        let checks = self.checks(opts)?;
        Ok(Verdict {
            verifier: self.name().to_string(),
            checks,
            seconds: t.elapsed().as_secs_f64(),
        })
    }
}

pub struct VerifierRegistry {
    entries: Vec<Box<dyn Verifier>>,
}

impl Default for VerifierRegistry {
    fn default() -> Self {
        let mut r = Self { entries: Vec::new() };
        r.register(Box::new(Duality));
        r.register(Box::new(DualHead));
        r.register(Box::new(GradCheck));
        r.register(Box::new(Prop1Draws));
        r
    }
}

impl VerifierRegistry {
    pub fn register(&mut self, v: Box<dyn Verifier>) {
        self.entries.retain(|e| e.name() != v.name());
        self.entries.push(v);
    }

    pub fn get(&self, name: &str) -> Option<&dyn Verifier> {
        self.entries.iter().find(|e| e.name() == name).map(|b| b.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name()).collect()
    }
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn default_tolerance(p: Precision) -> f64 {
    match p {
        Precision::F64 => 1e-8,
        Precision::F32 => 1e-3,
    }
}

struct Duality;

impl Verifier for Duality {
    fn name(&self) -> &'static str {
        "duality"
    }

    fn about(&self) -> &'static str {
        "rebuild trained weights as init minus the logged outer-product sum"
    }

    fn checks(&self, opts: &VerifyOptions) -> Result<Vec<Check>> {
        let run = opts.run_dir(self.name())?;
        let cfg = run.config()?;
        let mut reader = run.history(&cfg)?;
        let h = reader.header().clone();
        let init = run.checkpoint(&cfg, 0)?.to_f64();
        let last = dualform::nncore::load_checkpoint_expect(&run.last_path(), &cfg.model)?.to_f64();
        let mut targets = vec![WeightTarget::Head];
        for &l in &h.grad_layers {
            targets.push(WeightTarget::OutProj { layer: l, head: opts.head });
            targets.push(WeightTarget::Ffn2 { layer: l });
        }
        let deltas = reconstruct_delta(&mut reader, &targets, None)?;
        let tol = opts.tolerance.unwrap_or_else(|| default_tolerance(h.storage));
        Ok(targets
            .iter()
            .zip(deltas)
            .map(|(t, d)| {
                let rebuilt = t.extract(&init.params, &cfg.model) - &d;
                let diff = max_abs_diff(&rebuilt, &t.extract(&last.params, &cfg.model));
                Check::at_most(format!("{t} max_abs_diff"), diff, tol, format!("epoch {}", last.epoch))
            })
            .collect())
    }
}

struct DualHead;

impl Verifier for DualHead {
    fn name(&self) -> &'static str {
        "dual-head"
    }

    fn about(&self) -> &'static str {
        "LM-head logits as attention over logged (representation, error) pairs"
    }

    fn checks(&self, opts: &VerifyOptions) -> Result<Vec<Check>> {
        let run = opts.run_dir(self.name())?;
        let cfg = run.config()?;
        if !cfg.model.zero_init_head {
            bail!("dual-head needs a run trained with a zero-initialized head (train --zero-init-head)");
        }
        let mut reader = run.history(&cfg)?;
        let tol = opts.tolerance.unwrap_or_else(|| default_tolerance(reader.header().storage));
        let st = dualform::nncore::load_checkpoint_expect(&run.last_path(), &cfg.model)?.to_f64();
        let ds = run.dataset(&cfg)?;
        let inst = probe_instances(&ds.validation, PositionPolicy::RandomPrefix { seed: opts.seed });
        let n = opts.queries.min(inst.len());
        if n == 0 {
            bail!("no validation queries");
        }
        let mut q = Array2::<f64>::zeros((n, cfg.model.d_model));
        for (i, pi) in inst[..n].iter().enumerate() {
            let f = st.eval(&ds.validation[pi.sequence].tokens)?;
            q.row_mut(i).assign(&f.trace.pre_head.row(pi.position));
        }
        let primal = apply_head(&st.params, &st.config, &q, false);
        let dual = dual_head_logits_batch(&mut reader, &q, None)?;
        let argmax = |r: ndarray::ArrayView1<f64>| (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap_or(0);
        let agree = primal
            .rows()
            .into_iter()
            .zip(dual.rows())
            .filter(|(a, b)| argmax(*a) == argmax(*b))
            .count();
        Ok(vec![
            Check::at_most("logits max_abs_diff", max_abs_diff(&primal, &dual), tol, format!("{n} queries")),
            Check::at_most(
                "argmax disagreement",
                (n - agree) as f64,
                0.0,
                format!("{agree}/{n} agree"),
            ),
        ])
    }
}

struct GradCheck;

impl Verifier for GradCheck {
    fn name(&self) -> &'static str {
        "gradcheck"
    }

    fn about(&self) -> &'static str {
        "finite differences against the analytic backward pass on a 2-layer f64 model"
    }

    fn checks(&self, opts: &VerifyOptions) -> Result<Vec<Check>> {
        let cfg = ModelConfig {
            n_layers: 2,
            precision: Precision::F64,
            ..ModelConfig::default()
        };
        let rep = grad_check_random::<f64>(&cfg, opts.seed, opts.seq_len, opts.epsilon)?;
        let tol = opts.tolerance.unwrap_or(1e-5);
        let mut out: Vec<Check> = rep
            .groups
            .iter()
            .map(|g| Check::at_most(format!("{} rel_err", g.name), g.rel_err, tol, format!("max_abs_err {:.3e}", g.max_abs_err)))
            .collect();
        out.push(Check::at_most("max rel_err", rep.max_rel_err, tol, format!("{} groups", rep.groups.len())));
        Ok(out)
    }
}

struct Prop1Draws;

/// A random square matrix whose gain on a typical vector is spread around 1,
/// so both outcomes of the norm comparison are common.
fn random_pair(rng: &mut ChaCha8Rng, d: usize) -> (Array2<f64>, Array1<f64>) {
    let scale = rng.gen_range(0.5..1.5) / (d as f64).sqrt();
    let w = Array2::from_shape_simple_fn((d, d), || scale * rng.sample::<f64, _>(StandardNormal));
    let x = Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal));
    (w, x)
}

impl Verifier for Prop1Draws {
    fn name(&self) -> &'static str {
        "prop1"
    }

    fn about(&self) -> &'static str {
        "Gram-eigenvalue condition vs direct norm comparison on random (W, x)"
    }

    fn checks(&self, opts: &VerifyOptions) -> Result<Vec<Check>> {
        if opts.draws == 0 || opts.dim == 0 {
            bail!("prop1 needs positive --draws and --dim");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let (mut bad, mut holds) = (0usize, 0usize);
        for i in 0..opts.draws {
            let (w, x) = random_pair(&mut rng, opts.dim);
            let p = prop1_check(&w, &x).with_context(|| format!("draw {i}"))?;
            bad += !p.consistent as usize;
            holds += p.norm_nondec as usize;
        }
        Ok(vec![Check::at_most(
            "disagreements",
            bad as f64,
            0.0,
            format!("{} draws at d={}, {holds} with |Wx| >= |x|", opts.draws, opts.dim),
        )])
    }
}
