//! Experiment runner: dataset generation, training with history logging,
//! probe analyses and exactness checks, all emitting CSV/JSON.

pub mod analyze;
pub mod config;
pub mod import;
pub mod rundir;
pub mod train;
pub mod verify;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context as _, Result};
use clap::{ArgAction, Args, Parser, Subcommand};
use dualform::nncore::Precision;
use dualform::probes::Representation;
use dualform::synthlang::{build_dataset, write_dataset};

use crate::analyze::{AnalysisRegistry, AnalyzeOptions};
use crate::config::RunConfig;
use crate::import::ImportOptions;
use crate::rundir::RunDir;
use crate::verify::{VerifierRegistry, VerifyOptions};

/// Exit code for a verification that ran but failed.
pub const EXIT_FAIL: i32 = 1;
/// Exit code for runtime errors (missing files, mismatched configs, ...).
pub const EXIT_ERROR: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "dualform", version, about = "Train small transformers and probe them through their dual form")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic regex-language dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "sgd-small")]
        profile: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, logging history and checkpoints into a run directory.
    Train(TrainArgs),
    /// Run a probe analysis over a run's checkpoints.
    Analyze(AnalyzeArgs),
    /// Check an exactness property and print PASS/FAIL lines.
    Verify(VerifyArgs),
    /// Analyze an external per-layer trace (XTRC format).
    ImportTrace(ImportArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value = "sgd-small")]
    profile: String,
    /// JSON run config; overrides the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Train on an existing dataset file instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<u32>,
    /// Record every N-th epoch in the history log; 0 disables it.
    #[arg(long)]
    history_stride: Option<u32>,
    /// Comma-separated 1-based layers whose output gradients are logged, or `none`.
    #[arg(long)]
    record_grads: Option<String>,
    /// Parameter-init seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Seed for shuffling and dropout.
    #[arg(long)]
    train_seed: Option<u64>,
    /// Dataset generation seed.
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    zero_init_head: bool,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// One of cluster, inner-loss, attn, norm, pca, eigen.
    kind: String,
    #[arg(long)]
    run: PathBuf,
    /// Output directory (default: <run>/analysis).
    #[arg(long)]
    out: Option<PathBuf>,
    /// `all`, or comma-separated checkpoint epochs; `final` names the last one.
    #[arg(long, default_value = "all")]
    epochs: String,
    /// Comma-separated splits.
    #[arg(long, default_value = "train,validation")]
    splits: String,
    #[arg(long, default_value = "validation")]
    probe_split: String,
    /// Drop the last point of every norm trajectory.
    #[arg(long, default_value_t = true, action = ArgAction::Set, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    exclude_last: bool,
    /// Probe the head with raw layer outputs (no final norm).
    #[arg(long)]
    raw_head_probe: bool,
    /// Drop instances whose last-layer loss exceeds this.
    #[arg(long)]
    filter_loss: Option<f64>,
    /// Probe every position from this 1-based index on.
    #[arg(long)]
    min_position: Option<usize>,
    #[arg(long, default_value_t = 0)]
    position_seed: u64,
    #[arg(long, default_value_t = 0)]
    kmeans_seed: u64,
    /// Cluster the final-norm output instead of the raw layer output.
    #[arg(long)]
    final_norm: bool,
    /// Only read history epochs divisible by this (attn).
    #[arg(long)]
    epoch_every: Option<u32>,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Number of validation contexts (eigen).
    #[arg(long, default_value_t = 100)]
    contexts: usize,
    /// Worker threads (default: available cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// One of duality, dual-head, gradcheck, prop1.
    kind: String,
    #[arg(long)]
    run: Option<PathBuf>,
    /// Where to write the JSON verdict (default: <run>/verify when --run is given).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, default_value_t = 0)]
    head: usize,
    #[arg(long, default_value_t = 100)]
    queries: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    draws: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 12)]
    seq_len: usize,
}

#[derive(Args, Debug)]
struct ImportArgs {
    #[arg(long)]
    trace: PathBuf,
    /// LM head (MHEAD format) for inner-loss curves; needs `<trace>.labels`.
    #[arg(long)]
    head: Option<PathBuf>,
    #[arg(long, default_value_t = false, action = ArgAction::Set, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    exclude_last: bool,
    #[arg(long)]
    filter_loss: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 when a verification fails, 2 on usage
/// errors and 3 on runtime errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match dispatch(cli.cmd) {
        Ok(true) => 0,
        Ok(false) => EXIT_FAIL,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}

fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::GenData { config, profile, out } => gen_data(config.as_deref(), &profile, &out).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Analyze(a) => analyze(a).map(|_| true),
        Command::Verify(a) => verify(a),
        Command::ImportTrace(a) => import_trace(a).map(|_| true),
    }
}

fn base_config(config: Option<&Path>, profile: &str) -> Result<RunConfig> {
    match config {
        Some(p) => RunConfig::load(p),
        None => config::profile(profile),
    }
}

fn gen_data(config: Option<&Path>, profile: &str, out: &Path) -> Result<()> {
    let cfg = base_config(config, profile)?;
    cfg.data.validate()?;
    let ds = build_dataset(&cfg.data)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_dataset(&ds, &out.join("dataset.jsonl"))?;
    cfg.save(&out.join("config.json"))?;
    println!(
        "wrote {} train / {} validation sequences to {}",
        ds.train.len(),
        ds.validation.len(),
        out.display()
    );
    Ok(())
}

fn parse_layers(s: &str) -> Result<Vec<usize>> {
    if s == "none" || s.is_empty() {
        return Ok(vec![]);
    }
    let mut v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| anyhow!("bad layer {p:?} in --record-grads")))
        .collect::<Result<_>>()?;
    v.sort();
    v.dedup();
    Ok(v)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = base_config(a.config.as_deref(), &a.profile)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(p) = &a.precision {
        cfg.model.precision = if p == "f32" { Precision::F32 } else { Precision::F64 };
    }
    if let Some(c) = a.checkpoint_every {
        cfg.checkpoint_every = c;
    }
    if let Some(s) = a.history_stride {
        cfg.history.stride = s;
    }
    if let Some(g) = &a.record_grads {
        cfg.history.grad_layers = parse_layers(g)?;
    }
    if let Some(s) = a.seed {
        cfg.init_seed = s;
    }
    if let Some(s) = a.train_seed {
        cfg.train.rng_seed = s;
    }
    if let Some(s) = a.data_seed {
        cfg.data.rng_seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if a.zero_init_head {
        cfg.model.zero_init_head = true;
    }
    let dir = RunDir::new(&a.out);
    train::train_run(&cfg, &dir, a.data.as_deref())?;
    println!("run complete: {}", a.out.display());
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let registry = AnalysisRegistry::default();
    let Some(analysis) = registry.get(&a.kind) else {
        bail!("unknown analysis {:?} (known: {})", a.kind, registry.names().join(", "));
    };
    let run = RunDir::new(&a.run);
    let cfg = run.config()?;
    let data = run.dataset(&cfg)?;
    let epochs = analyze::resolve_epochs(&a.epochs, &run.checkpoint_epochs()?)?;
    let opts = AnalyzeOptions {
        splits: a.splits.split(',').map(|s| s.trim().to_string()).collect(),
        probe_split: a.probe_split,
        exclude_last: a.exclude_last,
        raw_head_probe: a.raw_head_probe,
        filter_loss: a.filter_loss,
        min_position: a.min_position,
        position_seed: a.position_seed,
        kmeans_seed: a.kmeans_seed,
        representation: if a.final_norm { Representation::FinalNorm } else { Representation::Raw },
        epoch_every: a.epoch_every,
        top_k: a.top_k,
        contexts: a.contexts,
        threads: a
            .threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
    };
    opts.validate()?;
    let out = a.out.unwrap_or_else(|| analyze::default_out(&a.run));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let ctx = analyze::Context {
        run: &run,
        cfg: &cfg,
        data: &data,
        epochs: &epochs,
        opts: &opts,
        out: &out,
    };
    let rep = analysis.run(&ctx)?;
    analyze::save_outputs(&ctx, analysis.name(), &rep)?;
    println!("{} rows written to {}", rep.rows.len(), out.join(format!("{}.csv", analysis.name())).display());
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<bool> {
    let registry = VerifierRegistry::default();
    let Some(v) = registry.get(&a.kind) else {
        bail!("unknown verifier {:?} (known: {})", a.kind, registry.names().join(", "));
    };
    let opts = VerifyOptions {
        run: a.run.clone(),
        tolerance: a.tolerance,
        head: a.head,
        queries: a.queries,
        seed: a.seed,
        draws: a.draws,
        dim: a.dim,
        epsilon: a.epsilon,
        seq_len: a.seq_len,
    };
    let verdict = v.verify(&opts)?;
    for c in &verdict.checks {
        println!("{}", c.line(v.name()));
    }
    println!("{} {} ({:.1}s)", if verdict.passed() { "PASS" } else { "FAIL" }, v.name(), verdict.seconds);
    let out = a.out.or_else(|| a.run.as_ref().map(|r| r.join("verify")));
    if let Some(out) = out {
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let body = serde_json::json!({ "options": opts, "verdict": verdict });
        std::fs::write(out.join(format!("{}.json", v.name())), serde_json::to_string_pretty(&body)? + "\n")?;
    }
    Ok(verdict.passed())
}

fn import_trace(a: ImportArgs) -> Result<()> {
    let opts = ImportOptions {
        trace: a.trace,
        head: a.head,
        exclude_last: a.exclude_last,
        filter_loss: a.filter_loss,
    };
    let rep = import::import_trace(&opts)?;
    import::save_import(&a.out, &opts, &rep)?;
    for r in rep.rows.iter().filter(|r| r.layer == 0) {
        println!("{}: {}", r.metric, r.value);
    }
    Ok(())
}
