use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dsamp_core::energies::{build_energy, EnergyKind};
use dsamp_core::grad::Checkpoint;
use dsamp_core::metrics::{evaluate, Evaluation, MetricsReport};
use dsamp_core::objectives::Method;
use dsamp_core::schedule::{Schedule, ScheduleKind};
use dsamp_core::trainer::{load_checkpoint, preset, RunState, RunStatus, TrainConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.dsamp";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Where a training run comes from. Flags override the config file, and
/// `overrides` (`key=value`) are applied last.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub config: Option<PathBuf>,
    pub preset: Option<EnergyKind>,
    pub steps: Option<usize>,
    pub method: Option<Method>,
    pub seed: Option<u64>,
    pub schedule: Option<ScheduleKind>,
    pub iterations: Option<usize>,
    pub overrides: Vec<String>,
}

pub fn build_config(opts: &TrainOptions) -> Result<TrainConfig> {
    let mut c = match &opts.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut c = TrainConfig::from_toml(&text)?;
            if let Some(kind) = opts.preset {
                c.energy = kind;
                c.net.dim = kind.dim();
            }
            if let Some(t) = opts.steps {
                c.steps = t;
            }
            if let Some(m) = opts.method {
                c.set_method(m);
            }
            c
        }
        None => preset(
            opts.preset.unwrap_or(EnergyKind::Gmm25),
            opts.steps.unwrap_or(10),
            opts.method.unwrap_or(Method::TbBoth),
        ),
    };
    if let Some(s) = opts.seed {
        c.seed = s;
    }
    if let Some(s) = opts.schedule {
        c.schedule = s;
    }
    if let Some(n) = opts.iterations {
        c.iterations = n;
    }
    for o in &opts.overrides {
        c.set(o)?;
    }
    c.validate()?;
    Ok(c)
}

/// Run root from the environment, `runs` otherwise.
pub fn run_root() -> PathBuf {
    std::env::var_os(crate::RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: RunStatus,
    pub reason: Option<String>,
    pub seed: u64,
    pub version: String,
    pub git_describe: Option<String>,
    pub started: String,
    pub finished: String,
    pub iterations_completed: usize,
    pub final_metrics: Option<MetricsReport>,
    pub metrics_file: String,
    pub checkpoint_file: String,
    pub config: TrainConfig,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn timestamp() -> String {
    chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string()
}

fn git_describe() -> Option<String> {
    let out = Command::new("git").args(["describe", "--always", "--dirty"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

fn fresh_dir(root: &Path, c: &TrainConfig) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    let base = format!("{}_{}_T{}_s{}_{}", c.energy, c.method, c.steps, c.seed, stamp);
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    for k in 0.. {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

/// Trains `config` into a new run directory under `root` and returns it.
/// Divergence and collapse are results, recorded in the manifest.
pub fn run_train(config: TrainConfig, root: &Path, progress: bool) -> Result<PathBuf> {
    let dir = fresh_dir(root, &config)?;
    let started = timestamp();
    let mut metrics = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
    let mut write_err = None;
    let state = RunState::new(config)?;
    let outcome = state.run(&mut |rec| {
        let line = serde_json::to_string(rec).expect("record serialises");
        if let Err(e) = writeln!(metrics, "{line}").and_then(|_| metrics.flush()) {
            write_err.get_or_insert(e);
        }
        if progress {
            eprintln!("iter {:>6}  elbo {:>9.4}  eubo {:>9.4}  logZ^ {:>8.4}", rec.iter, rec.elbo, rec.eubo, rec.logz_hat);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics");
    }
    drop(metrics);
    outcome.state.checkpoint().write(&dir.join(CHECKPOINT_FILE))?;
    let manifest = RunManifest {
        status: outcome.status,
        reason: outcome.reason,
        seed: outcome.state.config.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        git_describe: git_describe(),
        started,
        finished: timestamp(),
        iterations_completed: outcome.state.iter,
        final_metrics: outcome.final_metrics,
        metrics_file: METRICS_FILE.into(),
        checkpoint_file: CHECKPOINT_FILE.into(),
        config: outcome.state.config.clone(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(dir)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    /// Energy to evaluate against; the checkpoint's own by default.
    pub energy: Option<EnergyKind>,
    pub n: usize,
    pub seed: u64,
    pub w2: bool,
    pub dump_samples: Option<PathBuf>,
}

pub fn run_eval(opts: &EvalOptions) -> Result<Evaluation> {
    let ck = Checkpoint::read(&opts.checkpoint).with_context(|| format!("loading {}", opts.checkpoint.display()))?;
    let (cfg, model) = load_checkpoint(&ck)?;
    let kind = opts.energy.unwrap_or(cfg.energy);
    if kind.dim() != model.config.dim {
        bail!("checkpoint has dimension {} but energy {kind} has dimension {}", model.config.dim, kind.dim());
    }
    let energy = build_energy(kind, cfg.construction_seed);
    let schedule = Schedule::new(cfg.schedule, cfg.steps)?;
    let ev = evaluate(&model, &energy, &schedule, cfg.sigma2, opts.n, opts.seed, opts.w2)?;
    if let Some(path) = &opts.dump_samples {
        write_samples(path, &ev.model_samples)?;
    }
    Ok(ev)
}

/// Writes one row per sample with columns `x0, x1, ...`.
pub fn write_samples(path: &Path, xs: &dsamp_core::ndarray::Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record((0..xs.ncols()).map(|j| format!("x{j}")))?;
    for row in xs.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
