use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;

use anyhow::{bail, Context, Result};

use dsamp_core::energies::EnergyKind;
use dsamp_core::objectives::Method;
use dsamp_core::trainer::{MetricsRecord, RunStatus};

use crate::run::{RunManifest, METRICS_FILE};

/// One row of a sweep: a method at a step count, plus config overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub label: String,
    pub energy: EnergyKind,
    pub method: Method,
    pub steps: usize,
    pub overrides: Vec<String>,
}

impl Cell {
    pub fn new(energy: EnergyKind, method: Method, steps: usize) -> Self {
        Self { label: method.to_string(), energy, method, steps, overrides: Vec::new() }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub name: String,
    pub cells: Vec<Cell>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub iterations: Option<usize>,
    /// Overrides applied to every run.
    pub overrides: Vec<String>,
}

impl SweepPlan {
    /// Every combination of `methods` and `steps`, methods varying fastest.
    pub fn grid(name: &str, energy: EnergyKind, steps: &[usize], methods: &[Method], seeds: Vec<u64>) -> Self {
        let cells =
            steps.iter().flat_map(|&t| methods.iter().map(move |&m| Cell::new(energy, m, t))).collect();
        Self { name: name.into(), cells, seeds, jobs: 1, iterations: None, overrides: Vec::new() }
    }
}

/// Final numbers of one run: the average of its last evaluations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinalMetrics {
    pub elbo: f64,
    pub eubo: f64,
    pub w2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub cell: usize,
    pub seed: u64,
    /// `ok`, `diverged`, `collapsed` or `failed` (the child process errored).
    pub status: String,
    pub dir: Option<PathBuf>,
    pub metrics: Option<FinalMetrics>,
    pub error: Option<String>,
}

/// Status and final metrics of a run directory, recomputed from its
/// metrics log.
pub fn summarize_run(dir: &Path) -> Result<(RunStatus, Option<FinalMetrics>)> {
    let manifest = RunManifest::read(dir)?;
    let text = fs::read_to_string(dir.join(METRICS_FILE))?;
    let records: Vec<MetricsRecord> =
        text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?;
    if manifest.status == RunStatus::Diverged || records.is_empty() {
        return Ok((manifest.status, None));
    }
    let k = manifest.config.eval_average.min(records.len());
    let tail = &records[records.len() - k..];
    let mean = |f: fn(&MetricsRecord) -> f64| tail.iter().map(f).sum::<f64>() / k as f64;
    let w2 = tail.iter().map(|r| r.w2).collect::<Option<Vec<_>>>().map(|v| v.iter().sum::<f64>() / k as f64);
    Ok((manifest.status, Some(FinalMetrics { elbo: mean(|r| r.elbo), eubo: mean(|r| r.eubo), w2 })))
}

fn child_run(exe: &Path, runs: &Path, plan: &SweepPlan, cell: &Cell, seed: u64) -> Result<PathBuf> {
    let mut cmd = Command::new(exe);
    cmd.arg("train")
        .args(["--preset", cell.energy.name()])
        .args(["--T", &cell.steps.to_string()])
        .args(["--method", cell.method.name()])
        .args(["--seed", &seed.to_string()])
        .arg("--quiet")
        .env(crate::RUN_ROOT_ENV, runs);
    if let Some(n) = plan.iterations {
        cmd.args(["--iterations", &n.to_string()]);
    }
    for o in plan.overrides.iter().chain(&cell.overrides) {
        cmd.args(["--set", o]);
    }
    let out = cmd.output().with_context(|| format!("launching {}", exe.display()))?;
    if !out.status.success() {
        let err = String::from_utf8_lossy(&out.stderr);
        bail!("{}", err.trim().lines().last().unwrap_or("child process failed"));
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    let dir = stdout.lines().rev().find(|l| !l.trim().is_empty()).context("child printed no run directory")?;
    Ok(PathBuf::from(dir.trim()))
}

/// Runs every (cell, seed) pair as a child `exe train` process, at most
/// `plan.jobs` at a time, with run directories under `out/runs`. Child
/// failures are recorded and the sweep continues.
pub fn run_sweep(plan: &SweepPlan, exe: &Path, out: &Path) -> Result<Vec<RunResult>> {
    if plan.seeds.is_empty() {
        bail!("a sweep needs at least one seed");
    }
    let runs = out.join("runs");
    fs::create_dir_all(&runs)?;
    let queue: Mutex<VecDeque<(usize, u64)>> =
        Mutex::new((0..plan.cells.len()).flat_map(|c| plan.seeds.iter().map(move |&s| (c, s))).collect());
    let results = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..plan.jobs.max(1) {
            scope.spawn(|| loop {
                let Some((cell, seed)) = queue.lock().unwrap().pop_front() else { break };
                let res = match child_run(exe, &runs, plan, &plan.cells[cell], seed) {
                    Ok(dir) => match summarize_run(&dir) {
                        Ok((status, metrics)) => {
                            RunResult { cell, seed, status: status.to_string(), dir: Some(dir), metrics, error: None }
                        }
                        Err(e) => RunResult {
                            cell,
                            seed,
                            status: "failed".into(),
                            dir: Some(dir),
                            metrics: None,
                            error: Some(e.to_string()),
                        },
                    },
                    Err(e) => RunResult {
                        cell,
                        seed,
                        status: "failed".into(),
                        dir: None,
                        metrics: None,
                        error: Some(e.to_string()),
                    },
                };
                eprintln!("{} T={} seed={}: {}", plan.cells[cell].label, plan.cells[cell].steps, seed, res.status);
                results.lock().unwrap().push(res);
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|r| (r.cell, r.seed));
    Ok(results)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    Some((m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per cell. Means and deviations use the runs with status `ok`;
/// the status column counts every other outcome.
pub fn write_summary(path: &Path, cells: &[Cell], results: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "label", "energy", "method", "T", "seeds", "ok", "collapsed", "diverged", "failed", "status", "elbo_mean",
        "elbo_std", "eubo_mean", "eubo_std", "w2_mean", "w2_std",
    ])?;
    for (i, cell) in cells.iter().enumerate() {
        let rs: Vec<&RunResult> = results.iter().filter(|r| r.cell == i).collect();
        let count = |s: &str| rs.iter().filter(|r| r.status == s).count();
        let ok: Vec<FinalMetrics> =
            rs.iter().filter(|r| r.status == "ok").filter_map(|r| r.metrics).collect();
        let status = ["collapsed", "diverged", "failed"]
            .iter()
            .filter(|s| count(s) > 0)
            .map(|s| format!("{s}={}", count(s)))
            .collect::<Vec<_>>()
            .join(";");
        let elbo = mean_std(&ok.iter().map(|m| m.elbo).collect::<Vec<_>>());
        let eubo = mean_std(&ok.iter().map(|m| m.eubo).collect::<Vec<_>>());
        let w2s: Option<Vec<f64>> = ok.iter().map(|m| m.w2).collect();
        let w2 = w2s.and_then(|v| mean_std(&v));
        w.write_record([
            cell.label.clone(),
            cell.energy.to_string(),
            cell.method.to_string(),
            cell.steps.to_string(),
            rs.len().to_string(),
            count("ok").to_string(),
            count("collapsed").to_string(),
            count("diverged").to_string(),
            count("failed").to_string(),
            if status.is_empty() { "ok".into() } else { status },
            fmt_opt(elbo.map(|p| p.0)),
            fmt_opt(elbo.map(|p| p.1)),
            fmt_opt(eubo.map(|p| p.0)),
            fmt_opt(eubo.map(|p| p.1)),
            fmt_opt(w2.map(|p| p.0)),
            fmt_opt(w2.map(|p| p.1)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per run.
pub fn write_runs(path: &Path, cells: &[Cell], results: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "method", "T", "seed", "status", "elbo", "eubo", "w2", "dir", "error"])?;
    for r in results {
        let c = &cells[r.cell];
        w.write_record([
            c.label.clone(),
            c.method.to_string(),
            c.steps.to_string(),
            r.seed.to_string(),
            r.status.clone(),
            fmt_opt(r.metrics.map(|m| m.elbo)),
            fmt_opt(r.metrics.map(|m| m.eubo)),
            fmt_opt(r.metrics.and_then(|m| m.w2)),
            r.dir.as_ref().map(|d| d.display().to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Named experiment plans.
pub fn reproduce_plan(name: &str, seeds: Vec<u64>) -> Result<SweepPlan> {
    Ok(match name {
        "table-25gmm" => SweepPlan::grid(name, EnergyKind::Gmm25, &[5, 10, 20], &Method::ALL, seeds),
        "fig-funnel" => SweepPlan::grid(name, EnergyKind::FunnelHard, &[5], &[Method::TbFixed, Method::TbBoth], seeds),
        "ablation-40gmm" => {
            let variant = |label: &str, method: Method, overrides: &[&str]| Cell {
                label: label.into(),
                energy: EnergyKind::Gmm40,
                method,
                steps: 10,
                overrides: overrides.iter().map(|s| s.to_string()).collect(),
            };
            let cells = vec![
                variant("optimal", Method::TbBoth, &[]),
                variant("gen-only-fixed-var", Method::TbFixed, &[]),
                variant("gen-only-learned-var", Method::TbLearnedvar, &[]),
                variant("separate-backbones", Method::TbBoth, &["net.shared_backbone=false"]),
                variant("single-optimizer", Method::TbBoth, &["single_optimizer=true"]),
                variant("lr-destr-0.1", Method::TbBoth, &["lr_destr_ratio=0.1"]),
                variant("lr-destr-0.01", Method::TbBoth, &["lr_destr_ratio=0.01"]),
                variant("replay-0", Method::TbBoth, &["replay_ratio=0"]),
                variant("replay-1", Method::TbBoth, &["replay_ratio=1"]),
                variant("replay-4", Method::TbBoth, &["replay_ratio=4"]),
                variant("replay-8", Method::TbBoth, &["replay_ratio=8"]),
                variant("no-target-net", Method::TbBoth, &["use_target_nets=false"]),
            ];
            SweepPlan { name: name.into(), cells, seeds, jobs: 1, iterations: None, overrides: Vec::new() }
        }
        other => bail!("unknown experiment {other:?}; expected table-25gmm, fig-funnel or ablation-40gmm"),
    })
}
