use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use dsamp_cli::run::write_samples;
use dsamp_cli::sweep::SweepPlan;
use dsamp_cli::*;
use dsamp_core::energies::{build_energy, EnergyKind};
use dsamp_core::objectives::Method;
use dsamp_core::schedule::ScheduleKind;

#[derive(Parser)]
#[command(name = "dsamp", version, about = "Train and benchmark diffusion samplers")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one sampler into a new run directory and print its path.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print the metrics as JSON.
    Eval(EvalArgs),
    /// Train a grid of methods and step counts over several seeds.
    Sweep(SweepArgs),
    /// Run a named experiment: table-25gmm, fig-funnel or ablation-40gmm.
    Reproduce(ReproduceArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Energy preset, e.g. gmm25, funnel-hard, manywell-distorted.
    #[arg(long)]
    preset: Option<EnergyKind>,
    /// Number of generation steps.
    #[arg(long = "T")]
    steps: Option<usize>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    schedule: Option<ScheduleKind>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Config override `key=value`, repeatable. Dotted keys reach nested tables.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// No progress lines on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Energy to evaluate against; defaults to the one trained on.
    #[arg(long)]
    energy: Option<EnergyKind>,
    #[arg(long, default_value_t = 2048)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the 2-Wasserstein distance.
    #[arg(long)]
    no_w2: bool,
    /// CSV file receiving the generated samples.
    #[arg(long)]
    dump_samples: Option<PathBuf>,
}

#[derive(Args)]
struct SweepCommon {
    #[arg(long = "seed", alias = "seeds", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value = "gmm25")]
    preset: EnergyKind,
    #[arg(long = "T", value_delimiter = ',', default_values_t = [5, 10, 20])]
    steps: Vec<usize>,
    #[arg(long = "method", value_delimiter = ',', default_values_t = [Method::TbFixed, Method::TbLearnedvar, Method::TbTlm, Method::TbBoth])]
    methods: Vec<Method>,
    #[command(flatten)]
    common: SweepCommon,
}

#[derive(Args)]
struct ReproduceArgs {
    name: String,
    #[command(flatten)]
    common: SweepCommon,
}

fn sweep_dir(name: &str) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    let dir = run_root().join(format!("sweep_{name}_{stamp}"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn execute(mut plan: SweepPlan, common: SweepCommon, default_seeds: &[u64]) -> Result<(PathBuf, Vec<RunResult>)> {
    plan.seeds = if common.seeds.is_empty() { default_seeds.to_vec() } else { common.seeds };
    plan.jobs = common.jobs;
    plan.iterations = common.iterations;
    plan.overrides = common.overrides;
    let dir = sweep_dir(&plan.name)?;
    let results = run_sweep(&plan, &std::env::current_exe()?, &dir)?;
    write_runs(&dir.join("runs.csv"), &plan.cells, &results)?;
    write_summary(&dir.join("summary.csv"), &plan.cells, &results)?;
    Ok((dir, results))
}

/// Sample dumps and the tail-mass statistic for the funnel figure.
fn funnel_figure(dir: &Path, plan: &SweepPlan, results: &[RunResult]) -> Result<()> {
    const N: usize = 2048;
    let tail = |xs: &dsamp_core::ndarray::Array2<f64>| {
        xs.column(0).iter().filter(|&&v| v < -2.0).count() as f64 / xs.nrows().max(1) as f64
    };
    let gt = build_energy(EnergyKind::FunnelHard, dsamp_core::energies::DEFAULT_CONSTRUCTION_SEED)
        .sample_ground_truth(N, 0)?;
    write_samples(&dir.join("ground_truth.csv"), &gt)?;
    let mut w = csv::Writer::from_path(dir.join("tail.csv"))?;
    w.write_record(["label", "seed", "tail_frac", "ground_truth_tail_frac"])?;
    for r in results.iter().filter(|r| r.status == "ok") {
        let label = &plan.cells[r.cell].label;
        let ev = run_eval(&EvalOptions {
            checkpoint: r.dir.clone().expect("ok runs have a directory").join(run::CHECKPOINT_FILE),
            energy: None,
            n: N,
            seed: 0,
            w2: false,
            dump_samples: Some(dir.join(format!("samples_{label}_s{}.csv", r.seed))),
        })?;
        w.write_record([label.clone(), r.seed.to_string(), tail(&ev.model_samples).to_string(), tail(&gt).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Prints a line, reporting a closed pipe as an error instead of panicking.
fn out(line: &dyn std::fmt::Display) -> Result<()> {
    writeln!(std::io::stdout(), "{line}")?;
    Ok(())
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Train(a) => {
            let config = build_config(&TrainOptions {
                config: a.config,
                preset: a.preset,
                steps: a.steps,
                method: a.method,
                seed: a.seed,
                schedule: a.schedule,
                iterations: a.iterations,
                overrides: a.overrides,
            })?;
            let dir = run_train(config, &run_root(), !a.quiet)?;
            let manifest = RunManifest::read(&dir)?;
            if !a.quiet {
                eprintln!("status: {}", manifest.status);
            }
            out(&dir.display())?;
        }
        Cmd::Eval(a) => {
            let ev = run_eval(&EvalOptions {
                checkpoint: a.checkpoint,
                energy: a.energy,
                n: a.n,
                seed: a.seed,
                w2: !a.no_w2,
                dump_samples: a.dump_samples,
            })?;
            out(&serde_json::to_string_pretty(&ev.report)?)?;
        }
        Cmd::Sweep(a) => {
            let plan = SweepPlan::grid(a.preset.name(), a.preset, &a.steps, &a.methods, Vec::new());
            let (dir, _) = execute(plan, a.common, &[0])?;
            out(&dir.join("summary.csv").display())?;
        }
        Cmd::Reproduce(a) => {
            let plan = reproduce_plan(&a.name, Vec::new())?;
            let (dir, results) = execute(plan.clone(), a.common, &[0, 1, 2])?;
            if a.name == "fig-funnel" {
                funnel_figure(&dir, &plan, &results)?;
            }
            out(&dir.join("summary.csv").display())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
