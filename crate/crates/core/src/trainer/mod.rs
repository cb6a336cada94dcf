//! The optimisation loop: on-policy and replayed updates of both processes,
//! target-network smoothing, local search and periodic evaluation.

mod config;

use std::time::Instant;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::energies::{build_energy, EnergyError, EnergySpec};
use crate::grad::{adam_step, AdamConfig, Checkpoint, GradError, Gradients, OptimState, Tape};
use crate::kernels::{sample_backward, sample_forward, ForwardOptions, KernelError, TrajectoryBatch};
use crate::metrics::{evaluate, MetricsError, MetricsReport, DIVERGENCE_FRACTION};
use crate::objectives::{revkl_loss, DestrLoss, GenLoss, LossConfig, LossContext, LossError, LossOutput};
use crate::policy::{ModelError, SamplerModel, Side};
use crate::replay::{PerBuffer, ReplayError, TerminalBuffer};
use crate::rng::{stream, streams, SeededRng};
use crate::schedule::{Schedule, ScheduleError};

pub use config::{destr_lr_ratio, preset, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Diverged,
    Collapsed,
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RunStatus::Ok => "ok",
            RunStatus::Diverged => "diverged",
            RunStatus::Collapsed => "collapsed",
        })
    }
}

/// One line of the metrics log, written at every evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    pub loss_gen: f64,
    pub loss_destr: Option<f64>,
    pub logz_hat: f64,
    pub elbo: f64,
    pub elbo_se: f64,
    pub eubo: f64,
    pub eubo_se: f64,
    pub w2: Option<f64>,
    /// Fraction of the latest on-policy batch dropped as non-finite.
    pub diverged_frac: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub per_batches: usize,
    pub backward_batches: usize,
    pub refreshes: usize,
    pub gen_steps: usize,
    pub destr_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterStats {
    pub loss_gen: f64,
    pub loss_destr: Option<f64>,
    pub dropped_frac: f64,
}

/// Mutable state of a run.
pub struct RunState {
    pub config: TrainConfig,
    pub loss: LossConfig,
    pub energy: EnergySpec,
    pub schedule: Schedule,
    pub model: SamplerModel,
    /// Owns the generation slots, or every network slot with a single optimizer.
    pub gen_opt: OptimState,
    pub destr_opt: Option<OptimState>,
    pub logz_opt: OptimState,
    pub per: PerBuffer,
    pub terminal: Option<TerminalBuffer>,
    pub iter: usize,
    pub counters: Counters,
    rng_train: SeededRng,
    rng_replay: SeededRng,
    rng_ls: SeededRng,
}

/// How a replayed batch was produced.
enum ReplaySource {
    Per(Vec<u64>, Array1<f64>),
    Backward,
}

fn finite(what: &str, v: f64) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::Diverged(format!("non-finite {what}")))
    }
}

fn check_dropped(batch: &TrajectoryBatch, what: &str) -> Result<(), TrainError> {
    let f = batch.dropped_fraction();
    if f >= DIVERGENCE_FRACTION || batch.len() < 2 {
        return Err(TrainError::Diverged(format!("{:.1}% of {what} trajectories non-finite", 100.0 * f)));
    }
    Ok(())
}

fn grad_error(e: GradError) -> TrainError {
    match e {
        GradError::NonFinite { what, .. } => TrainError::Diverged(format!("non-finite {what}")),
        other => TrainError::Grad(other),
    }
}

impl RunState {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let energy = build_energy(config.energy, config.construction_seed);
        let schedule = Schedule::new(config.schedule, config.steps)?;
        let model = SamplerModel::new(config.net_config(), config.seed)?;
        Self::with_model(config, energy, schedule, model)
    }

    /// A fresh run around an existing model (for example one restored from a
    /// checkpoint). Optimizer moments start at zero.
    pub fn with_model(
        config: TrainConfig,
        energy: EnergySpec,
        schedule: Schedule,
        model: SamplerModel,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let loss = config.loss_config();
        let adam = |lr: f64| AdamConfig::new(lr).with_gamma(config.lr_decay).with_weight_decay(config.weight_decay);
        let learns_destr = loss.destr_loss != DestrLoss::None;
        let (gen_opt, destr_opt) = if config.single_optimizer {
            let mut slots = model.gen_slots();
            if learns_destr {
                for s in model.destr_slots() {
                    if !slots.contains(&s) {
                        slots.push(s);
                    }
                }
            }
            (OptimState::new(adam(config.lr_gen), &model.params, slots), None)
        } else {
            let destr = learns_destr.then(|| OptimState::new(adam(config.lr_destr()), &model.params, model.destr_slots()));
            (OptimState::new(adam(config.lr_gen), &model.params, model.gen_slots()), destr)
        };
        let logz_opt = OptimState::new(
            AdamConfig::new(config.lr_logz).with_gamma(config.lr_decay).with_weight_decay(0.0),
            &model.params,
            vec![model.log_z_slot()],
        );
        let terminal = if config.local_search {
            Some(TerminalBuffer::new(energy.dim, config.ls.capacity)?)
        } else {
            None
        };
        Ok(Self {
            per: PerBuffer::new(config.per)?,
            rng_train: stream(config.seed, streams::TRAIN),
            rng_replay: stream(config.seed, streams::REPLAY),
            rng_ls: stream(config.seed, streams::LOCAL_SEARCH),
            loss,
            energy,
            schedule,
            model,
            gen_opt,
            destr_opt,
            logz_opt,
            terminal,
            iter: 0,
            counters: Counters::default(),
            config,
        })
    }

    fn ctx(&self) -> LossContext<'_> {
        LossContext {
            model: &self.model,
            schedule: &self.schedule,
            sigma2: self.config.sigma2,
            use_target_nets: self.loss.use_target_nets,
        }
    }

    fn learns_destr(&self) -> bool {
        self.loss.destr_loss != DestrLoss::None
    }

    /// Destruction loss on `batch` with its gradients.
    fn destr_grads(
        &self,
        batch: &TrajectoryBatch,
        weights: Option<&Array1<f64>>,
    ) -> Result<Option<(LossOutput, f64, Gradients)>, TrainError> {
        let ctx = self.ctx();
        let tape = Tape::new();
        let out = match self.loss.destr_loss {
            DestrLoss::None => return Ok(None),
            DestrLoss::Tb => ctx.graph(Side::Destr).tb(&tape, batch, weights)?,
            DestrLoss::VarGrad => ctx.graph(Side::Destr).vargrad(&tape, batch, weights)?,
            DestrLoss::Tlm => ctx.graph(Side::Destr).tlm(&tape, batch, weights)?,
        };
        let value = finite("destruction loss", tape.scalar(out.loss))?;
        let grads = tape.backward(out.loss).map_err(grad_error)?;
        Ok(Some((out, value, grads)))
    }

    fn gen_tb_grads(
        &self,
        batch: &TrajectoryBatch,
        weights: Option<&Array1<f64>>,
    ) -> Result<(LossOutput, f64, Gradients), TrainError> {
        let tape = Tape::new();
        let out = self.ctx().graph(Side::Gen).tb(&tape, batch, weights)?;
        let value = finite("generation loss", tape.scalar(out.loss))?;
        let grads = tape.backward(out.loss).map_err(grad_error)?;
        Ok((out, value, grads))
    }

    fn step(&mut self, which: Side) -> Result<(), TrainError> {
        let clip = Some(self.config.grad_clip);
        let opt = match which {
            Side::Gen => &mut self.gen_opt,
            Side::Destr => match self.destr_opt.as_mut() {
                Some(o) => o,
                None => return Ok(()),
            },
        };
        if self.model.params.fill_missing_grads(opt.slots()) {
            adam_step(&mut self.model.params, opt, clip).map_err(grad_error)?;
            match which {
                Side::Gen => self.counters.gen_steps += 1,
                Side::Destr => self.counters.destr_steps += 1,
            }
        }
        if which == Side::Gen {
            let slots = self.logz_opt.slots().to_vec();
            if self.model.params.grad(slots[0]).is_some() {
                adam_step(&mut self.model.params, &mut self.logz_opt, clip).map_err(grad_error)?;
            }
        }
        Ok(())
    }

    /// Generation then destruction update on one batch. With a single
    /// optimizer both losses are evaluated first and their gradients summed.
    /// Returns the losses and the residuals used as replay priorities.
    fn update_on_batch(
        &mut self,
        batch: &TrajectoryBatch,
        weights: Option<&Array1<f64>>,
        train_gen: bool,
    ) -> Result<(Option<f64>, Option<f64>, Option<Array1<f64>>), TrainError> {
        let mut loss_gen = None;
        let mut loss_destr = None;
        let mut residuals = None;
        if self.config.single_optimizer {
            self.model.params.zero_grad();
            if train_gen {
                let (out, v, g) = self.gen_tb_grads(batch, weights)?;
                self.model.params.accumulate(&g);
                loss_gen = Some(v);
                residuals = Some(out.residuals);
            }
            if let Some((out, v, g)) = self.destr_grads(batch, weights)? {
                self.model.params.accumulate(&g);
                loss_destr = Some(v);
                residuals.get_or_insert(out.residuals);
            }
            self.step(Side::Gen)?;
            return Ok((loss_gen, loss_destr, residuals));
        }
        if train_gen {
            let (out, v, g) = self.gen_tb_grads(batch, weights)?;
            self.model.params.zero_grad();
            self.model.params.accumulate(&g);
            self.step(Side::Gen)?;
            loss_gen = Some(v);
            residuals = Some(out.residuals);
        }
        if let Some((out, v, g)) = self.destr_grads(batch, weights)? {
            self.model.params.zero_grad();
            self.model.params.accumulate(&g);
            self.step(Side::Destr)?;
            loss_destr = Some(v);
            residuals.get_or_insert(out.residuals);
        }
        Ok((loss_gen, loss_destr, residuals))
    }

    /// One training iteration.
    pub fn iteration(&mut self) -> Result<IterStats, TrainError> {
        let cfg = self.config.clone();
        let gen_tb = self.loss.gen_loss == GenLoss::Tb;

        // On-policy batch and updates.
        let (batch, loss_gen, loss_destr, residuals) = if gen_tb {
            let opts = ForwardOptions { sigma2: cfg.sigma2, explore: cfg.exploration_at(self.iter), record_noise: false };
            let batch = sample_forward(&self.model, &self.energy, &self.schedule, opts, cfg.batch_size, &mut self.rng_train)?;
            check_dropped(&batch, "on-policy")?;
            let (lg, ld, res) = self.update_on_batch(&batch, None, true)?;
            (batch, lg.expect("generation loss"), ld, res)
        } else {
            let tape = Tape::new();
            let ctx = LossContext {
                model: &self.model,
                schedule: &self.schedule,
                sigma2: cfg.sigma2,
                use_target_nets: self.loss.use_target_nets,
            };
            let out = revkl_loss(&tape, &ctx, &self.energy, cfg.batch_size, &mut self.rng_train)?;
            let value = finite("reverse-KL loss", tape.scalar(out.loss))?;
            let grads = tape.backward(out.loss).map_err(grad_error)?;
            drop(tape);
            self.model.params.zero_grad();
            self.model.params.accumulate(&grads);
            let (ld, res) = if cfg.single_optimizer {
                let destr = self.destr_grads(&out.batch, None)?;
                let (ld, res) = match destr {
                    Some((o, v, g)) => {
                        self.model.params.accumulate(&g);
                        (Some(v), Some(o.residuals))
                    }
                    None => (None, None),
                };
                self.step(Side::Gen)?;
                (ld, res)
            } else {
                self.step(Side::Gen)?;
                let (_, ld, res) = self.update_on_batch(&out.batch, None, false)?;
                (ld, res)
            };
            (out.batch, value, ld, res)
        };

        // Replayed and backward-sampled updates.
        let replay_consumer = gen_tb || self.learns_destr();
        if replay_consumer {
            for r in 0..cfg.replay_ratio {
                let use_per = r % 2 == 0 || self.terminal.is_none();
                let (replayed, source) = if use_per {
                    if self.per.is_empty() {
                        continue;
                    }
                    let s = self.per.sample(cfg.batch_size, &mut self.rng_replay)?;
                    self.counters.per_batches += 1;
                    (s.batch, ReplaySource::Per(s.ids, s.weights))
                } else {
                    let terminal = self.terminal.as_ref().expect("checked");
                    if terminal.is_empty() {
                        continue;
                    }
                    let x1 = terminal.sample(cfg.batch_size, &mut self.rng_replay)?;
                    let b = sample_backward(&self.model, &self.energy, &x1, &self.schedule, cfg.sigma2, &mut self.rng_replay)?;
                    check_dropped(&b, "backward")?;
                    self.counters.backward_batches += 1;
                    (b, ReplaySource::Backward)
                };
                let weights = match &source {
                    ReplaySource::Per(_, w) => Some(w.clone()),
                    ReplaySource::Backward => None,
                };
                let (_, _, res) = self.update_on_batch(&replayed, weights.as_ref(), gen_tb)?;
                if let (ReplaySource::Per(ids, _), Some(res)) = (&source, res) {
                    let floor = cfg.per.priority_floor;
                    let pr: Vec<f64> = res.iter().map(|r| r * r + floor).collect();
                    if pr.iter().all(|p| p.is_finite()) {
                        self.per.update(ids, &pr)?;
                    }
                }
            }
        }

        if self.loss.use_target_nets {
            self.model.snapshot_targets(self.loss.target_tau)?;
        }

        if replay_consumer && cfg.replay_ratio > 0 {
            if let Some(res) = &residuals {
                if res.iter().all(|r| r.is_finite()) {
                    self.per.insert_batch(&batch, res)?;
                }
            }
        }
        if let Some(terminal) = self.terminal.as_mut() {
            terminal.insert(batch.terminal(), &batch.energy)?;
        }

        self.iter += 1;
        if let Some(terminal) = self.terminal.as_mut() {
            if self.iter % cfg.ls.interval == 0 {
                terminal.langevin_refresh(&self.energy, cfg.ls.step_scale * cfg.sigma2, cfg.ls.steps, &mut self.rng_ls)?;
                self.counters.refreshes += 1;
            }
        }

        self.gen_opt.decay_lr();
        if let Some(o) = self.destr_opt.as_mut() {
            o.decay_lr();
        }
        self.logz_opt.decay_lr();

        Ok(IterStats { loss_gen, loss_destr, dropped_frac: batch.dropped_fraction() })
    }

    /// Evaluation seed for the current iteration.
    fn eval_seed(&self) -> u64 {
        self.config.seed.wrapping_mul(1_000_003).wrapping_add(self.iter as u64)
    }

    pub fn evaluate(&self) -> Result<MetricsReport, TrainError> {
        let cfg = &self.config;
        let ev = evaluate(
            &self.model,
            &self.energy,
            &self.schedule,
            cfg.sigma2,
            cfg.eval_samples,
            self.eval_seed(),
            cfg.eval_w2,
        )
        .map_err(|e| match e {
            MetricsError::Divergent { .. } => TrainError::Diverged(e.to_string()),
            other => TrainError::Metrics(other),
        })?;
        Ok(ev.report)
    }

    /// Model weights, targets and the config.
    pub fn checkpoint(&self) -> Checkpoint {
        model_checkpoint(&self.config, &self.model, self.iter)
    }
}

/// Checkpoint of `model` trained under `config` for `iter` iterations.
pub fn model_checkpoint(config: &TrainConfig, model: &SamplerModel, iter: usize) -> Checkpoint {
    let meta = serde_json::json!({
        "config": serde_json::to_value(config).expect("config serialises"),
        "iter": iter,
    });
    let mut ck = Checkpoint::new(meta);
    ck.add_store("online", &model.params);
    ck.add_store("target", &model.target);
    ck
}

/// Config and model stored in a checkpoint written by [`RunState::checkpoint`].
pub fn load_checkpoint(ck: &Checkpoint) -> Result<(TrainConfig, SamplerModel), TrainError> {
    let config: TrainConfig = serde_json::from_value(ck.meta["config"].clone())
        .map_err(|e| TrainError::Config(format!("checkpoint config: {e}")))?;
    let mut model = SamplerModel::new(config.net_config(), config.seed)?;
    ck.restore_store("online", &mut model.params)?;
    ck.restore_store("target", &mut model.target)?;
    Ok((config, model))
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub status: RunStatus,
    /// Why the run diverged, if it did.
    pub reason: Option<String>,
    /// Average of the last `eval_average` evaluations.
    pub final_metrics: Option<MetricsReport>,
    pub records: Vec<MetricsRecord>,
    pub state: RunState,
}

/// Averages of the given reports; standard errors combine in quadrature.
pub fn average_reports(reports: &[MetricsReport]) -> Option<MetricsReport> {
    let first = *reports.first()?;
    let k = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    let se = |f: fn(&MetricsReport) -> f64| reports.iter().map(|r| f(r).powi(2)).sum::<f64>().sqrt() / k;
    let w2 = if reports.iter().all(|r| r.w2.is_some()) {
        Some(reports.iter().map(|r| r.w2.unwrap()).sum::<f64>() / k)
    } else {
        None
    };
    Some(MetricsReport {
        elbo: mean(|r| r.elbo),
        elbo_se: se(|r| r.elbo_se),
        eubo: mean(|r| r.eubo),
        eubo_se: se(|r| r.eubo_se),
        elbo_gap: mean(|r| r.elbo_gap),
        eubo_gap: mean(|r| r.eubo_gap),
        w2,
        logz_hat: mean(|r| r.logz_hat),
        n_samples: first.n_samples,
        seed: first.seed,
    })
}

impl RunState {
    /// Runs the remaining iterations, evaluating every `eval_interval`
    /// iterations and at the end. `on_record` sees each metrics record.
    pub fn run(mut self, on_record: &mut dyn FnMut(&MetricsRecord)) -> Result<TrainOutcome, TrainError> {
        let start = Instant::now();
        let mut records = Vec::new();
        let mut reports = Vec::new();
        let mut last;
        let total = self.config.iterations;
        let diverged = |state: RunState, records, reason: String| {
            Ok(TrainOutcome { status: RunStatus::Diverged, reason: Some(reason), final_metrics: None, records, state })
        };
        while self.iter < total {
            match self.iteration() {
                Ok(s) => last = s,
                Err(TrainError::Diverged(reason)) => return diverged(self, records, reason),
                Err(e) => return Err(e),
            }
            if self.iter % self.config.eval_interval == 0 || self.iter == total {
                let report = match self.evaluate() {
                    Ok(r) => r,
                    Err(TrainError::Diverged(reason)) => return diverged(self, records, reason),
                    Err(e) => return Err(e),
                };
                let rec = MetricsRecord {
                    iter: self.iter,
                    loss_gen: last.loss_gen,
                    loss_destr: last.loss_destr,
                    logz_hat: self.model.log_z(),
                    elbo: report.elbo,
                    elbo_se: report.elbo_se,
                    eubo: report.eubo,
                    eubo_se: report.eubo_se,
                    w2: report.w2,
                    diverged_frac: last.dropped_frac,
                    wall_ms: start.elapsed().as_millis() as u64,
                };
                on_record(&rec);
                records.push(rec);
                reports.push(report);
            }
        }
        let k = self.config.eval_average.min(reports.len());
        let final_metrics = average_reports(&reports[reports.len() - k..]);
        let status = match &final_metrics {
            Some(m) if m.elbo < self.energy.log_partition() - self.config.collapse_margin => RunStatus::Collapsed,
            _ => RunStatus::Ok,
        };
        Ok(TrainOutcome { status, reason: None, final_metrics, records, state: self })
    }
}

/// Builds the run state for `config` and trains it to completion.
pub fn train(config: TrainConfig, on_record: &mut dyn FnMut(&MetricsRecord)) -> Result<TrainOutcome, TrainError> {
    RunState::new(config)?.run(on_record)
}
