//! Training losses and their gradient routing.
//!
//! A generation-side loss binds the generation trunk and head as trainable
//! and evaluates the destruction side under the frozen target copy (or the
//! frozen online weights when target networks are off). Destruction-side
//! losses do the converse. `log Ẑ` is trainable only in the generation-side
//! trajectory-balance loss.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::energies::EnergySpec;
use crate::grad::{BindMode, Binder, ParamStore, Tape, Var};
use crate::kernels::{
    destr_log_probs, path_log_probs, sample_forward_reparam, Provenance, ReparamPaths, TrajectoryBatch,
};
use crate::policy::{SamplerModel, Side};
use crate::rng::SeededRng;
use crate::schedule::Schedule;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("VarGrad needs at least 2 trajectories, got {0}")]
    BatchTooSmall(usize),
    #[error("reverse-KL loss needs reparametrised paths")]
    NotReparametrized,
    #[error("weights have length {got}, batch has {expected}")]
    WeightLength { expected: usize, got: usize },
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenLoss {
    Tb,
    RevKl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DestrLoss {
    None,
    Tb,
    VarGrad,
    Tlm,
}

impl fmt::Display for GenLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GenLoss::Tb => "tb",
            GenLoss::RevKl => "revkl",
        })
    }
}

impl fmt::Display for DestrLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DestrLoss::None => "none",
            DestrLoss::Tb => "tb",
            DestrLoss::VarGrad => "vargrad",
            DestrLoss::Tlm => "tlm",
        })
    }
}

impl FromStr for GenLoss {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tb" => Ok(GenLoss::Tb),
            "revkl" | "pis" => Ok(GenLoss::RevKl),
            _ => Err(LossError::InvalidConfig(format!("unknown generation loss {s:?}"))),
        }
    }
}

impl FromStr for DestrLoss {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "fixed" => Ok(DestrLoss::None),
            "tb" => Ok(DestrLoss::Tb),
            "vargrad" => Ok(DestrLoss::VarGrad),
            "tlm" => Ok(DestrLoss::Tlm),
            _ => Err(LossError::InvalidConfig(format!("unknown destruction loss {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub gen_loss: GenLoss,
    pub destr_loss: DestrLoss,
    pub use_target_nets: bool,
    pub target_tau: f64,
    pub logz_lr: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gen_loss: GenLoss::Tb, destr_loss: DestrLoss::Tb, use_target_nets: true, target_tau: 0.05, logz_lr: 0.1 }
    }
}

impl LossConfig {
    /// Accepts only the generation/destruction pairings of the method table.
    pub fn validate(&self) -> Result<(), LossError> {
        match (self.gen_loss, self.destr_loss) {
            (GenLoss::RevKl, DestrLoss::Tb) => Err(LossError::InvalidConfig(
                "revkl generation cannot be paired with tb destruction (Table 1): log Z is not learned \
                 under revkl, use vargrad or tlm"
                    .into(),
            )),
            (GenLoss::Tb, DestrLoss::VarGrad) => Err(LossError::InvalidConfig(
                "tb generation pairs with none, tb or tlm destruction (Table 1), not vargrad".into(),
            )),
            _ if !(0.0..=1.0).contains(&self.target_tau) => {
                Err(LossError::InvalidConfig(format!("target_tau must lie in [0, 1], got {}", self.target_tau)))
            }
            _ if !(self.logz_lr > 0.0) => {
                Err(LossError::InvalidConfig(format!("logz_lr must be positive, got {}", self.logz_lr)))
            }
            _ => Ok(()),
        }
    }
}

/// The eight named training methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    TbFixed,
    TbLearnedvar,
    TbTlm,
    TbBoth,
    PisFixed,
    PisLearnedvar,
    PisTlm,
    PisVargrad,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::TbFixed,
        Method::TbLearnedvar,
        Method::TbTlm,
        Method::TbBoth,
        Method::PisFixed,
        Method::PisLearnedvar,
        Method::PisTlm,
        Method::PisVargrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::TbFixed => "tb-fixed",
            Method::TbLearnedvar => "tb-learnedvar",
            Method::TbTlm => "tb-tlm",
            Method::TbBoth => "tb-both",
            Method::PisFixed => "pis-fixed",
            Method::PisLearnedvar => "pis-learnedvar",
            Method::PisTlm => "pis-tlm",
            Method::PisVargrad => "pis-vargrad",
        }
    }

    pub fn gen_loss(self) -> GenLoss {
        match self {
            Method::TbFixed | Method::TbLearnedvar | Method::TbTlm | Method::TbBoth => GenLoss::Tb,
            _ => GenLoss::RevKl,
        }
    }

    pub fn destr_loss(self) -> DestrLoss {
        match self {
            Method::TbTlm | Method::PisTlm => DestrLoss::Tlm,
            Method::TbBoth => DestrLoss::Tb,
            Method::PisVargrad => DestrLoss::VarGrad,
            _ => DestrLoss::None,
        }
    }

    /// Whether the generation variance correction `γ` is learned.
    pub fn learns_gen_var(self) -> bool {
        !matches!(self, Method::TbFixed | Method::PisFixed)
    }

    pub fn learns_destruction(self) -> bool {
        self.destr_loss() != DestrLoss::None
    }

    pub fn loss_config(self) -> LossConfig {
        LossConfig { gen_loss: self.gen_loss(), destr_loss: self.destr_loss(), ..LossConfig::default() }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Method::ALL.into_iter().find(|m| m.name() == lower).ok_or_else(|| {
            let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
            LossError::InvalidConfig(format!("unknown method {s:?}, expected one of {}", names.join(", ")))
        })
    }
}

/// Everything a loss needs besides the batch.
#[derive(Clone, Copy)]
pub struct LossContext<'a> {
    pub model: &'a SamplerModel,
    pub schedule: &'a Schedule,
    pub sigma2: f64,
    pub use_target_nets: bool,
}

impl<'a> LossContext<'a> {
    /// Store evaluated on the side that is not being trained.
    pub fn frozen_store(&self) -> &'a ParamStore {
        if self.use_target_nets {
            &self.model.target
        } else {
            &self.model.params
        }
    }

    /// Binders for a loss on `side`: trainable online weights on that side,
    /// frozen weights on the other. Binders cache tape nodes, so build a
    /// fresh graph per tape.
    pub fn graph(&self, side: Side) -> LossGraph<'a> {
        let online = Binder::trainable(&self.model.params);
        let frozen = Binder::frozen(self.frozen_store());
        let (gen, destr) = match side {
            Side::Gen => (online, frozen),
            Side::Destr => (frozen, online),
        };
        LossGraph { model: self.model, schedule: self.schedule, sigma2: self.sigma2, side, gen, destr }
    }
}

/// A scalar loss on the tape plus per-trajectory residuals (the quantities
/// squared or averaged by the loss), used as replay priorities.
pub struct LossOutput {
    pub loss: Var,
    pub residuals: Array1<f64>,
}

/// Result of the reverse-KL loss: the tape root and a detached copy of the
/// sampled paths for reuse by a destruction loss.
pub struct RevKlOutput {
    pub loss: Var,
    pub residuals: Array1<f64>,
    pub batch: TrajectoryBatch,
}

/// Loss construction with explicit binders.
pub struct LossGraph<'a> {
    pub model: &'a SamplerModel,
    pub schedule: &'a Schedule,
    pub sigma2: f64,
    pub side: Side,
    pub gen: Binder<'a>,
    pub destr: Binder<'a>,
}

fn check_batch(batch: &TrajectoryBatch, weights: Option<&Array1<f64>>) -> Result<(), LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if let Some(w) = weights {
        if w.len() != batch.len() {
            return Err(LossError::WeightLength { expected: batch.len(), got: w.len() });
        }
    }
    Ok(())
}

fn column(v: &Array1<f64>) -> Array2<f64> {
    v.clone().insert_axis(Axis(1))
}

fn weighted_mean(tape: &Tape, per_row: Var, weights: Option<&Array1<f64>>) -> Var {
    match weights {
        Some(w) => tape.mean(tape.mul(per_row, tape.constant(column(w)))),
        None => tape.mean(per_row),
    }
}

impl LossGraph<'_> {
    /// Per-row `Σ log p_f + E(X_1) - Σ log p_b`.
    fn log_ratio(&self, tape: &Tape, batch: &TrajectoryBatch) -> Var {
        let states = tape.constant(batch.stacked_states());
        let lp = path_log_probs(self.model, tape, &self.gen, &self.destr, states, self.schedule, self.sigma2);
        let energy = tape.constant(column(&batch.energy));
        tape.sub(tape.add(lp.pf, energy), lp.pb)
    }

    /// Trajectory balance: weighted mean of `(log_ratio + log Ẑ)²`. `log Ẑ` is
    /// bound through the generation binder on the generation side and is a
    /// constant on the destruction side.
    pub fn tb(&self, tape: &Tape, batch: &TrajectoryBatch, weights: Option<&Array1<f64>>) -> Result<LossOutput, LossError> {
        check_batch(batch, weights)?;
        let n = batch.len();
        let r0 = self.log_ratio(tape, batch);
        let log_z = match self.side {
            Side::Gen => self.gen.get(tape, self.model.log_z_slot()),
            Side::Destr => tape.scalar_constant(self.model.log_z()),
        };
        let r = tape.add(r0, tape.broadcast(log_z, n, 1));
        let residuals = tape.value(r).column(0).to_owned();
        Ok(LossOutput { loss: weighted_mean(tape, tape.square(r), weights), residuals })
    }

    /// VarGrad: weighted mean of squared deviations of the log-ratios from
    /// their unweighted batch mean.
    pub fn vargrad(&self, tape: &Tape, batch: &TrajectoryBatch, weights: Option<&Array1<f64>>) -> Result<LossOutput, LossError> {
        check_batch(batch, weights)?;
        let n = batch.len();
        if n < 2 {
            return Err(LossError::BatchTooSmall(n));
        }
        let r = self.log_ratio(tape, batch);
        let dev = tape.sub(r, tape.broadcast(tape.mean(r), n, 1));
        let residuals = tape.value(dev).column(0).to_owned();
        Ok(LossOutput { loss: weighted_mean(tape, tape.square(dev), weights), residuals })
    }

    /// Trajectory likelihood maximisation: weighted mean of `-Σ log p_b` with
    /// the states held fixed. Only the destruction binder is used.
    pub fn tlm(&self, tape: &Tape, batch: &TrajectoryBatch, weights: Option<&Array1<f64>>) -> Result<LossOutput, LossError> {
        check_batch(batch, weights)?;
        let n = batch.len();
        let t = self.schedule.steps();
        let states = tape.constant(batch.stacked_states());
        let nll = match destr_log_probs(self.model, tape, &self.destr, states, self.schedule, self.sigma2) {
            Some(steps) => tape.scale(tape.sum_row_blocks(steps, t - 1), -1.0),
            None => tape.constant(Array2::zeros((n, 1))),
        };
        let residuals = tape.value(nll).column(0).to_owned();
        Ok(LossOutput { loss: weighted_mean(tape, nll, weights), residuals })
    }

    /// Reverse KL up to `log Z`: mean over reparametrised paths of
    /// `Σ log p_f + E(X_1) - Σ log p_b`, differentiated through the
    /// simulation. The paths must have been built with `self.gen`.
    pub fn revkl(&self, tape: &Tape, energy: &EnergySpec, paths: &ReparamPaths) -> Result<RevKlOutput, LossError> {
        if self.gen.mode() == BindMode::Trainable && !tape.requires_grad(paths.states) {
            return Err(LossError::NotReparametrized);
        }
        let t = self.schedule.steps();
        let rows = tape.shape(paths.states).0;
        let n = rows / (t + 1);
        if n == 0 {
            return Err(LossError::EmptyBatch);
        }
        let pb_steps = destr_log_probs(self.model, tape, &self.destr, paths.states, self.schedule, self.sigma2);
        let terminal = tape.slice_rows(paths.states, t * n, rows);
        let (e, g) = energy.energy_and_grad_batch(&tape.value(terminal));
        let mut r = tape.add(paths.pf, tape.row_scalar(terminal, e.clone(), g));
        if let Some(steps) = pb_steps {
            r = tape.sub(r, tape.sum_row_blocks(steps, t - 1));
        }
        let residuals = tape.value(r).column(0).to_owned();

        let all = tape.value(paths.states).clone();
        let states = (0..=t).map(|k| all.slice(s![k * n..(k + 1) * n, ..]).to_owned()).collect();
        // Only per-path totals of log p_f are on the tape; they go in column 0.
        let mut log_pf = Array2::zeros((n, t));
        log_pf.column_mut(0).assign(&tape.value(paths.pf).column(0));
        let mut log_pb = Array2::zeros((n, t));
        if let Some(steps) = pb_steps {
            let v = tape.value(steps);
            for k in 1..t {
                log_pb.column_mut(k).assign(&v.slice(s![(k - 1) * n..k * n, 0]));
            }
        }
        let batch = TrajectoryBatch {
            states,
            log_pf,
            log_pb,
            energy: e.column(0).to_owned(),
            noise: Some(paths.noise.clone()),
            provenance: Provenance::OnPolicy,
            dropped: 0,
        };
        Ok(RevKlOutput { loss: tape.mean(r), residuals, batch })
    }
}

pub fn tb_loss(
    tape: &Tape,
    ctx: &LossContext<'_>,
    batch: &TrajectoryBatch,
    side: Side,
    weights: Option<&Array1<f64>>,
) -> Result<LossOutput, LossError> {
    ctx.graph(side).tb(tape, batch, weights)
}

pub fn vargrad_loss(
    tape: &Tape,
    ctx: &LossContext<'_>,
    batch: &TrajectoryBatch,
    side: Side,
    weights: Option<&Array1<f64>>,
) -> Result<LossOutput, LossError> {
    ctx.graph(side).vargrad(tape, batch, weights)
}

pub fn tlm_loss(
    tape: &Tape,
    ctx: &LossContext<'_>,
    batch: &TrajectoryBatch,
    weights: Option<&Array1<f64>>,
) -> Result<LossOutput, LossError> {
    ctx.graph(Side::Destr).tlm(tape, batch, weights)
}

/// Samples `n` reparametrised paths and builds the reverse-KL loss on them.
pub fn revkl_loss(
    tape: &Tape,
    ctx: &LossContext<'_>,
    energy: &EnergySpec,
    n: usize,
    rng: &mut SeededRng,
) -> Result<RevKlOutput, LossError> {
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    let g = ctx.graph(Side::Gen);
    let paths = sample_forward_reparam(ctx.model, tape, &g.gen, ctx.schedule, ctx.sigma2, n, rng);
    g.revkl(tape, energy, &paths)
}
