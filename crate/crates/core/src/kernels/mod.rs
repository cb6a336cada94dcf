//! Gaussian transition kernels of the generation and destruction processes,
//! path sampling in both directions, and path log-density accounting.
//!
//! Generation: `X_{t+Δt} ~ N(X_t + f_θ Δt, γ_θ σ² Δt)`.
//! Destruction: `X_t ~ N(α_φ r X_{t+Δt}, β_φ r σ² Δt)` with `r = t / (t+Δt)`,
//! the networks evaluated at `(X_{t+Δt}, t+Δt)`. The destruction step into
//! `X_0` is a Dirac mass at the origin and contributes 0 to every log-density.

mod softrl;
mod trajectory;

use ndarray::{Array1, Array2, Zip};

use crate::energies::EnergySpec;
use crate::grad::{Binder, Tape, Var};
use crate::policy::{ModelError, SamplerModel, Side};
use crate::rng::{normal_matrix, SeededRng};
use crate::schedule::Schedule;

pub use softrl::DiffusionMdp;
pub use trajectory::{Provenance, Trajectory, TrajectoryBatch};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, thiserror::Error)]
pub enum KernelError {
    #[error("invalid step: {0}")]
    InvalidStep(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Diagonal Gaussian kernel parameters, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub mean: Array2<f64>,
    pub var: Array2<f64>,
}

impl KernelParams {
    /// Row-wise `log N(x; mean, diag(var))`.
    pub fn log_density(&self, x: &Array2<f64>) -> Array1<f64> {
        let mut out = Array1::zeros(x.nrows());
        Zip::from(&mut out)
            .and(x.rows())
            .and(self.mean.rows())
            .and(self.var.rows())
            .for_each(|o, xr, mr, vr| {
                let mut acc = 0.0;
                for ((&xi, &mi), &vi) in xr.iter().zip(mr.iter()).zip(vr.iter()) {
                    let d = xi - mi;
                    acc += d * d / vi + vi.ln() + LN_2PI;
                }
                *o = -0.5 * acc;
            });
        out
    }
}

/// Column of per-block constants expanded to `(blocks * n) x d`.
fn block_constant(values: &[f64], n: usize, d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((values.len() * n, d));
    for (k, &v) in values.iter().enumerate() {
        out.slice_mut(ndarray::s![k * n..(k + 1) * n, ..]).fill(v);
    }
    out
}

/// Generation kernel on the tape for `x` split into blocks at `times`, with
/// step widths `widths`. Returns `(mean, var)`.
pub fn fwd_params_var(
    model: &SamplerModel,
    tape: &Tape,
    b: &Binder<'_>,
    x: Var,
    times: &[f64],
    widths: &[f64],
    sigma2: f64,
) -> (Var, Var) {
    let (rows, d) = tape.shape(x);
    let n = rows / times.len();
    let feats = model.features(tape, b, Side::Gen, x, times);
    let (drift, gamma) = model.gen_outputs(tape, b, feats);
    let dt = tape.constant(block_constant(widths, n, d));
    let mean = tape.add(x, tape.mul(drift, dt));
    let scaled: Vec<f64> = widths.iter().map(|w| sigma2 * w).collect();
    let var = tape.mul(gamma, tape.constant(block_constant(&scaled, n, d)));
    (mean, var)
}

/// Destruction kernel on the tape for `x_next` split into blocks at the
/// strictly positive `times_next`, stepping back by `widths`.
pub fn bwd_params_var(
    model: &SamplerModel,
    tape: &Tape,
    b: &Binder<'_>,
    x_next: Var,
    times_next: &[f64],
    widths: &[f64],
    sigma2: f64,
) -> (Var, Var) {
    let (rows, d) = tape.shape(x_next);
    let n = rows / times_next.len();
    let ratios: Vec<f64> = times_next.iter().zip(widths).map(|(&tn, &w)| (tn - w).max(0.0) / tn).collect();
    let (alpha, beta) = if model.config.learn_destruction {
        let feats = model.features(tape, b, Side::Destr, x_next, times_next);
        model.destr_outputs(tape, b, feats)
    } else {
        let ones = tape.constant(Array2::ones((rows, d)));
        (ones, ones)
    };
    let mean = tape.mul(alpha, tape.mul(x_next, tape.constant(block_constant(&ratios, n, d))));
    let scaled: Vec<f64> = ratios.iter().zip(widths).map(|(r, w)| r * sigma2 * w).collect();
    let var = tape.mul(beta, tape.constant(block_constant(&scaled, n, d)));
    (mean, var)
}

/// Tape handles for the log-densities of a batch of complete paths.
pub struct PathLogProbs {
    /// `(T n) x 1`, time-major.
    pub pf_steps: Var,
    /// `((T-1) n) x 1` for the stochastic destruction steps; `None` if `T = 1`.
    pub pb_steps: Option<Var>,
    /// Per-path sums, `n x 1`.
    pub pf: Var,
    pub pb: Var,
}

/// Log-densities of the paths in `states` (time-major `((T+1) n) x d`),
/// generation side bound through `gen`, destruction side through `destr`.
pub fn path_log_probs(
    model: &SamplerModel,
    tape: &Tape,
    gen: &Binder<'_>,
    destr: &Binder<'_>,
    states: Var,
    schedule: &Schedule,
    sigma2: f64,
) -> PathLogProbs {
    let pf_steps = gen_log_probs(model, tape, gen, states, schedule, sigma2);
    let t = schedule.steps();
    let n = tape.shape(states).0 / (t + 1);
    let pf = tape.sum_row_blocks(pf_steps, t);
    let (pb_steps, pb) = match destr_log_probs(model, tape, destr, states, schedule, sigma2) {
        Some(steps) => (Some(steps), tape.sum_row_blocks(steps, t - 1)),
        None => (None, tape.constant(Array2::zeros((n, 1)))),
    };
    PathLogProbs { pf_steps, pb_steps, pf, pb }
}

/// Per-step generation log-densities, `(T n) x 1`.
pub fn gen_log_probs(
    model: &SamplerModel,
    tape: &Tape,
    gen: &Binder<'_>,
    states: Var,
    schedule: &Schedule,
    sigma2: f64,
) -> Var {
    let t = schedule.steps();
    let rows = tape.shape(states).0;
    assert_eq!(rows % (t + 1), 0, "states must hold T+1 blocks");
    let n = rows / (t + 1);
    let prev = tape.slice_rows(states, 0, t * n);
    let next = tape.slice_rows(states, n, rows);
    let (mean, var) = fwd_params_var(model, tape, gen, prev, &schedule.times[..t], &schedule.widths, sigma2);
    tape.gauss_log_pdf(next, mean, var)
}

/// Per-step destruction log-densities of the stochastic steps, `((T-1) n) x 1`.
pub fn destr_log_probs(
    model: &SamplerModel,
    tape: &Tape,
    destr: &Binder<'_>,
    states: Var,
    schedule: &Schedule,
    sigma2: f64,
) -> Option<Var> {
    let t = schedule.steps();
    if t < 2 {
        return None;
    }
    let rows = tape.shape(states).0;
    let n = rows / (t + 1);
    let cur = tape.slice_rows(states, n, t * n);
    let next = tape.slice_rows(states, 2 * n, rows);
    let (mean, var) =
        bwd_params_var(model, tape, destr, next, &schedule.times[2..], &schedule.widths[1..], sigma2);
    Some(tape.gauss_log_pdf(cur, mean, var))
}

fn check_rows(x: &Array2<f64>, dim: usize) -> Result<(), KernelError> {
    if x.ncols() != dim {
        return Err(KernelError::Shape(format!("expected {dim} columns, got {}", x.ncols())));
    }
    Ok(())
}

/// Online generation kernel at `(x_t, t)` with step `dt`.
pub fn fwd_params(
    model: &SamplerModel,
    x: &Array2<f64>,
    t: f64,
    dt: f64,
    sigma2: f64,
) -> Result<KernelParams, KernelError> {
    if !(dt > 0.0) {
        return Err(KernelError::InvalidStep(format!("dt must be positive, got {dt}")));
    }
    check_rows(x, model.config.dim)?;
    let tape = Tape::new();
    let b = Binder::frozen(&model.params);
    let (mean, var) = fwd_params_var(model, &tape, &b, tape.constant(x.clone()), &[t], &[dt], sigma2);
    let out = KernelParams { mean: tape.value(mean).clone(), var: tape.value(var).clone() };
    if out.mean.iter().chain(out.var.iter()).any(|v| !v.is_finite()) {
        return Err(KernelError::NonFinite("generation kernel parameters"));
    }
    Ok(out)
}

/// Online destruction kernel from `(x_next, t_next)` back by `dt`. `None`
/// is the Dirac step into the origin (`t_next - dt = 0`).
pub fn bwd_params(
    model: &SamplerModel,
    x_next: &Array2<f64>,
    t_next: f64,
    dt: f64,
    sigma2: f64,
) -> Result<Option<KernelParams>, KernelError> {
    if !(t_next > 0.0) {
        return Err(KernelError::InvalidStep(format!("t_next must be positive, got {t_next}")));
    }
    if !(dt > 0.0) || t_next - dt < -1e-12 {
        return Err(KernelError::InvalidStep(format!("need 0 < dt <= t_next, got dt={dt}, t_next={t_next}")));
    }
    check_rows(x_next, model.config.dim)?;
    if t_next - dt <= 1e-12 {
        return Ok(None);
    }
    let tape = Tape::new();
    let b = Binder::frozen(&model.params);
    let (mean, var) = bwd_params_var(model, &tape, &b, tape.constant(x_next.clone()), &[t_next], &[dt], sigma2);
    let out = KernelParams { mean: tape.value(mean).clone(), var: tape.value(var).clone() };
    if out.mean.iter().chain(out.var.iter()).any(|v| !v.is_finite()) {
        return Err(KernelError::NonFinite("destruction kernel parameters"));
    }
    Ok(Some(out))
}

fn has_non_finite(a: &Array2<f64>) -> bool {
    a.iter().any(|v| !v.is_finite())
}

/// Non-gradient forward kernel that tolerates non-finite rows.
fn fwd_params_raw(model: &SamplerModel, x: &Array2<f64>, t: f64, dt: f64, sigma2: f64) -> KernelParams {
    let tape = Tape::new();
    let b = Binder::frozen(&model.params);
    let (mean, var) = fwd_params_var(model, &tape, &b, tape.constant(x.clone()), &[t], &[dt], sigma2);
    let out = KernelParams { mean: tape.value(mean).clone(), var: tape.value(var).clone() };
    drop(tape);
    out
}

fn bwd_params_raw(model: &SamplerModel, x: &Array2<f64>, t_next: f64, dt: f64, sigma2: f64) -> KernelParams {
    let tape = Tape::new();
    let b = Binder::frozen(&model.params);
    let (mean, var) = bwd_params_var(model, &tape, &b, tape.constant(x.clone()), &[t_next], &[dt], sigma2);
    let out = KernelParams { mean: tape.value(mean).clone(), var: tape.value(var).clone() };
    drop(tape);
    out
}

/// Online per-step log-densities of complete paths: `(log_pf, log_pb)`,
/// each `n x T`, with the Dirac column 0 of `log_pb` set to 0.
pub fn evaluate_log_probs(
    model: &SamplerModel,
    states: &[Array2<f64>],
    schedule: &Schedule,
    sigma2: f64,
) -> (Array2<f64>, Array2<f64>) {
    let t = schedule.steps();
    let n = states[0].nrows();
    let mut log_pf = Array2::zeros((n, t));
    let mut log_pb = Array2::zeros((n, t));
    for k in 0..t {
        let p = fwd_params_raw(model, &states[k], schedule.times[k], schedule.widths[k], sigma2);
        log_pf.column_mut(k).assign(&p.log_density(&states[k + 1]));
        if k > 0 {
            let q = bwd_params_raw(model, &states[k + 1], schedule.times[k + 1], schedule.widths[k], sigma2);
            log_pb.column_mut(k).assign(&q.log_density(&states[k]));
        }
    }
    (log_pf, log_pb)
}

/// Forward sampling settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub sigma2: f64,
    /// Exploration scale `s`: the behaviour variance adds `s² σ² Δt`.
    pub explore: f64,
    pub record_noise: bool,
}

/// Samples `n` paths from the online generation process, optionally with
/// extra exploration variance. The recorded `log_pf` is always under the
/// model variance. Rows that become non-finite are dropped and counted.
pub fn sample_forward(
    model: &SamplerModel,
    energy: &EnergySpec,
    schedule: &Schedule,
    opts: ForwardOptions,
    n: usize,
    rng: &mut SeededRng,
) -> Result<TrajectoryBatch, KernelError> {
    if !(opts.explore >= 0.0) {
        return Err(KernelError::InvalidStep(format!("exploration scale must be non-negative, got {}", opts.explore)));
    }
    let d = model.config.dim;
    let t = schedule.steps();
    let mut states = Vec::with_capacity(t + 1);
    states.push(Array2::zeros((n, d)));
    let mut log_pf = Array2::zeros((n, t));
    let mut noise = Vec::with_capacity(t);
    for k in 0..t {
        let dt = schedule.widths[k];
        let p = fwd_params_raw(model, &states[k], schedule.times[k], dt, opts.sigma2);
        let xi = normal_matrix(rng, n, d);
        let extra = opts.explore * opts.explore * opts.sigma2 * dt;
        let mut next = p.var.mapv(|v| (v + extra).sqrt());
        next *= &xi;
        next += &p.mean;
        log_pf.column_mut(k).assign(&p.log_density(&next));
        states.push(next);
        if opts.record_noise {
            noise.push(xi);
        }
    }
    let mut log_pb = Array2::zeros((n, t));
    for k in 1..t {
        let q = bwd_params_raw(model, &states[k + 1], schedule.times[k + 1], schedule.widths[k], opts.sigma2);
        log_pb.column_mut(k).assign(&q.log_density(&states[k]));
    }
    let energy_vals = energy.energy_batch(states.last().expect("terminal state"));
    let provenance = if opts.explore > 0.0 { Provenance::Explore } else { Provenance::OnPolicy };
    let batch = TrajectoryBatch {
        states,
        log_pf,
        log_pb,
        energy: energy_vals,
        noise: opts.record_noise.then_some(noise),
        provenance,
        dropped: 0,
    };
    Ok(batch.drop_non_finite())
}

/// Samples paths backward from the terminal states `x1` through the online
/// destruction process, then evaluates the generation log-densities.
pub fn sample_backward(
    model: &SamplerModel,
    energy: &EnergySpec,
    x1: &Array2<f64>,
    schedule: &Schedule,
    sigma2: f64,
    rng: &mut SeededRng,
) -> Result<TrajectoryBatch, KernelError> {
    check_rows(x1, model.config.dim)?;
    if has_non_finite(x1) {
        return Err(KernelError::NonFinite("terminal states"));
    }
    let (n, d) = x1.dim();
    let t = schedule.steps();
    let mut states = vec![Array2::zeros((n, d)); t + 1];
    states[t] = x1.clone();
    let mut log_pb = Array2::zeros((n, t));
    for k in (1..t).rev() {
        let q = bwd_params_raw(model, &states[k + 1], schedule.times[k + 1], schedule.widths[k], sigma2);
        let xi = normal_matrix(rng, n, d);
        let mut x = q.var.mapv(f64::sqrt);
        x *= &xi;
        x += &q.mean;
        log_pb.column_mut(k).assign(&q.log_density(&x));
        states[k] = x;
    }
    let mut log_pf = Array2::zeros((n, t));
    for k in 0..t {
        let p = fwd_params_raw(model, &states[k], schedule.times[k], schedule.widths[k], sigma2);
        log_pf.column_mut(k).assign(&p.log_density(&states[k + 1]));
    }
    let batch = TrajectoryBatch {
        energy: energy.energy_batch(x1),
        states,
        log_pf,
        log_pb,
        noise: None,
        provenance: Provenance::BackwardFromBuffer,
        dropped: 0,
    };
    Ok(batch.drop_non_finite())
}

/// Reparametrised generation paths built on the tape so that the states
/// depend differentiably on the generation parameters bound through `gen`.
pub struct ReparamPaths {
    /// Time-major `((T+1) n) x d`.
    pub states: Var,
    /// Per-path `Σ log p_f`, `n x 1`.
    pub pf: Var,
    pub noise: Vec<Array2<f64>>,
}

pub fn sample_forward_reparam(
    model: &SamplerModel,
    tape: &Tape,
    gen: &Binder<'_>,
    schedule: &Schedule,
    sigma2: f64,
    n: usize,
    rng: &mut SeededRng,
) -> ReparamPaths {
    let d = model.config.dim;
    let mut x = tape.constant(Array2::zeros((n, d)));
    let mut blocks = vec![x];
    let mut pf: Option<Var> = None;
    let mut noise = Vec::with_capacity(schedule.steps());
    for k in 0..schedule.steps() {
        let (mean, var) =
            fwd_params_var(model, tape, gen, x, &schedule.times[k..=k], &schedule.widths[k..=k], sigma2);
        let xi = normal_matrix(rng, n, d);
        let next = tape.add(mean, tape.mul(tape.sqrt(var), tape.constant(xi.clone())));
        let lp = tape.gauss_log_pdf(next, mean, var);
        pf = Some(match pf {
            Some(acc) => tape.add(acc, lp),
            None => lp,
        });
        noise.push(xi);
        blocks.push(next);
        x = next;
    }
    ReparamPaths { states: tape.concat_rows(&blocks), pf: pf.expect("at least one step"), noise }
}

#[cfg(test)]
mod tests;
