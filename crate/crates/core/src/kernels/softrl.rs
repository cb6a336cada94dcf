//! The sampler viewed as an entropy-regularised MDP.
//!
//! States and actions live in `R^d`, the transition is deterministic
//! (`next state = action`), the horizon is `T`. The step reward is the
//! destruction log-density of the current state given the action,
//! `r_h(s, a) = log p_b(s | a)`, and the terminal reward is `-E(s_T)`. The
//! policy at step `h` is the generation kernel. The soft return of a path
//! with temperature 1 is then exactly `-log_ratio(path, 0)`.

use ndarray::Array2;

use super::{bwd_params, fwd_params, KernelError, Trajectory};
use crate::energies::EnergySpec;
use crate::policy::SamplerModel;
use crate::schedule::Schedule;

pub struct DiffusionMdp<'a> {
    pub model: &'a SamplerModel,
    pub energy: &'a EnergySpec,
    pub schedule: &'a Schedule,
    pub sigma2: f64,
}

fn row(x: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector")
}

impl DiffusionMdp<'_> {
    pub fn horizon(&self) -> usize {
        self.schedule.steps()
    }

    /// `log π_h(a | s)`.
    pub fn policy_log_prob(&self, h: usize, s: &[f64], a: &[f64]) -> Result<f64, KernelError> {
        let p = fwd_params(self.model, &row(s), self.schedule.times[h], self.schedule.widths[h], self.sigma2)?;
        Ok(p.log_density(&row(a))[0])
    }

    /// `r_h(s, a) = log p_b(s | a)`; at `h = 0` the destruction step is the
    /// Dirac mass at the origin, whose density is taken to be 1.
    pub fn reward(&self, h: usize, s: &[f64], a: &[f64]) -> Result<f64, KernelError> {
        match bwd_params(self.model, &row(a), self.schedule.times[h + 1], self.schedule.widths[h], self.sigma2)? {
            Some(q) => Ok(q.log_density(&row(s))[0]),
            None if s.iter().all(|&v| v == 0.0) => Ok(0.0),
            None => Ok(f64::NEG_INFINITY),
        }
    }

    pub fn terminal_reward(&self, s: &[f64]) -> Result<f64, KernelError> {
        self.energy.energy(s).map(|e| -e).map_err(|_| KernelError::NonFinite("terminal state"))
    }

    /// `Σ_h [r_h(S_h, A_h) - log π_h(A_h | S_h)] + r_H(S_H)` along the path.
    pub fn soft_return(&self, path: &Trajectory) -> Result<f64, KernelError> {
        let h_max = self.horizon();
        if path.states.nrows() != h_max + 1 {
            return Err(KernelError::Shape(format!("path has {} states, horizon is {h_max}", path.states.nrows())));
        }
        let state = |h: usize| path.states.row(h).to_vec();
        let mut total = 0.0;
        for h in 0..h_max {
            let (s, a) = (state(h), state(h + 1));
            total += self.reward(h, &s, &a)? - self.policy_log_prob(h, &s, &a)?;
        }
        Ok(total + self.terminal_reward(&state(h_max))?)
    }
}
