use serde::{Deserialize, Serialize};

use crate::energies::EnergyKind;
use crate::objectives::{DestrLoss, GenLoss, LossConfig, LossError, Method};
use crate::policy::NetConfig;
use crate::replay::{LocalSearchConfig, PerConfig};
use crate::schedule::ScheduleKind;

use super::TrainError;

/// Everything that defines a training run. Serialises to TOML; missing keys
/// take the values of [`TrainConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub energy: EnergyKind,
    pub construction_seed: u64,
    /// Number of generation steps `T`.
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub sigma2: f64,
    pub method: Method,
    /// Overrides the generation loss implied by `method`.
    pub gen_loss: Option<GenLoss>,
    /// Overrides the destruction loss implied by `method`.
    pub destr_loss: Option<DestrLoss>,
    pub use_target_nets: bool,
    pub target_tau: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr_gen: f64,
    /// `lr_destr = lr_destr_ratio * lr_gen`.
    pub lr_destr_ratio: f64,
    pub lr_logz: f64,
    /// Per-iteration learning-rate multiplier.
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// One Adam over both processes instead of one per process.
    pub single_optimizer: bool,
    pub replay_ratio: usize,
    pub exploration: f64,
    /// Iterations over which the exploration scale decays linearly to 0.
    pub exploration_anneal: usize,
    pub per: PerConfig,
    pub local_search: bool,
    pub ls: LocalSearchConfig,
    pub net: NetConfig,
    pub eval_interval: usize,
    pub eval_samples: usize,
    /// Final metrics average this many of the last evaluations.
    pub eval_average: usize,
    pub eval_w2: bool,
    /// A run whose final ELBO is more than this many nats below `log Z` is
    /// reported as collapsed.
    pub collapse_margin: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            energy: EnergyKind::Gmm25,
            construction_seed: crate::energies::DEFAULT_CONSTRUCTION_SEED,
            steps: 10,
            schedule: ScheduleKind::Harmonic,
            sigma2: 5.0,
            method: Method::TbBoth,
            gen_loss: None,
            destr_loss: None,
            use_target_nets: true,
            target_tau: 0.05,
            batch_size: 512,
            iterations: 25_000,
            lr_gen: 1e-3,
            lr_destr_ratio: 1.0,
            lr_logz: 0.1,
            lr_decay: 0.99988,
            weight_decay: 1e-7,
            grad_clip: 200.0,
            single_optimizer: false,
            replay_ratio: 2,
            exploration: 0.3,
            exploration_anneal: 10_000,
            per: PerConfig::default(),
            local_search: true,
            ls: LocalSearchConfig::default(),
            net: NetConfig::new(2),
            eval_interval: 500,
            eval_samples: 2048,
            eval_average: 3,
            eval_w2: true,
            collapse_margin: 10.0,
            seed: 0,
        }
    }
}

/// Ratio `lr_destr / lr_gen` tuned per energy and step count.
pub fn destr_lr_ratio(energy: EnergyKind, steps: usize) -> f64 {
    match energy {
        EnergyKind::FunnelHard => 1e-3,
        EnergyKind::Manywell | EnergyKind::ManywellDistorted if steps <= 5 => 1e-5,
        EnergyKind::Manywell | EnergyKind::ManywellDistorted => 1e-4,
        _ => 1.0,
    }
}

/// Hyperparameters for `energy` at `steps` generation steps.
pub fn preset(energy: EnergyKind, steps: usize, method: Method) -> TrainConfig {
    let mixture = energy.is_mixture();
    let mut net = NetConfig::for_energy(energy);
    net.learn_gen_var = method.learns_gen_var();
    net.learn_destruction = method.learns_destruction();
    TrainConfig {
        energy,
        steps,
        schedule: if mixture { ScheduleKind::Harmonic } else { ScheduleKind::Uniform },
        sigma2: if mixture { 5.0 } else { 1.0 },
        method,
        lr_destr_ratio: destr_lr_ratio(energy, steps),
        lr_decay: match energy {
            EnergyKind::Gmm25 | EnergyKind::Gmm40 => 0.99988,
            _ => 0.9999,
        },
        exploration: if mixture {
            0.3
        } else if energy.is_funnel() {
            0.2
        } else {
            0.1
        },
        net,
        ..TrainConfig::default()
    }
}

impl TrainConfig {
    pub fn preset(energy: EnergyKind, steps: usize, method: Method) -> Self {
        preset(energy, steps, method)
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            gen_loss: self.gen_loss.unwrap_or(self.method.gen_loss()),
            destr_loss: self.destr_loss.unwrap_or(self.method.destr_loss()),
            use_target_nets: self.use_target_nets,
            target_tau: self.target_tau,
            logz_lr: self.lr_logz,
        }
    }

    /// Network configuration with the learnable parts implied by the losses.
    pub fn net_config(&self) -> NetConfig {
        let loss = self.loss_config();
        NetConfig {
            dim: self.energy.dim(),
            learn_destruction: loss.destr_loss != DestrLoss::None,
            learn_gen_var: self.net.learn_gen_var,
            ..self.net
        }
    }

    pub fn lr_destr(&self) -> f64 {
        self.lr_gen * self.lr_destr_ratio
    }

    /// Switches the method and the network flags that follow from it.
    pub fn set_method(&mut self, method: Method) {
        self.method = method;
        self.net.learn_gen_var = method.learns_gen_var();
        self.net.learn_destruction = method.learns_destruction();
    }

    /// Exploration scale at iteration `iter`.
    pub fn exploration_at(&self, iter: usize) -> f64 {
        if self.exploration_anneal == 0 {
            return 0.0;
        }
        self.exploration * (1.0 - iter as f64 / self.exploration_anneal as f64).max(0.0)
    }

    /// Applies a `key=value` override, with the value parsed as TOML.
    pub fn set(&mut self, assignment: &str) -> Result<(), TrainError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| TrainError::Config(format!("override {assignment:?} is not key=value")))?;
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).expect("own TOML parses");
        let parsed: toml::Value = match format!("v = {}", value.trim()).parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("key v"),
            Err(_) => toml::Value::String(value.trim().to_string()),
        };
        let mut table = &mut doc;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for part in &parts[..parts.len() - 1] {
            table = table
                .get_mut(*part)
                .and_then(|v| v.as_table_mut())
                .ok_or_else(|| TrainError::Config(format!("unknown config section {part:?}")))?;
        }
        let last = parts[parts.len() - 1];
        let known = table.contains_key(last) || matches!(last, "gen_loss" | "destr_loss");
        if !known {
            return Err(TrainError::Config(format!("unknown config key {key:?}")));
        }
        table.insert(last.to_string(), parsed);
        let method_changed = key.trim() == "method";
        *self = toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| TrainError::Config(e.to_string()))?;
        if method_changed {
            self.set_method(self.method);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.loss_config().validate().map_err(|e| match e {
            LossError::InvalidConfig(m) => TrainError::Config(m),
            other => TrainError::Config(other.to_string()),
        })?;
        self.net_config().validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.per.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.sigma2 > 0.0) {
            return bad(format!("sigma2 must be positive, got {}", self.sigma2));
        }
        if !(self.lr_gen > 0.0 && self.lr_destr_ratio > 0.0 && self.lr_logz > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.lr_destr_ratio > 1.0 {
            return bad(format!("lr_destr must not exceed lr_gen (ratio {})", self.lr_destr_ratio));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(self.grad_clip > 0.0 && self.weight_decay >= 0.0 && self.exploration >= 0.0) {
            return bad("grad_clip must be positive; weight_decay and exploration non-negative".into());
        }
        if self.eval_interval == 0 || self.eval_samples < 2 || self.eval_average == 0 {
            return bad("eval_interval, eval_samples (≥ 2) and eval_average must be positive".into());
        }
        if self.local_search && (self.ls.capacity == 0 || self.ls.interval == 0) {
            return bad("local search capacity and interval must be positive".into());
        }
        Ok(())
    }
}
