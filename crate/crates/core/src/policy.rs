//! The neural sampler: state and time encoders, an MLP backbone, and two
//! linear heads producing the generation (drift, variance multiplier) and
//! destruction (mean multiplier, variance multiplier) corrections.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::energies::EnergyKind;
use crate::grad::{ema_update, Binder, GradError, ParamStore, Tape, Var};
use crate::rng::{self, streams};

/// Drift outputs are clamped to this magnitude.
pub const DRIFT_BOUND: f64 = 1e4;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Grad(#[from] GradError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub dim: usize,
    pub s_dim: usize,
    pub t_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub c1: f64,
    pub c2: f64,
    /// Lower clamp on the predicted variance multipliers.
    pub clip_eps: f64,
    pub shared_backbone: bool,
    /// When false the generation variance multiplier is fixed at 1.
    pub learn_gen_var: bool,
    /// When false the destruction corrections are fixed at 1.
    pub learn_destruction: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::new(2)
    }
}

impl NetConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            s_dim: 64,
            t_dim: 64,
            hidden: 64,
            depth: 2,
            c1: 4.0,
            c2: 0.9,
            clip_eps: 1e-4,
            shared_backbone: true,
            learn_gen_var: true,
            learn_destruction: true,
        }
    }

    /// Widths and depth used for `kind`: 256 wide and 4 deep for Manywell.
    pub fn for_energy(kind: EnergyKind) -> Self {
        let mut c = Self::new(kind.dim());
        if kind.is_manywell() {
            c.s_dim = 256;
            c.t_dim = 256;
            c.hidden = 256;
            c.depth = 4;
        }
        c
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.dim == 0 || self.s_dim == 0 || self.hidden == 0 || self.depth == 0 {
            return bad("dim, s_dim, hidden and depth must be positive".into());
        }
        if self.t_dim < 4 || self.t_dim % 2 != 0 {
            return bad(format!("t_dim must be even and at least 4, got {}", self.t_dim));
        }
        if !(self.c1 > 1.0) {
            return bad(format!("c1 must exceed 1, got {}", self.c1));
        }
        if !(self.c2 > 0.0 && self.c2 < 1.0) {
            return bad(format!("c2 must lie in (0, 1), got {}", self.c2));
        }
        if !(self.clip_eps > 0.0) {
            return bad(format!("clip_eps must be positive, got {}", self.clip_eps));
        }
        Ok(())
    }
}

/// Which process a network pass belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Gen,
    Destr,
}

#[derive(Debug, Clone, Copy)]
pub struct Layer {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone)]
struct Trunk {
    state_enc: Layer,
    time_enc: Layer,
    backbone: Vec<Layer>,
}

impl Trunk {
    fn slots(&self) -> Vec<usize> {
        let mut s = vec![self.state_enc.w, self.state_enc.b, self.time_enc.w, self.time_enc.b];
        for l in &self.backbone {
            s.extend([l.w, l.b]);
        }
        s
    }
}

/// Online parameters, their EMA target copy, and the learned `log Ẑ`.
#[derive(Debug, Clone)]
pub struct SamplerModel {
    pub config: NetConfig,
    pub params: ParamStore,
    pub target: ParamStore,
    trunks: Vec<Trunk>,
    gen_head: Layer,
    destr_head: Layer,
    log_z: usize,
}

fn uniform_init(rng: &mut rng::SeededRng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

fn add_linear(
    store: &mut ParamStore,
    rng: &mut rng::SeededRng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    zero: bool,
) -> Result<Layer, GradError> {
    let (w, b) = if zero {
        (Array2::zeros((fan_in, fan_out)), Array2::zeros((1, fan_out)))
    } else {
        (uniform_init(rng, fan_in, fan_out, fan_in), uniform_init(rng, 1, fan_out, fan_in))
    };
    Ok(Layer { w: store.insert(format!("{name}.w"), w)?, b: store.insert(format!("{name}.b"), b)? })
}

impl SamplerModel {
    /// A freshly initialised model. Encoders and backbone use
    /// `U(-1/√fan_in, 1/√fan_in)`; both heads and `log Ẑ` start at zero.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng::stream(seed, streams::INIT);
        let mut store = ParamStore::new();
        let prefixes: &[&str] = if config.shared_backbone { &[""] } else { &["gen.", "destr."] };
        let mut trunks = Vec::new();
        for p in prefixes {
            let state_enc = add_linear(&mut store, &mut rng, &format!("{p}state_enc"), config.dim, config.s_dim, false)?;
            let time_enc = add_linear(&mut store, &mut rng, &format!("{p}time_enc"), config.t_dim, config.t_dim, false)?;
            let mut backbone = Vec::with_capacity(config.depth);
            let mut fan_in = config.s_dim + config.t_dim;
            for i in 0..config.depth {
                backbone.push(add_linear(&mut store, &mut rng, &format!("{p}backbone.{i}"), fan_in, config.hidden, false)?);
                fan_in = config.hidden;
            }
            trunks.push(Trunk { state_enc, time_enc, backbone });
        }
        let gen_head = add_linear(&mut store, &mut rng, "gen_head", config.hidden, 2 * config.dim, true)?;
        let destr_head = add_linear(&mut store, &mut rng, "destr_head", config.hidden, 2 * config.dim, true)?;
        let log_z = store.insert("log_z", Array2::zeros((1, 1)))?;
        Ok(Self { config, target: store.clone(), params: store, trunks, gen_head, destr_head, log_z })
    }

    fn trunk(&self, side: Side) -> &Trunk {
        match (side, self.trunks.len()) {
            (Side::Destr, 2) => &self.trunks[1],
            _ => &self.trunks[0],
        }
    }

    /// Slots updated by the generation optimizer: its trunk and head.
    pub fn gen_slots(&self) -> Vec<usize> {
        let mut s = self.trunk(Side::Gen).slots();
        s.extend([self.gen_head.w, self.gen_head.b]);
        s
    }

    /// Slots updated by the destruction optimizer: its trunk and head.
    pub fn destr_slots(&self) -> Vec<usize> {
        let mut s = self.trunk(Side::Destr).slots();
        s.extend([self.destr_head.w, self.destr_head.b]);
        s
    }

    pub fn gen_head_slots(&self) -> [usize; 2] {
        [self.gen_head.w, self.gen_head.b]
    }

    pub fn destr_head_slots(&self) -> [usize; 2] {
        [self.destr_head.w, self.destr_head.b]
    }

    pub fn log_z_slot(&self) -> usize {
        self.log_z
    }

    pub fn log_z(&self) -> f64 {
        self.params.value(self.log_z)[[0, 0]]
    }

    pub fn set_log_z(&mut self, v: f64) {
        self.params.value_mut(self.log_z)[[0, 0]] = v;
    }

    /// Adds `U(-scale, scale)` noise to every online weight except `log Ẑ`.
    /// Useful to move away from the zero-initialised heads in tests.
    pub fn perturb_parameters(&mut self, scale: f64, seed: u64) {
        let mut rng = rng::stream(seed, streams::INIT + 100);
        for slot in 0..self.params.len() {
            if slot == self.log_z {
                continue;
            }
            self.params.value_mut(slot).mapv_inplace(|v| v + rng.random_range(-scale..scale));
        }
    }

    /// `target <- (1 - tau) target + tau online`.
    pub fn snapshot_targets(&mut self, tau: f64) -> Result<(), ModelError> {
        ema_update(&mut self.target, &self.params, tau)?;
        Ok(())
    }

    /// Sinusoidal embedding `(sin(ω_k t), cos(ω_k t))` with `ω_k` geometric in `[1, 10⁴]`.
    pub fn time_embedding(&self, t: f64) -> Array2<f64> {
        let half = self.config.t_dim / 2;
        let mut e = Array2::zeros((1, self.config.t_dim));
        for k in 0..half {
            let w = 10f64.powf(4.0 * k as f64 / (half - 1) as f64);
            e[[0, k]] = (w * t).sin();
            e[[0, half + k]] = (w * t).cos();
        }
        e
    }

    fn linear(&self, tape: &Tape, b: &Binder<'_>, l: Layer, x: Var) -> Var {
        tape.add_row(tape.matmul(x, b.get(tape, l.w)), b.get(tape, l.b))
    }

    /// Backbone features of `x`, whose rows form `times.len()` consecutive
    /// blocks of equal size; block `k` is evaluated at time `times[k]`.
    pub fn features(&self, tape: &Tape, b: &Binder<'_>, side: Side, x: Var, times: &[f64]) -> Var {
        let trunk = self.trunk(side);
        let rows = tape.shape(x).0;
        assert!(!times.is_empty() && rows % times.len() == 0, "features: rows must split into time blocks");
        let n = rows / times.len();
        let mut emb = Array2::zeros((times.len(), self.config.t_dim));
        for (k, &t) in times.iter().enumerate() {
            emb.row_mut(k).assign(&self.time_embedding(t).row(0));
        }
        let te = tape.gelu(self.linear(tape, b, trunk.time_enc, tape.constant(emb)));
        let te = if times.len() == 1 {
            tape.repeat_rows(te, n)
        } else {
            let blocks: Vec<Var> = (0..times.len()).map(|k| tape.repeat_rows(tape.slice_rows(te, k, k + 1), n)).collect();
            tape.concat_rows(&blocks)
        };
        let se = tape.gelu(self.linear(tape, b, trunk.state_enc, x));
        let mut h = tape.concat_cols(&[se, te]);
        for &l in &trunk.backbone {
            h = tape.gelu(self.linear(tape, b, l, h));
        }
        h
    }

    /// `(f_θ, γ_θ)` from generation-side features.
    pub fn gen_outputs(&self, tape: &Tape, b: &Binder<'_>, feats: Var) -> (Var, Var) {
        let d = self.config.dim;
        let raw = self.linear(tape, b, self.gen_head, feats);
        let drift = tape.clamp(tape.slice_cols(raw, 0, d), -DRIFT_BOUND, DRIFT_BOUND);
        let gamma = if self.config.learn_gen_var {
            let g = tape.exp(tape.scale(tape.tanh(tape.slice_cols(raw, d, 2 * d)), self.config.c1));
            tape.clamp(g, self.config.clip_eps, f64::INFINITY)
        } else {
            tape.constant(Array2::ones((tape.shape(feats).0, d)))
        };
        (drift, gamma)
    }

    /// `(α_φ, β_φ)` from destruction-side features.
    pub fn destr_outputs(&self, tape: &Tape, b: &Binder<'_>, feats: Var) -> (Var, Var) {
        let d = self.config.dim;
        let rows = tape.shape(feats).0;
        if !self.config.learn_destruction {
            let ones = tape.constant(Array2::ones((rows, d)));
            return (ones, ones);
        }
        let raw = self.linear(tape, b, self.destr_head, feats);
        let c2 = self.config.c2;
        let alpha = tape.offset(tape.scale(tape.tanh(tape.slice_cols(raw, 0, d)), c2), 1.0);
        let beta = tape.offset(tape.scale(tape.tanh(tape.slice_cols(raw, d, 2 * d)), c2), 1.0);
        (alpha, tape.clamp(beta, self.config.clip_eps, f64::INFINITY))
    }

    fn check_input(&self, x: &Array2<f64>, t: f64) -> Result<(), ModelError> {
        if x.ncols() != self.config.dim {
            return Err(ModelError::InvalidConfig(format!("expected {} columns, got {}", self.config.dim, x.ncols())));
        }
        if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("network input"));
        }
        Ok(())
    }

    /// Backbone features of the online generation trunk at `(x, t)`.
    pub fn encode(&self, x: &Array2<f64>, t: f64) -> Result<Array2<f64>, ModelError> {
        self.check_input(x, t)?;
        let tape = Tape::new();
        let b = Binder::frozen(&self.params);
        let f = self.features(&tape, &b, Side::Gen, tape.constant(x.clone()), &[t]);
        let out = tape.value(f).clone();
        Ok(out)
    }

    /// Online `(f_θ(x, t), γ_θ(x, t))`.
    pub fn forward_head(&self, x: &Array2<f64>, t: f64) -> Result<(Array2<f64>, Array2<f64>), ModelError> {
        self.check_input(x, t)?;
        let tape = Tape::new();
        let b = Binder::frozen(&self.params);
        let f = self.features(&tape, &b, Side::Gen, tape.constant(x.clone()), &[t]);
        let (drift, gamma) = self.gen_outputs(&tape, &b, f);
        let out = (tape.value(drift).clone(), tape.value(gamma).clone());
        if out.0.iter().chain(out.1.iter()).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("generation head output"));
        }
        Ok(out)
    }

    /// Online `(α_φ(x, t), β_φ(x, t))`.
    pub fn backward_head(&self, x: &Array2<f64>, t: f64) -> Result<(Array2<f64>, Array2<f64>), ModelError> {
        self.check_input(x, t)?;
        let tape = Tape::new();
        let b = Binder::frozen(&self.params);
        let f = self.features(&tape, &b, Side::Destr, tape.constant(x.clone()), &[t]);
        let (alpha, beta) = self.destr_outputs(&tape, &b, f);
        let out = (tape.value(alpha).clone(), tape.value(beta).clone());
        if out.0.iter().chain(out.1.iter()).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("destruction head output"));
        }
        Ok(out)
    }
}
