//! Adam with global-norm clipping, exponential learning-rate decay, and the
//! exponential-moving-average update used for target copies.

use std::collections::HashMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::GradError;

/// Hyperparameters of one Adam instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    /// Multiplier applied to `lr` by [`OptimState::decay_lr`].
    pub gamma_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self { lr, gamma_lr: 1.0, weight_decay: 1e-7, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn with_gamma(mut self, gamma_lr: f64) -> Self {
        self.gamma_lr = gamma_lr;
        self
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Array2<f64>,
    v: Array2<f64>,
}

/// Moment accumulators and schedule state for a fixed set of slots.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: AdamConfig,
    lr: f64,
    step: u64,
    slots: Vec<usize>,
    moments: HashMap<usize, Moments>,
}

impl OptimState {
    /// An optimizer that owns `slots` of `store`.
    pub fn new(config: AdamConfig, store: &ParamStore, slots: Vec<usize>) -> Self {
        let moments = slots
            .iter()
            .map(|&s| {
                let dim = store.value(s).dim();
                (s, Moments { m: Array2::zeros(dim), v: Array2::zeros(dim) })
            })
            .collect();
        Self { lr: config.lr, config, step: 0, slots, moments }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn owns(&self, slot: usize) -> bool {
        self.moments.contains_key(&slot)
    }

    /// First and second moments of `slot`, if owned.
    pub fn moments(&self, slot: usize) -> Option<(&Array2<f64>, &Array2<f64>)> {
        self.moments.get(&slot).map(|m| (&m.m, &m.v))
    }

    /// `lr <- gamma_lr * lr`.
    pub fn decay_lr(&mut self) {
        self.lr *= self.config.gamma_lr;
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// One Adam update of the optimizer's slots from the store's accumulated
/// gradients. The gradient over those slots is first rescaled so that its
/// global L2 norm is at most `clip_norm`; weight decay is then added as an L2
/// term. Returns the pre-clip gradient norm.
pub fn adam_step(store: &mut ParamStore, opt: &mut OptimState, clip_norm: Option<f64>) -> Result<f64, GradError> {
    for &s in &opt.slots {
        if store.grad(s).is_none() {
            return Err(GradError::MissingGradient(store.name(s).to_string()));
        }
    }
    let norm = store.grad_norm(&opt.slots);
    if !norm.is_finite() {
        return Err(GradError::NonFinite { what: "gradient norm".into(), param: None });
    }
    let scale = match clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };

    opt.step += 1;
    let cfg = opt.config;
    let t = opt.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let lr = opt.lr;

    for &s in &opt.slots {
        let grad = store.grad(s).expect("checked above").clone();
        let mom = opt.moments.get_mut(&s).expect("moment per owned slot");
        let value = store.value_mut(s);
        Zip::from(value)
            .and(&grad)
            .and(&mut mom.m)
            .and(&mut mom.v)
            .for_each(|w, &g, m, v| {
                let g = g * scale + cfg.weight_decay * *w;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            });
    }
    Ok(norm)
}

/// `target <- (1 - tau) * target + tau * online`, element-wise.
pub fn ema_update(target: &mut ParamStore, online: &ParamStore, tau: f64) -> Result<(), GradError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(GradError::InvalidArgument(format!("tau must lie in [0, 1], got {tau}")));
    }
    if !target.same_layout(online) {
        return Err(GradError::LayoutMismatch("ema_update between different layouts".into()));
    }
    if tau == 0.0 {
        return Ok(());
    }
    if tau == 1.0 {
        return target.copy_from(online);
    }
    for s in 0..online.len() {
        let src = online.value(s);
        Zip::from(target.value_mut(s)).and(src).for_each(|t, &o| *t = (1.0 - tau) * *t + tau * o);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{Binder, Tape};
    use ndarray::array;

    fn store_with(name: &str, v: Array2<f64>) -> (ParamStore, usize) {
        let mut s = ParamStore::new();
        let id = s.insert(name, v).unwrap();
        (s, id)
    }

    #[test]
    fn clipping_halves_a_norm_400_gradient() {
        // Gradient (240, 320) has norm 400; with clip 200 the first moment
        // after one step is (1 - beta1) * g / 2.
        let (mut s, w) = store_with("w", array![[0.0, 0.0]]);
        s.accumulate(&{
            let tape = Tape::new();
            let b = Binder::trainable(&s);
            let x = b.get(&tape, w);
            let c = tape.constant(array![[240.0, 320.0]]);
            tape.backward(tape.sum(tape.mul(c, x))).unwrap()
        });
        let mut opt = OptimState::new(AdamConfig::new(1e-3).with_weight_decay(0.0), &s, vec![w]);
        let norm = adam_step(&mut s, &mut opt, Some(200.0)).unwrap();
        assert!((norm - 400.0).abs() < 1e-12);
        let (m, _) = opt.moments(w).unwrap();
        assert!((m[[0, 0]] - 0.1 * 120.0).abs() < 1e-12);
        assert!((m[[0, 1]] - 0.1 * 160.0).abs() < 1e-12);
    }

    #[test]
    fn lr_decay_once() {
        let (s, w) = store_with("w", array![[0.0]]);
        let mut opt = OptimState::new(AdamConfig::new(1e-3).with_gamma(0.99988), &s, vec![w]);
        opt.decay_lr();
        assert!((opt.lr() - 9.9988e-4).abs() < 1e-18);
    }

    #[test]
    fn single_step_moves_by_lr() {
        // f(w) = w, gradient 1: bias-corrected Adam step is lr * 1 / (1 + eps).
        let (mut s, w) = store_with("w", array![[0.0]]);
        let tape = Tape::new();
        let b = Binder::trainable(&s);
        let g = tape.backward(tape.sum(b.get(&tape, w))).unwrap();
        s.accumulate(&g);
        let mut opt = OptimState::new(AdamConfig::new(0.1), &s, vec![w]);
        adam_step(&mut s, &mut opt, Some(200.0)).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((s.value(w)[[0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut s, w) = store_with("w", array![[0.0]]);
        let mut opt = OptimState::new(AdamConfig::new(0.1), &s, vec![w]);
        assert!(matches!(adam_step(&mut s, &mut opt, None), Err(GradError::MissingGradient(_))));
    }

    #[test]
    fn ema_examples() {
        let (mut target, _) = store_with("w", array![[0.0]]);
        let (online, _) = store_with("w", array![[1.0]]);
        ema_update(&mut target, &online, 0.05).unwrap();
        assert!((target.value(0)[[0, 0]] - 0.05).abs() < 1e-15);

        let before = target.to_flat();
        ema_update(&mut target, &online, 0.0).unwrap();
        assert_eq!(before, target.to_flat());

        ema_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target.to_flat(), online.to_flat());
    }

    #[test]
    fn ema_layout_mismatch() {
        let (mut target, _) = store_with("w", array![[0.0]]);
        let (online, _) = store_with("v", array![[1.0]]);
        assert!(matches!(ema_update(&mut target, &online, 0.5), Err(GradError::LayoutMismatch(_))));
    }
}
