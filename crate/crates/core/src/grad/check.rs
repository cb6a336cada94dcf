//! Central-difference gradient verification.

use super::params::{Binder, ParamStore};
use super::tape::{Tape, Var};
use super::GradError;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Check at most this many evenly strided entries per slot.
    pub max_per_slot: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { epsilon: 1e-5, tolerance: 1e-4, max_per_slot: None }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over checked entries of `|analytic - numeric| / (|analytic| + 1e-8)`.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares the tape gradient of the scalar `f` against central differences
/// for every entry of the selected slots (all slots when `slots` is `None`).
///
/// `f` must build its graph from parameters obtained through the supplied
/// [`Binder`]. The store is restored to its original values on return.
pub fn finite_diff_check<F>(
    f: F,
    store: &mut ParamStore,
    slots: Option<&[usize]>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, GradError>
where
    F: Fn(&Tape, &Binder<'_>) -> Var,
{
    if !(opts.epsilon > 0.0 && opts.epsilon <= 1e-3) {
        return Err(GradError::InvalidArgument(format!("epsilon must lie in (0, 1e-3], got {}", opts.epsilon)));
    }
    let selected: Vec<usize> = match slots {
        Some(s) => s.to_vec(),
        None => (0..store.len()).collect(),
    };

    let analytic = {
        let tape = Tape::new();
        let binder = Binder::trainable(store);
        let root = f(&tape, &binder);
        let value = tape.scalar(root);
        if !value.is_finite() {
            return Err(GradError::NonFinite { what: "function value".into(), param: None });
        }
        tape.backward(root)?
    };

    let eval = |store: &ParamStore| -> f64 {
        let tape = Tape::new();
        let binder = Binder::frozen(store);
        let root = f(&tape, &binder);
        tape.scalar(root)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        tolerance: opts.tolerance,
    };
    for slot in selected {
        let n = store.value(slot).len();
        let stride = match opts.max_per_slot {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let grad = analytic.get(slot);
        for idx in (0..n).step_by(stride) {
            let orig = store.value(slot).as_slice().expect("standard layout")[idx];
            store.value_mut(slot).as_slice_mut().expect("standard layout")[idx] = orig + opts.epsilon;
            let plus = eval(store);
            store.value_mut(slot).as_slice_mut().expect("standard layout")[idx] = orig - opts.epsilon;
            let minus = eval(store);
            store.value_mut(slot).as_slice_mut().expect("standard layout")[idx] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(GradError::NonFinite {
                    what: "function value under perturbation".into(),
                    param: Some(format!("{}[{idx}]", store.name(slot))),
                });
            }
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = grad.map(|g| g.as_slice().expect("standard layout")[idx]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / (a.abs() + 1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = store.name(slot).to_string();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}
