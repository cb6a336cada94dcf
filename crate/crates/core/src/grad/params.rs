//! Named parameter slots and their binding onto a tape.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::Array2;

use super::tape::{Gradients, Tape, Var};
use super::GradError;

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
}

/// Every trainable tensor of a model, addressed by name or slot index.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    index: HashMap<String, usize>,
    version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a slot and returns its index. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> Result<usize, GradError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(GradError::DuplicateSlot(name));
        }
        let id = self.slots.len();
        self.index.insert(name.clone(), id);
        self.slots.push(Slot { name, value, grad: None });
        self.version += 1;
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.slots[slot].name
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    pub fn value(&self, slot: usize) -> &Array2<f64> {
        &self.slots[slot].value
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Array2<f64> {
        self.version += 1;
        &mut self.slots[slot].value
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.id(name).map(|i| self.value(i))
    }

    pub fn grad(&self, slot: usize) -> Option<&Array2<f64>> {
        self.slots[slot].grad.as_ref()
    }

    pub fn grad_mut(&mut self, slot: usize) -> Option<&mut Array2<f64>> {
        self.slots[slot].grad.as_mut()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    /// Adds `grads` into the per-slot accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (slot, g) in grads.iter() {
            let s = &mut self.slots[slot];
            match &mut s.grad {
                Some(acc) => *acc += g,
                None => s.grad = Some(g.clone()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.grad = None;
        }
    }

    /// Gives every listed slot without an accumulated gradient a zero one.
    /// Returns whether any listed slot already had a gradient.
    pub fn fill_missing_grads(&mut self, slots: &[usize]) -> bool {
        let any = slots.iter().any(|&s| self.slots[s].grad.is_some());
        for &s in slots {
            let slot = &mut self.slots[s];
            if slot.grad.is_none() {
                slot.grad = Some(Array2::zeros(slot.value.dim()));
            }
        }
        any
    }

    /// Same slot names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.slots.len() == other.slots.len()
            && self
                .slots
                .iter()
                .zip(&other.slots)
                .all(|(a, b)| a.name == b.name && a.value.dim() == b.value.dim())
    }

    /// All values concatenated in slot order, each slot row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for s in &self.slots {
            out.extend(s.value.iter().copied());
        }
        out
    }

    /// Inverse of [`ParamStore::to_flat`] for an identical layout.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), GradError> {
        if flat.len() != self.numel() {
            return Err(GradError::LayoutMismatch(format!(
                "flat view has {} entries, store holds {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        for s in &mut self.slots {
            let n = s.value.len();
            for (dst, &src) in s.value.iter_mut().zip(&flat[offset..offset + n]) {
                *dst = src;
            }
            offset += n;
        }
        self.version += 1;
        Ok(())
    }

    /// Copies values from a store with the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<(), GradError> {
        if !self.same_layout(other) {
            return Err(GradError::LayoutMismatch("copy between different layouts".into()));
        }
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            dst.value.assign(&src.value);
        }
        self.version += 1;
        Ok(())
    }

    /// Global L2 norm of accumulated gradients over `slots`.
    pub fn grad_norm(&self, slots: &[usize]) -> f64 {
        slots
            .iter()
            .filter_map(|&s| self.grad(s))
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Whether a [`Binder`] exposes slots as differentiable leaves or constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    Trainable,
    Frozen,
}

/// Lazily places store values onto a tape, once per slot.
pub struct Binder<'a> {
    store: &'a ParamStore,
    mode: BindMode,
    bound: RefCell<HashMap<usize, Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, mode: BindMode) -> Self {
        Self { store, mode, bound: RefCell::new(HashMap::new()) }
    }

    pub fn trainable(store: &'a ParamStore) -> Self {
        Self::new(store, BindMode::Trainable)
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, BindMode::Frozen)
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn mode(&self) -> BindMode {
        self.mode
    }

    pub fn get(&self, tape: &Tape, slot: usize) -> Var {
        if let Some(v) = self.bound.borrow().get(&slot) {
            return *v;
        }
        let value = self.store.value(slot).clone();
        let v = match self.mode {
            BindMode::Trainable => tape.param(slot, value),
            BindMode::Frozen => tape.constant(value),
        };
        self.bound.borrow_mut().insert(slot, v);
        v
    }
}

/// Runs reverse accumulation from `root` and adds the result into `store`'s
/// gradient accumulators. Repeated calls accumulate until
/// [`ParamStore::zero_grad`].
pub fn forward_backward(tape: &Tape, root: Var, store: &mut ParamStore) -> Result<Gradients, GradError> {
    let grads = tape.backward(root)?;
    store.accumulate(&grads);
    Ok(grads)
}
