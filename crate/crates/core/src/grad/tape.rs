//! Reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during the
//! forward pass. [`Tape::backward`] walks the record in reverse and returns the
//! gradient of a scalar root with respect to every parameter leaf, keyed by the
//! parameter slot it was bound from.
//!
//! Every value is a row-major `rows x cols` matrix of `f64`. Scalars are `1x1`.
//! Batches are laid out one sample per row.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use super::GradError;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    /// Input and the derivative at it, kept when a gradient is needed.
    Gelu(Var, Option<Array2<f64>>),
    Square(Var),
    Clamp(Var, f64, f64),
    SumCols(Var),
    SumAll(Var),
    MeanAll(Var),
    Broadcast(Var),
    RepeatRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    SumRowBlocks(Var, usize),
    GaussLogPdf(Var, Var, Var),
    RowScalar(Var, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar root, keyed by parameter slot.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_slot: BTreeMap<usize, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&Array2<f64>> {
        self.by_slot.get(&slot)
    }

    pub fn slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_slot.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Array2<f64>)> {
        self.by_slot.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.by_slot.is_empty()
    }

    /// Element-wise sum with another gradient set.
    pub fn merge(&mut self, other: &Gradients) {
        for (slot, g) in other.iter() {
            match self.by_slot.get_mut(&slot) {
                Some(acc) => *acc += g,
                None => {
                    self.by_slot.insert(slot, g.clone());
                }
            }
        }
    }
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn gelu_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Borrow the value of a node.
    pub fn value(&self, v: Var) -> Ref<'_, Array2<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar_constant(&self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Leaf bound to parameter `slot`; gradients flow back to it.
    pub fn param(&self, slot: usize, value: Array2<f64>) -> Var {
        self.push(value, Op::Param(slot), true)
    }

    /// Constant copy of `v` with no gradient path.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).mapv(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&*self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a (n,c) + bias (1,c)` broadcast over rows.
    pub fn add_row(&self, a: Var, bias: Var) -> Var {
        let value = {
            let av = self.value(a);
            let bv = self.value(bias);
            assert_eq!(bv.nrows(), 1, "add_row bias must be a single row");
            assert_eq!(av.ncols(), bv.ncols(), "add_row column mismatch");
            &*av + &bv.row(0)
        };
        let rg = self.rg(a) || self.rg(bias);
        self.push(value, Op::AddRow(a, bias), rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{what}: shape mismatch {sa:?} vs {sb:?}");
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let value = &*self.value(a) + &*self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let value = &*self.value(a) - &*self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let value = &*self.value(a) * &*self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, a: Var) -> Var {
        let rg = self.rg(a);
        let x = self.value(a);
        let mut value = Array2::zeros(x.dim());
        let deriv = if rg {
            let mut d = Array2::zeros(x.dim());
            Zip::from(&mut value).and(&mut d).and(&*x).for_each(|v, d, &x| {
                let c = gelu_cdf(x);
                *v = x * c;
                *d = c + x * gelu_pdf(x);
            });
            Some(d)
        } else {
            Zip::from(&mut value).and(&*x).for_each(|v, &x| *v = x * gelu_cdf(x));
            None
        };
        drop(x);
        self.push(value, Op::Gelu(a, deriv), rg)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Row sums: `(n,c) -> (n,1)`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let value = {
            let v = self.value(a);
            Array2::from_elem((1, 1), v.sum() / v.len() as f64)
        };
        let rg = self.rg(a);
        self.push(value, Op::MeanAll(a), rg)
    }

    /// Broadcast a `1x1` node to `(rows, cols)`.
    pub fn broadcast(&self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.scalar(a);
        let rg = self.rg(a);
        self.push(Array2::from_elem((rows, cols), x), Op::Broadcast(a), rg)
    }

    /// Repeat a single row `n` times: `(1,c) -> (n,c)`.
    pub fn repeat_rows(&self, a: Var, n: usize) -> Var {
        let value = {
            let v = self.value(a);
            assert_eq!(v.nrows(), 1, "repeat_rows expects a single row");
            v.broadcast((n, v.ncols())).expect("broadcast").to_owned()
        };
        let rg = self.rg(a);
        self.push(value, Op::RepeatRows(a), rg)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let vals: Vec<Ref<'_, Array2<f64>>> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<ArrayView2<'_, f64>> = vals.iter().map(|v| v.view()).collect();
            concatenate(Axis(1), &views).expect("concat_cols row mismatch")
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = {
            let vals: Vec<Ref<'_, Array2<f64>>> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<ArrayView2<'_, f64>> = vals.iter().map(|v| v.view()).collect();
            concatenate(Axis(0), &views).expect("concat_rows column mismatch")
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    /// Sum of `blocks` consecutive row blocks: `(blocks*n, c) -> (n, c)`.
    pub fn sum_row_blocks(&self, a: Var, blocks: usize) -> Var {
        let value = {
            let v = self.value(a);
            assert!(blocks > 0 && v.nrows() % blocks == 0, "sum_row_blocks: uneven blocks");
            let n = v.nrows() / blocks;
            let mut out = Array2::zeros((n, v.ncols()));
            for b in 0..blocks {
                out += &v.slice(s![b * n..(b + 1) * n, ..]);
            }
            out
        };
        let rg = self.rg(a);
        self.push(value, Op::SumRowBlocks(a, blocks), rg)
    }

    /// Row-wise diagonal Gaussian log-density `log N(x; mean, diag(var))`,
    /// summed over columns: `(n,c) -> (n,1)`.
    pub fn gauss_log_pdf(&self, x: Var, mean: Var, var: Var) -> Var {
        self.same_shape(x, mean, "gauss_log_pdf");
        self.same_shape(x, var, "gauss_log_pdf");
        let value = {
            let (xv, mv, vv) = (self.value(x), self.value(mean), self.value(var));
            let mut out = Array2::zeros((xv.nrows(), 1));
            Zip::from(out.rows_mut())
                .and(xv.rows())
                .and(mv.rows())
                .and(vv.rows())
                .for_each(|mut o, xr, mr, vr| {
                    let mut acc = 0.0;
                    for ((&xi, &mi), &vi) in xr.iter().zip(mr.iter()).zip(vr.iter()) {
                        let d = xi - mi;
                        acc += d * d / vi + vi.ln() + LN_2PI;
                    }
                    o[0] = -0.5 * acc;
                });
            out
        };
        let rg = self.rg(x) || self.rg(mean) || self.rg(var);
        self.push(value, Op::GaussLogPdf(x, mean, var), rg)
    }

    /// Per-row scalar function of `x (n,c)` given its values `(n,1)` and
    /// row gradients `(n,c)`, both computed outside the tape.
    pub fn row_scalar(&self, x: Var, values: Array2<f64>, row_grads: Array2<f64>) -> Var {
        let (n, c) = self.shape(x);
        assert_eq!(values.dim(), (n, 1), "row_scalar values shape");
        assert_eq!(row_grads.dim(), (n, c), "row_scalar gradient shape");
        let rg = self.rg(x);
        self.push(values, Op::RowScalar(x, row_grads), rg)
    }

    /// Gradients of the scalar `root` with respect to all parameter leaves.
    pub fn backward(&self, root: Var) -> Result<Gradients, GradError> {
        let nodes = self.nodes.borrow();
        let shape = nodes[root.0].value.dim();
        if shape != (1, 1) {
            return Err(GradError::NonScalarRoot { shape });
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::default();

        let acc = |grads: &mut Vec<Option<Array2<f64>>>, v: Var, g: Array2<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Constant => {}
                Op::Param(slot) => match out.by_slot.get_mut(slot) {
                    Some(existing) => *existing += &g,
                    None => {
                        out.by_slot.insert(*slot, g.as_standard_layout().into_owned());
                    }
                },
                Op::MatMul(a, b) => {
                    if nodes[a.0].requires_grad {
                        acc(&mut grads, *a, g.dot(&val(*b).t()));
                    }
                    if nodes[b.0].requires_grad {
                        acc(&mut grads, *b, val(*a).t().dot(&g));
                    }
                }
                Op::AddRow(a, bias) => {
                    if nodes[bias.0].requires_grad {
                        acc(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if nodes[a.0].requires_grad {
                        acc(&mut grads, *a, &g * val(*b));
                    }
                    if nodes[b.0].requires_grad {
                        acc(&mut grads, *b, &g * val(*a));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Offset(a) => acc(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(&mut grads, *a, d);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Log(a) => acc(&mut grads, *a, g / val(*a)),
                Op::Sqrt(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= 0.5 / y);
                    acc(&mut grads, *a, d);
                }
                Op::Gelu(a, deriv) => {
                    let deriv = deriv.as_ref().expect("gelu derivative kept for grad-requiring inputs");
                    acc(&mut grads, *a, g * deriv);
                }
                Op::Square(a) => acc(&mut grads, *a, g * val(*a) * 2.0),
                Op::Clamp(a, lo, hi) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        if x < *lo || x > *hi {
                            *d = 0.0;
                        }
                    });
                    acc(&mut grads, *a, d);
                }
                Op::SumCols(a) => {
                    let (n, c) = val(*a).dim();
                    let d = g.broadcast((n, c)).expect("broadcast").to_owned();
                    acc(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let d = Array2::from_elem(val(*a).dim(), g[[0, 0]]);
                    acc(&mut grads, *a, d);
                }
                Op::MeanAll(a) => {
                    let n = val(*a).len() as f64;
                    let d = Array2::from_elem(val(*a).dim(), g[[0, 0]] / n);
                    acc(&mut grads, *a, d);
                }
                Op::Broadcast(a) => acc(&mut grads, *a, Array2::from_elem((1, 1), g.sum())),
                Op::RepeatRows(a) => acc(&mut grads, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        if nodes[p.0].requires_grad {
                            acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = val(*p).nrows();
                        if nodes[p.0].requires_grad {
                            acc(&mut grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                        }
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    let w = g.ncols();
                    d.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::SliceRows(a, start) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    let h = g.nrows();
                    d.slice_mut(s![*start..*start + h, ..]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::SumRowBlocks(a, blocks) => {
                    let n = g.nrows();
                    let mut d = Array2::zeros(val(*a).dim());
                    for b in 0..*blocks {
                        d.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&g);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::GaussLogPdf(x, mean, var) => {
                    let (xv, mv, vv) = (val(*x), val(*mean), val(*var));
                    // z = (x - m) / v
                    let mut z = xv - mv;
                    z /= vv;
                    let gcol = g.column(0);
                    if nodes[x.0].requires_grad || nodes[mean.0].requires_grad {
                        let mut dx = z.clone();
                        for (mut row, &gi) in dx.rows_mut().into_iter().zip(gcol.iter()) {
                            row *= -gi;
                        }
                        if nodes[mean.0].requires_grad {
                            acc(&mut grads, *mean, -&dx);
                        }
                        acc(&mut grads, *x, dx);
                    }
                    if nodes[var.0].requires_grad {
                        let mut dv = Array2::zeros(vv.dim());
                        Zip::from(dv.rows_mut())
                            .and(z.rows())
                            .and(vv.rows())
                            .and(&gcol)
                            .for_each(|mut o, zr, vr, &gi| {
                                for ((o, &zi), &vi) in o.iter_mut().zip(zr.iter()).zip(vr.iter()) {
                                    *o = 0.5 * gi * (zi * zi - 1.0 / vi);
                                }
                            });
                        acc(&mut grads, *var, dv);
                    }
                }
                Op::RowScalar(x, row_grads) => {
                    let mut d = row_grads.clone();
                    for (mut row, &gi) in d.rows_mut().into_iter().zip(g.column(0).iter()) {
                        row *= gi;
                    }
                    acc(&mut grads, *x, d);
                }
            }
        }
        Ok(out)
    }
}
