//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every primitive appends a node holding its value and the handles of its
//! operands. [`Tape::backward`] walks the nodes in reverse and accumulates
//! adjoints into every node that requires a gradient. A tape can be
//! differentiated once; a second call returns [`Error::TapeConsumed`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Atan(Var),
    Relu(Var),
    Square(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    SumLast(Var),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize },
    LogSoftmax(Var),
    Clamp(Var, f64, f64),
    Gather(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Gradient of the differentiated output w.r.t. `v`, after [`Tape::backward`].
    /// `None` when `v` does not influence the output or has no gradient.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).ok()
    }

    /// Gradient as a flat slice, `None` if never reached.
    pub fn grad_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn checked(&mut self, op_name: &'static str, value: Tensor, op: Op, rg: bool) -> Result<Var> {
        if let Some(index) = value.first_non_finite() {
            return Err(Error::NonFinite { op: op_name, index });
        }
        Ok(self.push(value, op, rg))
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.checked(name, out, op, rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.nodes[a.0].value.map(f);
        let rg = self.rg(a);
        self.checked(name, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `m + v` with `v` broadcast over every row of `m` (`v.len() == m.cols()`).
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (&self.nodes[m.0].value, &self.nodes[v.0].value);
        if tv.len() != tm.cols() {
            return Err(shape_err("add_row", tm, tv));
        }
        let c = tm.cols();
        let mut data = tm.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (x, &b) in row.iter_mut().zip(tv.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(tm.shape().to_vec(), data)?;
        let rg = self.rg(m) || self.rg(v);
        self.checked("add_row", out, Op::AddRow(m, v), rg)
    }

    /// `[m, k] × [k, n] → [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        self.checked("matmul", out, Op::MatMul(a, b), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, math::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary("ln", a, math::ln, Op::Ln(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, math::tanh, Op::Tanh(a))
    }

    pub fn atan(&mut self, a: Var) -> Result<Var> {
        self.unary("atan", a, math::atan, Op::Atan(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    /// Clamps elementwise to `[lo, hi]`; the gradient is zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(a);
        self.checked("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Row sums over the last axis: `[r, c] → [r, 1]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let c = t.cols();
        let data: Vec<f64> = t.data().chunks_exact(c).map(|r| r.iter().sum()).collect();
        let rows = data.len();
        let out = Tensor::new(vec![rows, 1], data)?;
        let rg = self.rg(a);
        self.checked("sum_last", out, Op::SumLast(a), rg)
    }

    /// Concatenates along the last axis; all parts must have the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = &self.nodes[parts[0].0].value;
        let rows = first.rows();
        let mut total = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows() != rows || t.shape().len() > 2 {
                return Err(shape_err("concat", first, t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.checked("concat", out, Op::Concat(parts.to_vec()), rg)
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let c = t.cols();
        if len == 0 || start + len > c {
            return Err(Error::Shape {
                op: "slice",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let rg = self.rg(a);
        self.checked("slice", out, Op::Slice { src: a, start }, rg)
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(row.iter().map(|&x| math::exp(x - max)).sum::<f64>());
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.checked("log_softmax", out, Op::LogSoftmax(a), rg)
    }

    /// Row-wise softmax; composed from `log_softmax` and `exp`.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let l = self.log_softmax(a)?;
        self.exp(l)
    }

    /// Picks column `idx[r]` from row `r`: `[r, c] → [r, 1]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let c = t.cols();
        if idx.len() != t.rows() {
            return Err(Error::Shape {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut data = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            if i >= c {
                return Err(Error::ActionIndex { index: i, n: c });
            }
            data.push(t.row(r)[i]);
        }
        let out = Tensor::new(vec![idx.len(), 1], data)?;
        let rg = self.rg(a);
        self.checked("gather", out, Op::Gather(a, idx.to_vec()), rg)
    }

    /// Accumulates `∂output/∂node` for every node that requires a gradient.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let Some(out) = self.nodes.get(output.0) else {
            return Err(Error::NoForward);
        };
        if out.value.len() != 1 {
            return Err(Error::NonScalarOutput(out.value.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * va[k];
                    }
                });
            }
            Op::AddRow(m, v) => {
                acc(*m, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*v, &mut |s| {
                    let c = s.len();
                    for row in g.chunks_exact(c) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = G · Bᵀ
                acc(*a, &mut |s| {
                    let bd = tb.data();
                    let mut bt = vec![0.0; n * k];
                    for kk in 0..k {
                        for j in 0..n {
                            bt[j * k + kk] = bd[kk * n + j];
                        }
                    }
                    matmul_acc(g, &bt, s, m, n, k);
                });
                // dB = Aᵀ · G
                acc(*b, &mut |s| {
                    let ad = ta.data();
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let av = ad[r * k + kk];
                            if av == 0.0 {
                                continue;
                            }
                            let srow = &mut s[kk * n..(kk + 1) * n];
                            srow.iter_mut().zip(grow).for_each(|(s, g)| *s += av * g);
                        }
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * y[k];
                }
            }),
            Op::Ln(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / x[k];
                    }
                })
            }
            Op::Tanh(a) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }),
            Op::Atan(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / (1.0 + x[k] * x[k]);
                    }
                })
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        if x[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                })
            }
            Op::Square(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += 2.0 * x[k] * g[k];
                    }
                })
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)),
            Op::AddScalar(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        if x[k] >= *lo && x[k] <= *hi {
                            s[k] += g[k];
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::SumLast(a) => {
                let c = self.nodes[a.0].value.cols();
                acc(*a, &mut |s| {
                    for (row, gr) in s.chunks_exact_mut(c).zip(g) {
                        row.iter_mut().for_each(|s| *s += gr);
                    }
                })
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let c = self.nodes[p.0].value.cols();
                    acc(*p, &mut |s| {
                        for (r, row) in s.chunks_exact_mut(c).enumerate() {
                            let src = &g[r * total + offset..r * total + offset + c];
                            row.iter_mut().zip(src).for_each(|(s, g)| *s += g);
                        }
                    });
                    offset += c;
                }
            }
            Op::Slice { src, start } => {
                let c = self.nodes[src.0].value.cols();
                let len = node.value.cols();
                acc(*src, &mut |s| {
                    for (row, gr) in s.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                        row[*start..*start + len].iter_mut().zip(gr).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                acc(*a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let gs: f64 = grow.iter().sum();
                        for k in 0..c {
                            srow[k] += grow[k] - math::exp(yrow[k]) * gs;
                        }
                    }
                });
            }
            Op::Gather(a, idx) => {
                let c = self.nodes[a.0].value.cols();
                acc(*a, &mut |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        s[r * c + i] += g[r];
                    }
                });
            }
        }
    }
}

/// `out += a[m×k] · b[k×n]`, row-major.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    // four output rows per pass so each row of `b` is loaded once per block
    let mut r = 0;
    while r + 4 <= m {
        let (o0, rest) = out[r * n..(r + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for kk in 0..k {
            let (a0, a1, a2, a3) = (a[r * k + kk], a[(r + 1) * k + kk], a[(r + 2) * k + kk], a[(r + 3) * k + kk]);
            let brow = &b[kk * n..(kk + 1) * n];
            for ((((bv, x0), x1), x2), x3) in brow.iter().zip(o0.iter_mut()).zip(o1.iter_mut()).zip(o2.iter_mut()).zip(o3.iter_mut()) {
                *x0 += a0 * bv;
                *x1 += a1 * bv;
                *x2 += a2 * bv;
                *x3 += a3 * bv;
            }
        }
        r += 4;
    }
    for r in r..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for kk in 0..k {
            let av = a[r * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, b)| *o += av * b);
        }
    }
}
