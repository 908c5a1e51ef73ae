//! Wengert-style tape for reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly, appends one record, and returns a
//! [`Var`] handle. Records are stored in creation order, so operands always
//! precede their results and a single reverse sweep is a valid topological
//! traversal.

use super::tensor::Tensor;
use crate::error::{shape_err, DefmError, Result};

/// Handle to a value recorded on a [`Tape`].
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
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    Tanh(Var),
    Relu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Mean(Var),
    Sum(Var),
    Square(Var),
    Gather(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of primitive evaluations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records an input. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = Tensor::new(t.shape().to_vec(), t.into_data()).expect("valid tensor");
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DefmError::NonFinite { op: name });
        }
        let requires_grad = operands(&op).iter().any(|o| self.nodes[o.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, requires_grad))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_or_else(|| shape_err(op, format!("expected 2-D operand, got {:?}", self.value(v).shape())), Ok)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return shape_err(op, format!("{sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.dims2("matmul", a)?;
        let (k2, c) = self.dims2("matmul", b)?;
        if k != k2 {
            return shape_err("matmul", format!("inner extents {k} vs {k2}"));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), r, k, c);
        self.record("matmul", vec![r, c], out, Op::MatMul(a, b))
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.record(name, shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("subtract", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, name: &'static str, a: Var, row: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.dims2(name, a)?;
        let rl = self.value(row).len();
        if rl != c {
            return shape_err(name, format!("row of length {rl} against {c} columns"));
        }
        let bias = self.value(row).data();
        let out = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(bias).map(|(&x, &b)| f(x, b)))
            .collect();
        self.record(name, vec![r, c], out, op)
    }

    /// Adds a length-`c` row to every row of an `r×c` operand.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, |x, b| x + b, Op::AddRow(a, row))
    }

    /// Multiplies every row of an `r×c` operand by a length-`c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, |x, g| x * g, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x * k).collect();
        let shape = t.shape().to_vec();
        self.record("scale", shape, out, Op::Scale(a, k))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let out = transpose_kernel(self.value(a).data(), r, c);
        self.record("transpose", vec![c, r], out, Op::Transpose(a))
    }

    /// Concatenates 2-D operands with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no operands");
        };
        let (r, _) = self.dims2("concat", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2("concat", p)?;
            if pr != r {
                return shape_err("concat", format!("row counts {r} vs {pr}"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.record("concat", vec![r, total], out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("softmax_rows", a)?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            row.iter_mut().for_each(|x| *x /= sum);
        }
        self.record("softmax_rows", vec![r, c], out, Op::SoftmaxRows(a))
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.record(name, shape, out, op)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map("square", a, |x| x * x, Op::Square(a))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2("layer_norm", a)?;
        let mut out = self.value(a).data().to_vec();
        let mut inv_std = Vec::with_capacity(r);
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        self.record("layer_norm", vec![r, c], out, Op::LayerNorm { x: a, inv_std })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.record("mean", vec![1], vec![m], Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum::<f64>();
        self.record("sum", vec![1], vec![s], Op::Sum(a))
    }

    /// Picks flat (row-major) entries into a 1-D result.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        if indices.is_empty() {
            return shape_err("gather", "empty index list");
        }
        let src = self.value(a).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return shape_err("gather", format!("index {bad} out of {} entries", src.len()));
        }
        let out = indices.iter().map(|&i| src[i]).collect();
        self.record("gather", vec![indices.len()], out, Op::Gather(a, indices.to_vec()))
    }

    /// Runs the reverse sweep from a scalar `loss`.
    ///
    /// Gradients from a previous sweep are discarded first. When `loss` does
    /// not depend on any gradient-requiring input nothing is written.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(DefmError::EmptyTape);
        }
        let shape = self.value(loss).shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(DefmError::NotScalar(shape.to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: impl FnOnce(&mut [f64])) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let len = node.value.len();
        let buf = node.grad.get_or_insert_with(|| vec![0.0; len]);
        contrib(buf);
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = self.value(a).dims2().unwrap();
                let c = self.value(b).shape()[1];
                if self.requires_grad(a) {
                    let bv = self.value(b).data().to_vec();
                    self.accumulate(a, |da| matmul_bt_acc(g, &bv, da, r, c, k));
                }
                if self.requires_grad(b) {
                    let av = self.value(a).data().to_vec();
                    self.accumulate(b, |db| matmul_at_acc(&av, g, db, r, k, c));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, |d| axpy(d, g, 1.0));
                self.accumulate(b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(a, |d| axpy(d, g, 1.0));
                self.accumulate(b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                self.accumulate(a, |d| d.iter_mut().zip(g).zip(&bv).for_each(|((d, g), y)| *d += g * y));
                self.accumulate(b, |d| d.iter_mut().zip(g).zip(&av).for_each(|((d, g), x)| *d += g * x));
            }
            Op::AddRow(a, row) => {
                let c = self.value(row).len();
                self.accumulate(a, |d| axpy(d, g, 1.0));
                self.accumulate(row, |d| {
                    for chunk in g.chunks(c) {
                        axpy(d, chunk, 1.0);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let c = self.value(row).len();
                let av = self.value(a).data().to_vec();
                let rv = self.value(row).data().to_vec();
                self.accumulate(a, |d| {
                    for (dc, gc) in d.chunks_mut(c).zip(g.chunks(c)) {
                        dc.iter_mut().zip(gc).zip(&rv).for_each(|((d, g), s)| *d += g * s);
                    }
                });
                self.accumulate(row, |d| {
                    for (ac, gc) in av.chunks(c).zip(g.chunks(c)) {
                        d.iter_mut().zip(gc).zip(ac).for_each(|((d, g), x)| *d += g * x);
                    }
                });
            }
            Op::Scale(a, k) => self.accumulate(a, |d| axpy(d, g, k)),
            Op::Transpose(a) => {
                let (r, c) = self.value(a).dims2().unwrap();
                // g is c×r
                let gt = transpose_kernel(g, c, r);
                self.accumulate(a, |d| axpy(d, &gt, 1.0));
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[idx].value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let (r, w) = self.value(p).dims2().unwrap();
                    self.accumulate(p, |d| {
                        for i in 0..r {
                            axpy(&mut d[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w], 1.0);
                        }
                    });
                    offset += w;
                }
            }
            Op::SoftmaxRows(a) => {
                let c = self.nodes[idx].value.shape()[1];
                let y = self.nodes[idx].value.data().to_vec();
                self.accumulate(a, |d| {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        dr.iter_mut().zip(gr).zip(yr).for_each(|((d, g), y)| *d += y * (g - dot));
                    }
                });
            }
            Op::Tanh(a) => {
                let y = self.nodes[idx].value.data().to_vec();
                self.accumulate(a, |d| d.iter_mut().zip(g).zip(&y).for_each(|((d, g), y)| *d += g * (1.0 - y * y)));
            }
            Op::Relu(a) => {
                let x = self.value(a).data().to_vec();
                self.accumulate(a, |d| {
                    d.iter_mut().zip(g).zip(&x).for_each(|((d, g), x)| {
                        if *x > 0.0 {
                            *d += g
                        }
                    })
                });
            }
            Op::Square(a) => {
                let x = self.value(a).data().to_vec();
                self.accumulate(a, |d| d.iter_mut().zip(g).zip(&x).for_each(|((d, g), x)| *d += 2.0 * x * g));
            }
            Op::LayerNorm { x, inv_std } => {
                let c = self.nodes[idx].value.shape()[1];
                let y = self.nodes[idx].value.data().to_vec();
                self.accumulate(x, |d| {
                    for (((dr, gr), yr), inv) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).zip(&inv_std) {
                        let mean_g = gr.iter().sum::<f64>() / c as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                        dr.iter_mut()
                            .zip(gr)
                            .zip(yr)
                            .for_each(|((d, g), y)| *d += inv * (g - mean_g - y * mean_gy));
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                let s = g[0] / n;
                self.accumulate(a, |d| d.iter_mut().for_each(|d| *d += s));
            }
            Op::Sum(a) => self.accumulate(a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Gather(a, indices) => {
                self.accumulate(a, |d| {
                    for (&i, &gv) in indices.iter().zip(g) {
                        d[i] += gv;
                    }
                });
            }
        }
    }
}

fn operands(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => {
            vec![*a, *b]
        }
        Op::ConcatCols(parts) => parts.clone(),
        Op::Scale(a, _)
        | Op::Transpose(a)
        | Op::SoftmaxRows(a)
        | Op::Tanh(a)
        | Op::Relu(a)
        | Op::Mean(a)
        | Op::Sum(a)
        | Op::Square(a)
        | Op::Gather(a, _) => vec![*a],
        Op::LayerNorm { x, .. } => vec![*x],
    }
}

fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += k * s);
}

/// `A (r×k) · B (k×c)`.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for (arow, orow) in a.chunks(k).zip(out.chunks_mut(c)) {
        for (&av, brow) in arow.iter().zip(b.chunks(c)) {
            if av != 0.0 {
                axpy(orow, brow, av);
            }
        }
    }
    out
}

/// `dA += G (r×c) · Bᵀ` where `B` is `k×c`.
fn matmul_bt_acc(g: &[f64], b: &[f64], da: &mut [f64], r: usize, c: usize, k: usize) {
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        let darow = &mut da[i * k..(i + 1) * k];
        for (d, brow) in darow.iter_mut().zip(b.chunks(c)) {
            *d += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `dB += Aᵀ · G` where `A` is `r×k` and `G` is `r×c`.
fn matmul_at_acc(a: &[f64], g: &[f64], db: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av != 0.0 {
                axpy(&mut db[p * c..(p + 1) * c], grow, av);
            }
        }
    }
}

pub(crate) fn transpose_kernel(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
