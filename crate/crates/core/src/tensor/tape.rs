//! Reverse-mode tape.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order; `backward` walks it once in reverse. Gradients are
//! summed into each input, which is what lets one parameter feed several
//! paths (the slot parameters drive both dispatch and combine weights).

use super::contract::{contract, ContractSpec};
use super::ops::{self, Unary};
use super::{check_rank2, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Unary(Var, Unary),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    StandardizeRows { x: Var, inv_std: Vec<S> },
    L2NormalizeRows { x: Var, norms: Vec<S> },
    Contract(Var, Var, ContractSpec),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Diag(Var),
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradient buffer for `v`, allocated on first use; `None` if `v` needs no gradient.
fn grad_slot<'g, S: Scalar>(
    nodes: &[Node<S>],
    v: Var,
    grads: &'g mut [Option<Vec<S>>],
) -> Option<&'g mut Vec<S>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    let n = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
}

#[derive(Debug, Clone, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
    /// Test hook: scales every matmul left-operand gradient, to prove the
    /// gradient checker notices a wrong analytic gradient.
    corrupt_matmul_grad: Option<f64>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
            corrupt_matmul_grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[doc(hidden)]
    pub fn corrupt_matmul_gradient(&mut self, factor: f64) {
        self.corrupt_matmul_grad = Some(factor);
    }

    /// Records a leaf. It participates in backward iff `requires_grad` is set.
    pub fn leaf(&mut self, mut t: Tensor<S>) -> Var {
        t.clear_grad();
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, mut t: Tensor<S>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    /// Gradient as a tensor, zeros when the node received none.
    pub fn grad_tensor(&self, v: Var) -> Tensor<S> {
        let value = &self.nodes[v.0].value;
        let data = value
            .grad()
            .map(<[S]>::to_vec)
            .unwrap_or_else(|| vec![S::zero(); value.len()]);
        Tensor::new(value.shape(), data).expect("grad shape")
    }

    /// Clears all gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        debug_assert!(value.grad().is_none());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        check_rank2(op, self.value(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, p) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, p],
            });
        }
        let mut out = vec![S::zero(); m * p];
        ops::matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, p);
        let t = Tensor::new(&[m, p], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rank2("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(&[c, r], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Transpose(x), ng))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S, rec: Op<S>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, rec, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, op: &'static str, x: Var, row: Var, mul: bool) -> Result<Var> {
        let (n, d) = self.rank2(op, x)?;
        if self.value(row).len() != d || self.value(row).rank() > 2 {
            return Err(TensorError::Shape {
                op,
                lhs: vec![n, d],
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|xr| xr.iter().zip(r).map(|(&a, &b)| if mul { a * b } else { a + b }))
            .collect();
        let t = Tensor::new(&[n, d], data)?;
        let ng = self.ng(&[x, row]);
        let rec = if mul { Op::MulRow(x, row) } else { Op::AddRow(x, row) };
        Ok(self.push(t, rec, ng))
    }

    /// `x[n×d] + row[d]`, the row repeated over every `x` row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, row, false)
    }

    /// `x[n×d] ⊙ row[d]`, the row repeated over every `x` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, row, true)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&e| e * c).collect()).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(t, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&e| e + c).collect()).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(t, Op::AddScalar(x), ng)
    }

    /// `x · s` where `s` holds a single element.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(TensorError::Shape {
                op: "mul_scalar_var",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let c = self.value(s).data()[0];
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&e| e * c).collect())?;
        let ng = self.ng(&[x, s]);
        Ok(self.push(t, Op::MulScalarVar(x, s), ng))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let v = self.value(x);
        if f == Unary::Log {
            if let Some(bad) = v.data().iter().find(|&&e| e <= S::zero()) {
                return Err(TensorError::Domain {
                    op: "log",
                    value: bad.as_f64(),
                });
            }
        }
        let t = Tensor::new(v.shape(), v.data().iter().map(|&e| f.apply(e)).collect())?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Unary(x, f), ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu).expect("gelu is total")
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Elu).expect("elu is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid).expect("sigmoid is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp).expect("exp is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let rank = self.value(x).rank();
        if axis >= rank {
            return Err(TensorError::Axis { axis, rank });
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let v = self.value(x);
        let t = Tensor::new(v.shape(), ops::softmax_forward(v.data(), v.shape(), axis, false))?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Softmax(x, axis), ng))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let v = self.value(x);
        let t = Tensor::new(v.shape(), ops::softmax_forward(v.data(), v.shape(), axis, true))?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::LogSoftmax(x, axis), ng))
    }

    /// Per row: subtract the mean, divide by `sqrt(biased variance + eps)`.
    pub fn standardize_rows(&mut self, x: Var, eps: S) -> Result<Var> {
        if eps <= S::zero() {
            return Err(TensorError::Domain {
                op: "standardize_rows eps",
                value: eps.as_f64(),
            });
        }
        let (n, d) = self.rank2("standardize_rows", x)?;
        let src = self.value(x).data();
        let mut out = vec![S::zero(); n * d];
        let mut inv_std = Vec::with_capacity(n);
        let dd = S::lit(d as f64);
        for (row, o) in src.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().copied().sum::<S>() / dd;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dd;
            let is = (var + eps).sqrt().recip();
            for (oo, &v) in o.iter_mut().zip(row) {
                *oo = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::new(&[n, d], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::StandardizeRows { x, inv_std }, ng))
    }

    /// Divides each row by its Euclidean norm. A zero row is a domain error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.rank2("l2_normalize_rows", x)?;
        let src = self.value(x).data();
        let mut out = vec![S::zero(); n * d];
        let mut norms = Vec::with_capacity(n);
        for (row, o) in src.chunks(d).zip(out.chunks_mut(d)) {
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if norm <= S::zero() {
                return Err(TensorError::Domain {
                    op: "l2_normalize_rows",
                    value: 0.0,
                });
            }
            for (oo, &v) in o.iter_mut().zip(row) {
                *oo = v / norm;
            }
            norms.push(norm);
        }
        let t = Tensor::new(&[n, d], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::L2NormalizeRows { x, norms }, ng))
    }

    pub fn contract(&mut self, spec: &str, a: Var, b: Var) -> Result<Var> {
        let spec = ContractSpec::parse(spec)?;
        self.contract_spec(spec, a, b)
    }

    pub fn contract_spec(&mut self, spec: ContractSpec, a: Var, b: Var) -> Result<Var> {
        let t = contract(&spec, self.value(a), self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Contract(a, b, spec), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.rank2("slice_rows", x)?;
        if start + len > n {
            return Err(TensorError::Shape {
                op: "slice_rows",
                lhs: vec![n, d],
                rhs: vec![start, len],
            });
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let t = Tensor::new(&[len, d], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::SliceRows { x, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
        let (_, d) = self.rank2("concat_rows", first)?;
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (r, c) = self.rank2("concat_rows", p)?;
            if c != d {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: vec![r, c],
                });
            }
            data.extend_from_slice(self.value(p).data());
            n += r;
        }
        let t = Tensor::new(&[n, d], data)?;
        let ng = self.ng(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.rank2("slice_cols", x)?;
        if start + len > d {
            return Err(TensorError::Shape {
                op: "slice_cols",
                lhs: vec![n, d],
                rhs: vec![start, len],
            });
        }
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let t = Tensor::new(&[n, len], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let (n, _) = self.rank2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rank2("concat_cols", p)?;
            if r != n {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: vec![r, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(&[n, total], data)?;
        let ng = self.ng(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Rows of `x` picked by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.rank2("gather_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::Shape {
                op: "gather_rows",
                lhs: vec![n, d],
                rhs: vec![bad],
            });
        }
        let src = self.value(x).data();
        let data = rows.iter().flat_map(|&r| src[r * d..(r + 1) * d].iter().copied()).collect();
        let t = Tensor::new(&[rows.len(), d], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::GatherRows { x, rows: rows.to_vec() }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<S>();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<S>() / S::lit(v.len() as f64);
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rank2("diag", x)?;
        if r != c {
            return Err(TensorError::Shape {
                op: "diag",
                lhs: vec![r, c],
                rhs: vec![r, r],
            });
        }
        let src = self.value(x).data();
        let data = (0..r).map(|i| src[i * r + i]).collect();
        let t = Tensor::new(&[r], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Diag(x), ng))
    }

    /// Populates gradients of every node that depends on a grad-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(TensorError::Contract(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            *self.nodes[i].value.grad_mut_or_init() = g;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = grad_slot(&self.nodes, $v, grads) {
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let p = self.shape(*b)[1];
                let bd = self.value(*b).data();
                let ad = self.value(*a).data();
                let corrupt = self.corrupt_matmul_grad;
                acc!(*a, |ga| {
                    match corrupt {
                        None => ops::matmul_a_bt_acc(g, bd, ga, m, k, p),
                        Some(f) => {
                            let mut tmp = vec![S::zero(); m * k];
                            ops::matmul_a_bt_acc(g, bd, &mut tmp, m, k, p);
                            for (o, t) in ga.iter_mut().zip(tmp) {
                                *o = *o + t * S::lit(f);
                            }
                        }
                    }
                });
                acc!(*b, |gb| {
                    ops::matmul_at_b_acc(ad, g, gb, m, k, p);
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                acc!(*x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -S::one() } else { S::one() };
                acc!(*a, |ga| {
                    for (o, &v) in ga.iter_mut().zip(g) {
                        *o = *o + v;
                    }
                });
                acc!(*b, |gb| {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o = *o + sign * v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc!(*a, |ga| {
                    for ((o, &v), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *o = *o + v * bv;
                    }
                });
                acc!(*b, |gb| {
                    for ((o, &v), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *o = *o + v * av;
                    }
                });
            }
            Op::AddRow(x, row) => {
                let d = self.value(*row).len();
                acc!(*x, |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o = *o + v;
                    }
                });
                acc!(*row, |gr| {
                    for gchunk in g.chunks(d) {
                        for (o, &v) in gr.iter_mut().zip(gchunk) {
                            *o = *o + v;
                        }
                    }
                });
            }
            Op::MulRow(x, row) => {
                let d = self.value(*row).len();
                let (xd, rd) = (self.value(*x).data(), self.value(*row).data());
                acc!(*x, |gx| {
                    for (gxc, gc) in gx.chunks_mut(d).zip(g.chunks(d)) {
                        for ((o, &v), &r) in gxc.iter_mut().zip(gc).zip(rd) {
                            *o = *o + v * r;
                        }
                    }
                });
                acc!(*row, |gr| {
                    for (xc, gc) in xd.chunks(d).zip(g.chunks(d)) {
                        for ((o, &v), &xv) in gr.iter_mut().zip(gc).zip(xc) {
                            *o = *o + v * xv;
                        }
                    }
                });
            }
            Op::Scale(x, c) => {
                acc!(*x, |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o = *o + v * *c;
                    }
                });
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                acc!(*x, |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o = *o + v;
                    }
                });
            }
            Op::MulScalarVar(x, s) => {
                let c = self.value(*s).data()[0];
                let xd = self.value(*x).data();
                acc!(*x, |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o = *o + v * c;
                    }
                });
                acc!(*s, |gs| {
                    let dot = g.iter().zip(xd).map(|(&a, &b)| a * b).sum::<S>();
                    gs[0] = gs[0] + dot;
                });
            }
            Op::Unary(x, f) => {
                let xd = self.value(*x).data();
                acc!(*x, |gx| {
                    for (((o, &v), &xv), &yv) in gx.iter_mut().zip(g).zip(xd).zip(y) {
                        *o = *o + v * f.derivative(xv, yv);
                    }
                });
            }
            Op::Softmax(x, axis) | Op::LogSoftmax(x, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, len, inner) = ops::axis_split(node.value.shape(), *axis);
                acc!(*x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let idx = |j: usize| base + j * inner;
                            if log {
                                let gs = (0..len).map(|j| g[idx(j)]).sum::<S>();
                                for j in 0..len {
                                    let p = y[idx(j)].exp();
                                    gx[idx(j)] = gx[idx(j)] + g[idx(j)] - p * gs;
                                }
                            } else {
                                let dot = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum::<S>();
                                for j in 0..len {
                                    gx[idx(j)] = gx[idx(j)] + y[idx(j)] * (g[idx(j)] - dot);
                                }
                            }
                        }
                    }
                });
            }
            Op::StandardizeRows { x, inv_std } => {
                let d = self.shape(*x)[1];
                let dd = S::lit(d as f64);
                acc!(*x, |gx| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let gsum = gr.iter().copied().sum::<S>();
                        let gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<S>();
                        for j in 0..d {
                            let v = is / dd * (dd * gr[j] - gsum - yr[j] * gy);
                            gx[r * d + j] = gx[r * d + j] + v;
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let d = self.shape(*x)[1];
                acc!(*x, |gx| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<S>();
                        for j in 0..d {
                            gx[r * d + j] = gx[r * d + j] + (gr[j] - yr[j] * gy) / nrm;
                        }
                    }
                });
            }
            Op::Contract(a, b, spec) => {
                let gt = Tensor::new(node.value.shape(), g.to_vec()).expect("grad shape");
                let (av, bv) = (self.value(*a), self.value(*b));
                acc!(*a, |ga| {
                    let d = contract(&spec.grad_a(), &gt, bv).expect("validated spec");
                    for (o, &v) in ga.iter_mut().zip(d.data()) {
                        *o = *o + v;
                    }
                });
                acc!(*b, |gb| {
                    let d = contract(&spec.grad_b(), &gt, av).expect("validated spec");
                    for (o, &v) in gb.iter_mut().zip(d.data()) {
                        *o = *o + v;
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let d = self.shape(*x)[1];
                acc!(*x, |gx| {
                    for (o, &v) in gx[start * d..].iter_mut().zip(g) {
                        *o = *o + v;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc!(p, |gp| {
                        for (o, &v) in gp.iter_mut().zip(&g[off..off + len]) {
                            *o = *o + v;
                        }
                    });
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let d = self.shape(*x)[1];
                let w = node.value.shape()[1];
                acc!(*x, |gx| {
                    for (r, gc) in g.chunks(w).enumerate() {
                        for (j, &v) in gc.iter().enumerate() {
                            let k = r * d + start + j;
                            gx[k] = gx[k] + v;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    acc!(p, |gp| {
                        for (r, gc) in g.chunks(total).enumerate() {
                            for j in 0..w {
                                gp[r * w + j] = gp[r * w + j] + gc[off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::GatherRows { x, rows } => {
                let d = self.shape(*x)[1];
                acc!(*x, |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            gx[r * d + j] = gx[r * d + j] + g[k * d + j];
                        }
                    }
                });
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = if matches!(node.op, Op::Mean(_)) {
                    g[0] / S::lit(n as f64)
                } else {
                    g[0]
                };
                acc!(*x, |gx| {
                    for o in gx.iter_mut() {
                        *o = *o + v;
                    }
                });
            }
            Op::Diag(x) => {
                let r = self.shape(*x)[0];
                acc!(*x, |gx| {
                    for i in 0..r {
                        gx[i * r + i] = gx[i * r + i] + g[i];
                    }
                });
            }
        }
    }
}
