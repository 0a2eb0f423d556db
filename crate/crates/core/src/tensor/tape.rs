use std::sync::Arc;

use super::conv::ConvMap;
use super::kernels::{axpy, dot, matmul_nn, matmul_nt, matmul_tn, transpose};
use super::Tensor;
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, len: usize, inner: usize },
    LogSoftmax { x: Var, len: usize, inner: usize },
    GatherRows { x: Var, idx: Arc<[usize]> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    MeanRows(Var),
    NormalizeRows(Var),
    SparseConv { x: Var, w: Var, map: Arc<ConvMap> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of a forward pass.
///
/// Nodes are appended as operations run, so every node's inputs precede it.
/// A tape is built fresh for each forward pass and used from one thread.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which no leaf requires a gradient; used for evaluation.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, v: Var) -> bool {
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

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn matrix_dims(&self, v: Var) -> Option<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    // ---------------------------------------------------------------- linear

    /// Matrix product of two 2-D values.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (Some((m, k)), Some((k2, n))) = (self.matrix_dims(a), self.matrix_dims(b)) else {
            return Err(self.dim_err("matmul", a, b));
        };
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let Some((r, c)) = self.matrix_dims(a) else {
            return Err(Error::Contract(format!(
                "transpose needs a matrix, got {:?}",
                self.shape(a)
            )));
        };
        let out = transpose(self.value(a).data(), r, c);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    // ----------------------------------------------------------- elementwise

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(va.shape().to_vec(), data)
        } else if vb.is_scalar() {
            let y = vb.item();
            let data = va.data().iter().map(|&x| f(x, y)).collect();
            Tensor::from_parts(va.shape().to_vec(), data)
        } else if va.is_scalar() {
            let x = va.item();
            let data = vb.data().iter().map(|&y| f(x, y)).collect();
            Tensor::from_parts(vb.shape().to_vec(), data)
        } else {
            return Err(self.dim_err(name, a, b));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    /// Element-wise sum; shapes must match or one side must be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    /// Adds a `[C]` (or `[1×C]`) bias to every row of an `[R×C]` value.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let Some((r, c)) = self.matrix_dims(x) else {
            return Err(self.dim_err("add_bias", x, bias));
        };
        if self.value(bias).numel() != c {
            return Err(self.dim_err("add_bias", x, bias));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::from_parts(vec![r, c], data), Op::AddBias(x, bias), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log; every input element must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Contract(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    /// `ln(1 + e^x)` in overflow-safe form.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `[R×C] → [1×C]` column means.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let Some((r, c)) = self.matrix_dims(a) else {
            return Err(Error::Contract("mean_rows needs a matrix".into()));
        };
        let mut out = vec![0.0; c];
        for row in self.value(a).data().chunks_exact(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = 1.0 / r as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![1, c], out), Op::MeanRows(a), rg))
    }

    fn axis_layout(&self, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "axis {axis} invalid for shape {shape:?}"
            )));
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        Ok((outer, shape[axis], inner))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_layout(x, axis)?;
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |a: usize| base + a * inner;
                let max = (0..len).map(|a| data[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (data[idx(a)] - max).exp();
                    data[idx(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    data[idx(a)] /= z;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax { x, len, inner }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_layout(x, axis)?;
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |a: usize| base + a * inner;
                let max = (0..len).map(|a| data[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|a| (data[idx(a)] - max).exp()).sum();
                let lse = max + z.ln();
                for a in 0..len {
                    data[idx(a)] -= lse;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::LogSoftmax { x, len, inner },
            rg,
        ))
    }

    /// Row softmax of an `[R×C]` value where entries with `visible == false`
    /// are excluded (treated as −∞). A row with no visible entry is treated
    /// as fully visible.
    pub fn masked_softmax(&mut self, x: Var, visible: &[bool]) -> Result<Var> {
        let Some((r, c)) = self.matrix_dims(x) else {
            return Err(Error::Contract("masked_softmax needs a matrix".into()));
        };
        if visible.len() != r * c {
            return Err(Error::Dimension {
                op: "masked_softmax",
                lhs: vec![r, c],
                rhs: vec![visible.len()],
            });
        }
        let mut data = self.value(x).data().to_vec();
        for (row, vis) in data.chunks_exact_mut(c).zip(visible.chunks_exact(c)) {
            let any = vis.iter().any(|&v| v);
            let open = |j: usize| !any || vis[j];
            let max = (0..c)
                .filter(|&j| open(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                if open(j) {
                    row[j] = (row[j] - max).exp();
                    z += row[j];
                } else {
                    row[j] = 0.0;
                }
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(x);
        // Masked entries are exact zeros, so the plain softmax backward rule
        // gives them zero gradient.
        Ok(self.push(
            Tensor::from_parts(vec![r, c], data),
            Op::Softmax { x, len: c, inner: 1 },
            rg,
        ))
    }

    // ------------------------------------------------------------ structural

    /// Selects rows by index; the backward pass scatter-adds.
    pub fn gather_rows(&mut self, x: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var> {
        let idx: Arc<[usize]> = idx.into();
        let v = self.value(x);
        let n = v.rows();
        let c = v.cols();
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= n {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    len: n,
                });
            }
            data.extend_from_slice(v.row(i));
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::GatherRows { x, idx }, rg))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let r = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match self.matrix_dims(p) {
                Some((pr, pc)) if pr == r => widths.push(pc),
                _ => return Err(self.dim_err("concat_cols", first, p)),
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(row));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![r, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let c = self.value(first).cols();
        let mut rows = 0;
        for &p in parts {
            match self.matrix_dims(p) {
                Some((pr, pc)) if pc == c => rows += pr,
                _ => return Err(self.dim_err("concat_rows", first, p)),
            }
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let Some((r, c)) = self.matrix_dims(x) else {
            return Err(Error::Contract("slice_cols needs a matrix".into()));
        };
        if start >= end || end > c {
            return Err(Error::Index {
                op: "slice_cols",
                index: end,
                len: c,
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for row in self.value(x).data().chunks_exact(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![r, w], data),
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Divides each row by its L2 norm (clamped below at 1e-12).
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let Some((r, c)) = self.matrix_dims(x) else {
            return Err(Error::Contract("normalize_rows needs a matrix".into()));
        };
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let norm = dot(row, row).sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![r, c], data), Op::NormalizeRows(x), rg))
    }

    /// Gather–matmul–scatter convolution: output row `o` is the sum over the
    /// map's pairs `(k, i, o)` of `x[i] · w[k]`. The kernel's last two extents
    /// are `Cin×Cout`; the leading extents multiply to the kernel volume.
    pub fn sparse_conv(&mut self, x: Var, w: Var, map: Arc<ConvMap>) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() < 3 || xs.len() != 2 {
            return Err(self.dim_err("sparse_conv", x, w));
        }
        let (cin, cout) = (ws[ws.len() - 2], ws[ws.len() - 1]);
        let volume: usize = ws[..ws.len() - 2].iter().product();
        if cin != xs[1] || volume != map.kernel_volume() || xs[0] != map.n_in() {
            return Err(self.dim_err("sparse_conv", x, w));
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let slab = cin * cout;
        let mut out = vec![0.0; map.n_out() * cout];
        for (o, o_row) in out.chunks_exact_mut(cout).enumerate() {
            for &(k, i) in map.inputs_of(o) {
                let x_row = &xd[i as usize * cin..(i as usize + 1) * cin];
                let wk = &wd[k as usize * slab..(k as usize + 1) * slab];
                for (ci, &xv) in x_row.iter().enumerate() {
                    if xv != 0.0 {
                        axpy(xv, &wk[ci * cout..(ci + 1) * cout], o_row);
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::from_parts(vec![map.n_out(), cout], out),
            Op::SparseConv { x, w, map },
            rg,
        ))
    }

    // -------------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients accumulate into every leaf that requires one; calling
    /// `backward` again without [`Tape::zero_grad`] adds to them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                }
                continue;
            }
            self.backward_node(id, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    send(*a, matmul_nt(g, val(*b), m, n, k));
                }
                if self.rg(*b) {
                    send(*b, matmul_tn(val(*a), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                send(*a, transpose(g, c, r));
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                send(*a, reduce_to(g, self.value(*a).numel(), 1.0));
                send(*b, reduce_to(g, self.value(*b).numel(), sign));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.rg(*a) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * pick(vb, i)).collect();
                    send(*a, reduce_to(&full, va.len(), 1.0));
                }
                if self.rg(*b) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * pick(va, i)).collect();
                    send(*b, reduce_to(&full, vb.len(), 1.0));
                }
            }
            Op::AddScalar(a) => send(*a, g.to_vec()),
            Op::Scale(a, c) => send(*a, g.iter().map(|gi| gi * c).collect()),
            Op::AddBias(x, b) => {
                send(*x, g.to_vec());
                let c = self.value(*b).numel();
                let mut gb = vec![0.0; c];
                for row in g.chunks_exact(c) {
                    gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                }
                send(*b, gb);
            }
            Op::Tanh(a) => send(*a, zip_map(g, y, |gi, yi| gi * (1.0 - yi * yi))),
            Op::Relu(a) => send(
                *a,
                zip_map(g, val(*a), |gi, xi| if xi > 0.0 { gi } else { 0.0 }),
            ),
            Op::Sigmoid(a) => send(*a, zip_map(g, y, |gi, yi| gi * yi * (1.0 - yi))),
            Op::Exp(a) => send(*a, zip_map(g, y, |gi, yi| gi * yi)),
            Op::Log(a) => send(*a, zip_map(g, val(*a), |gi, xi| gi / xi)),
            Op::Softplus(a) => send(*a, zip_map(g, val(*a), |gi, xi| gi * sigmoid(xi))),
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::MeanRows(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let inv = 1.0 / r as f64;
                let row: Vec<f64> = g.iter().map(|gi| gi * inv).collect();
                let mut out = Vec::with_capacity(r * c);
                for _ in 0..r {
                    out.extend_from_slice(&row);
                }
                send(*a, out);
            }
            Op::Softmax { x, len, inner } => {
                let mut dx = vec![0.0; y.len()];
                for_each_slice(y.len(), *len, *inner, |idx| {
                    let s: f64 = idx.clone().map(|p| g[p] * y[p]).sum();
                    for p in idx {
                        dx[p] = y[p] * (g[p] - s);
                    }
                });
                send(*x, dx);
            }
            Op::LogSoftmax { x, len, inner } => {
                let mut dx = vec![0.0; y.len()];
                for_each_slice(y.len(), *len, *inner, |idx| {
                    let s: f64 = idx.clone().map(|p| g[p]).sum();
                    for p in idx {
                        dx[p] = g[p] - y[p].exp() * s;
                    }
                });
                send(*x, dx);
            }
            Op::GatherRows { x, idx } => {
                let c = self.value(*x).cols();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g[r * c..(r + 1) * c];
                    dx[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
                send(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(self.value(p).numel());
                        for row in g.chunks_exact(total) {
                            dp.extend_from_slice(&row[offset..offset + w]);
                        }
                        send(p, dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    send(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let w = node.value.cols();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (drow, grow) in dx.chunks_exact_mut(c).zip(g.chunks_exact(w)) {
                    drow[*start..*start + w].copy_from_slice(grow);
                }
                send(*x, dx);
            }
            Op::NormalizeRows(x) => {
                let c = self.value(*x).cols();
                let xv = val(*x);
                let mut dx = vec![0.0; xv.len()];
                for ((drow, xrow), (yrow, grow)) in dx
                    .chunks_exact_mut(c)
                    .zip(xv.chunks_exact(c))
                    .zip(y.chunks_exact(c).zip(g.chunks_exact(c)))
                {
                    let raw = dot(xrow, xrow).sqrt();
                    if raw < NORM_EPS {
                        drow.iter_mut().zip(grow).for_each(|(d, gi)| *d = gi / NORM_EPS);
                        continue;
                    }
                    let proj = dot(yrow, grow);
                    for j in 0..c {
                        drow[j] = (grow[j] - yrow[j] * proj) / raw;
                    }
                }
                send(*x, dx);
            }
            Op::SparseConv { x, w, map } => {
                let ws = self.shape(*w);
                let (cin, cout) = (ws[ws.len() - 2], ws[ws.len() - 1]);
                let slab = cin * cout;
                let xd = val(*x);
                let wd = val(*w);
                if self.rg(*x) {
                    // Kernel slices as Cout×Cin, so rows accumulate by axpy.
                    let wt: Vec<f64> = wd.chunks_exact(slab).flat_map(|wk| transpose(wk, cin, cout)).collect();
                    let mut dx = vec![0.0; xd.len()];
                    for (i, dx_row) in dx.chunks_exact_mut(cin).enumerate() {
                        for &(k, o) in map.outputs_of(i) {
                            let g_row = &g[o as usize * cout..(o as usize + 1) * cout];
                            let wk = &wt[k as usize * slab..(k as usize + 1) * slab];
                            for (co, &gv) in g_row.iter().enumerate() {
                                if gv != 0.0 {
                                    axpy(gv, &wk[co * cin..(co + 1) * cin], dx_row);
                                }
                            }
                        }
                    }
                    send(*x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; wd.len()];
                    for o in 0..map.n_out() {
                        let g_row = &g[o * cout..(o + 1) * cout];
                        for &(k, i) in map.inputs_of(o) {
                            let x_row = &xd[i as usize * cin..(i as usize + 1) * cin];
                            let dwk = &mut dw[k as usize * slab..(k as usize + 1) * slab];
                            for (ci, &xv) in x_row.iter().enumerate() {
                                if xv != 0.0 {
                                    axpy(xv, g_row, &mut dwk[ci * cout..(ci + 1) * cout]);
                                }
                            }
                        }
                    }
                    send(*w, dw);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn zip_map(g: &[f64], v: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.iter().zip(v).map(|(&a, &b)| f(a, b)).collect()
}

// Element `i` of a value that is either full-size or a broadcast scalar.
fn pick(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

// Sums a full-size gradient down to a broadcast scalar when needed.
fn reduce_to(g: &[f64], numel: usize, sign: f64) -> Vec<f64> {
    if numel == g.len() {
        g.iter().map(|x| sign * x).collect()
    } else {
        vec![sign * g.iter().sum::<f64>()]
    }
}

fn for_each_slice(
    total: usize,
    len: usize,
    inner: usize,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    let outer = total / (len * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            f((base..base + len * inner).step_by(inner));
        }
    }
}
