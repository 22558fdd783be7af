//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Graph`]; node indices are
//! therefore already a topological order, and [`Graph::backward`] walks
//! them once from the loss down to index zero. Leaves created with
//! [`Graph::constant`] never receive gradients, which lets whole input
//! subtrees skip their backward work.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node on a [`Graph`].
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
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Mse {
        pred: Var,
        target: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that does not take part in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node {
            value,
            grad,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// Adds a length-`n` bias to every row of `[m×n]` (or to a length-`n` vector).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let needs = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `max(x, 0)`; the subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let needs = self.needs(&[x]);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let needs = self.needs(&[x]);
        self.push(out, Op::Sigmoid(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(libm::tanh);
        let needs = self.needs(&[x]);
        self.push(out, Op::Tanh(x), needs)
    }

    /// Valid cross-correlation with stride 1.
    ///
    /// `x: [Cin×L]`, `w: [Cout×Cin×K]`, `b: [Cout]` gives `[Cout×(L−K+1)]` with
    /// `out[o,t] = b[o] + Σ_{i,k} w[o,i,k]·x[i,t+k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (cin, len) = self.matrix_dims("conv1d", x)?;
        let (cout, wcin, k) = match self.shape(w) {
            [o, i, k] => (*o, *i, *k),
            s => return Err(Error::dim("conv1d", s, &[0, cin, 0])),
        };
        if wcin != cin {
            return Err(Error::dim("conv1d", self.shape(x), self.shape(w)));
        }
        if self.shape(b) != [cout] {
            return Err(Error::dim("conv1d", self.shape(w), self.shape(b)));
        }
        if k == 0 || k > len {
            return Err(Error::Config(format!(
                "conv1d kernel {k} does not fit input length {len}"
            )));
        }
        let lo = len - k + 1;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = self.value(b).data();
        let mut out = vec![0.0; cout * lo];
        for o in 0..cout {
            let orow = &mut out[o * lo..(o + 1) * lo];
            orow.iter_mut().for_each(|v| *v = bs[o]);
            for i in 0..cin {
                let xrow = &xs[i * len..(i + 1) * len];
                for kk in 0..k {
                    let wv = ws[(o * cin + i) * k + kk];
                    for (t, ov) in orow.iter_mut().enumerate() {
                        *ov += wv * xrow[t + kk];
                    }
                }
            }
        }
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(Tensor::new(&[cout, lo], out)?, Op::Conv1d { x, w, b }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_cols", x)?;
        if start + len > c {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[r, len], out)?, Op::SliceCols { x, start }, needs))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if *rows.get_or_insert(r) != r {
                return Err(Error::dim("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            total += c;
        }
        let rows = rows.unwrap_or(0);
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(Tensor::new(&[rows, total], out)?, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut cols = None;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_rows", p)?;
            if *cols.get_or_insert(c) != c {
                return Err(Error::dim("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::new(&[rows, cols.unwrap_or(0)], out)?,
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.matrix_dims("softmax_xent", logits)?;
        if labels.len() != b {
            return Err(Error::dim("softmax_xent", self.shape(logits), &[labels.len()]));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::Data(format!(
                "label {l} of trial {i} out of range for {k} classes"
            )));
        }
        let probs = softmax_rows(self.value(logits));
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = self.value(logits).row(i);
            loss -= row[l] - log_sum_exp(row);
        }
        loss /= b.max(1) as f64;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Mean of squared differences against a fixed target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::dim("mse", self.shape(pred), target.shape()));
        }
        let n = target.len().max(1) as f64;
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let needs = self.needs(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            needs,
        ))
    }

    /// Resets every gradient slot to zero.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
    }

    /// Accumulates `d root / d node` into every differentiable node.
    ///
    /// `root` must be a scalar. Intermediate gradients are recomputed from
    /// scratch; leaf gradients add onto whatever is already stored, so call
    /// [`Graph::zero_grad`] first for a fresh pass.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::dim("backward", self.shape(root), &[]));
        }
        for n in &mut self.nodes[..=root.0] {
            if !matches!(n.op, Op::Leaf) {
                n.grad.fill(0.0);
            }
        }
        self.nodes[root.0].grad.data_mut()[0] = 1.0;
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = match self.nodes[i].op {
                Op::Leaf => continue,
                ref op => op.clone(),
            };
            let g = core::mem::replace(&mut self.nodes[i].grad, Tensor::scalar(0.0));
            self.backward_node(i, &op, &g);
            self.nodes[i].grad = g;
        }
        Ok(())
    }

    fn grad_mut(&mut self, v: Var) -> Option<&mut Tensor> {
        let n = &mut self.nodes[v.0];
        n.needs_grad.then_some(&mut n.grad)
    }

    fn backward_node(&mut self, i: usize, op: &Op, g: &Tensor) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                let av = self.value(*a).clone();
                let bv = self.value(*b).clone();
                if let Some(da) = self.grad_mut(*a) {
                    gemm_nt_acc(g.data(), bv.data(), da.data_mut(), m, n, k);
                }
                if let Some(db) = self.grad_mut(*b) {
                    gemm_tn_acc(av.data(), g.data(), db.data_mut(), m, k, n);
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(dx) = self.grad_mut(*x) {
                    dx.add_assign(g);
                }
                if let Some(db) = self.grad_mut(*bias) {
                    let n = db.len().max(1);
                    for row in g.data().chunks(n) {
                        for (d, v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.grad_mut(*v) {
                        d.add_assign(g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).clone();
                let bv = self.value(*b).clone();
                if let Some(da) = self.grad_mut(*a) {
                    for ((d, gv), y) in da.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *d += gv * y;
                    }
                }
                if let Some(db) = self.grad_mut(*b) {
                    for ((d, gv), x) in db.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *d += gv * x;
                    }
                }
            }
            Op::Relu(x) => {
                let out = self.nodes[i].value.clone();
                if let Some(dx) = self.grad_mut(*x) {
                    for ((d, gv), y) in dx.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        if *y > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let out = self.nodes[i].value.clone();
                if let Some(dx) = self.grad_mut(*x) {
                    for ((d, gv), y) in dx.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(x) => {
                let out = self.nodes[i].value.clone();
                if let Some(dx) = self.grad_mut(*x) {
                    for ((d, gv), y) in dx.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *d += gv * (1.0 - y * y);
                    }
                }
            }
            Op::Conv1d { x, w, b } => self.conv1d_backward(*x, *w, *b, g),
            Op::Reshape(x) => {
                if let Some(dx) = self.grad_mut(*x) {
                    for (d, gv) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (r, len) = g.dims2().unwrap();
                if let Some(dx) = self.grad_mut(*x) {
                    let c = dx.shape()[1];
                    for row in 0..r {
                        for j in 0..len {
                            dx.data_mut()[row * c + start + j] += g.data()[row * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = g.dims2().unwrap();
                let mut offset = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    if let Some(dp) = self.grad_mut(*p) {
                        for row in 0..r {
                            for j in 0..c {
                                dp.data_mut()[row * c + j] += g.data()[row * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(dp) = self.grad_mut(*p) {
                        for (d, gv) in dp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *d += gv;
                        }
                    }
                    offset += n;
                }
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let scale = g.data()[0] / labels.len().max(1) as f64;
                if let Some(dl) = self.grad_mut(*logits) {
                    let k = probs.shape()[1];
                    for (row, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            dl.data_mut()[row * k + j] += scale * (probs.at2(row, j) - onehot);
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                let scale = 2.0 * g.data()[0] / target.len().max(1) as f64;
                let pv = self.value(*pred).clone();
                if let Some(dp) = self.grad_mut(*pred) {
                    for ((d, p), t) in dp.data_mut().iter_mut().zip(pv.data()).zip(target.data()) {
                        *d += scale * (p - t);
                    }
                }
            }
        }
    }

    fn conv1d_backward(&mut self, x: Var, w: Var, b: Var, g: &Tensor) {
        let (cin, len) = self.value(x).dims2().unwrap();
        let (cout, k) = (self.shape(w)[0], self.shape(w)[2]);
        let lo = len - k + 1;
        let gs = g.data();
        if let Some(db) = self.grad_mut(b) {
            for o in 0..cout {
                db.data_mut()[o] += gs[o * lo..(o + 1) * lo].iter().sum::<f64>();
            }
        }
        let xv = self.value(x).clone();
        if let Some(dw) = self.grad_mut(w) {
            let xs = xv.data();
            for o in 0..cout {
                let grow = &gs[o * lo..(o + 1) * lo];
                for i in 0..cin {
                    let xrow = &xs[i * len..(i + 1) * len];
                    for kk in 0..k {
                        let s: f64 = grow.iter().zip(&xrow[kk..kk + lo]).map(|(a, b)| a * b).sum();
                        dw.data_mut()[(o * cin + i) * k + kk] += s;
                    }
                }
            }
        }
        let wv = self.value(w).clone();
        if let Some(dx) = self.grad_mut(x) {
            let ws = wv.data();
            for o in 0..cout {
                let grow = &gs[o * lo..(o + 1) * lo];
                for i in 0..cin {
                    for kk in 0..k {
                        let wval = ws[(o * cin + i) * k + kk];
                        let dxrow = &mut dx.data_mut()[i * len + kk..i * len + kk + lo];
                        for (d, gv) in dxrow.iter_mut().zip(grow) {
                            *d += wval * gv;
                        }
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + libm::log(row.iter().map(|v| libm::exp(v - m)).sum::<f64>())
}

/// Row-wise softmax of a matrix (or of a single vector).
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = *logits.shape().last().unwrap_or(&1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k.max(1)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - m);
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Weights of one LSTM layer with gate blocks ordered `i, f, g, o`.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    /// `[d × 4H]`
    pub w_input: Var,
    /// `[H × 4H]`
    pub w_hidden: Var,
    /// `[4H]`
    pub bias: Var,
}

impl Graph {
    /// One LSTM step. Accepts `x: [d]` or `[B×d]` and state `[H]` or `[B×H]`;
    /// returns `(h_t, c_t)` as `[B×H]`.
    ///
    /// `i, f, o = σ(·)`, `g = tanh(·)`, `c_t = f⊙c_prev + i⊙g`, `h_t = o⊙tanh(c_t)`.
    pub fn lstm_cell(&mut self, x: Var, h_prev: Var, c_prev: Var, p: &LstmVars) -> Result<(Var, Var)> {
        let x = self.as_matrix(x)?;
        let h_prev = self.as_matrix(h_prev)?;
        let c_prev = self.as_matrix(c_prev)?;
        let hidden = self.shape(p.w_hidden)[0];
        if self.shape(p.w_hidden) != [hidden, 4 * hidden] || self.shape(p.bias) != [4 * hidden] {
            return Err(Error::dim("lstm_cell", self.shape(p.w_hidden), self.shape(p.bias)));
        }
        let xw = self.matmul(x, p.w_input)?;
        let hw = self.matmul(h_prev, p.w_hidden)?;
        let pre = self.add(xw, hw)?;
        let pre = self.add_bias(pre, p.bias)?;
        let gi = self.slice_cols(pre, 0, hidden)?;
        let gf = self.slice_cols(pre, hidden, hidden)?;
        let gg = self.slice_cols(pre, 2 * hidden, hidden)?;
        let go = self.slice_cols(pre, 3 * hidden, hidden)?;
        let i = self.sigmoid(gi);
        let f = self.sigmoid(gf);
        let g = self.tanh(gg);
        let o = self.sigmoid(go);
        let keep = self.mul(f, c_prev)?;
        let write = self.mul(i, g)?;
        let c = self.add(keep, write)?;
        let tc = self.tanh(c);
        let h = self.mul(o, tc)?;
        Ok((h, c))
    }

    fn as_matrix(&mut self, v: Var) -> Result<Var> {
        match self.shape(v) {
            [n] => {
                let n = *n;
                self.reshape(v, &[1, n])
            }
            [_, _] => Ok(v),
            s => Err(Error::dim("lstm_cell", s, &[0, 0])),
        }
    }
}
