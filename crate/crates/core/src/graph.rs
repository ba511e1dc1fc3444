//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A [`Graph`] owns every tensor produced during a forward pass. Operations
//! append a node holding the output value, the op kind and the ids of its
//! inputs, so the node list is topologically ordered by construction.
//! [`Graph::backward`] walks the tape once in reverse and accumulates
//! vector-Jacobian products.
//!
//! Reductions always run left to right over the flat buffer, so two runs
//! with the same inputs produce bit-identical values and gradients.

use crate::error::{shape_err, MetfaError, Result};
use crate::tensor::{logsumexp, softmax, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation kinds recorded on the tape, with whatever the backward pass
/// needs beyond the input and output values.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    DivCol(Var, Var),
    Shift(Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    XLogX(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanCols(Var),
    MaxRows(Var, Vec<usize>),
    MinRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormRows(Var, Vec<bool>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    PairwiseSqDist(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape. One graph per forward pass; it is not meant to be shared
/// between threads.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` was not reachable.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ----- forward ops -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(self.val(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_map(self.val(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_map(self.val(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_map(self.val(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x + row` with the `1 × d` row broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, d) = self.val(x).dims2()?;
        let (r1, d2) = self.val(row).dims2()?;
        if r1 != 1 || d2 != d {
            return shape_err(format!("add_row {n}x{d} + {r1}x{d2}"));
        }
        let b = self.val(row).data().to_vec();
        let mut out = self.val(x).clone();
        for chunk in out.data_mut().chunks_mut(d) {
            for (o, bv) in chunk.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(x, row), &[x, row]))
    }

    /// `x / col` with the `n × 1` column broadcast across every column of `x`.
    pub fn div_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (n, d) = self.val(x).dims2()?;
        let (n2, c1) = self.val(col).dims2()?;
        if n2 != n || c1 != 1 {
            return shape_err(format!("div_col {n}x{d} / {n2}x{c1}"));
        }
        let c = self.val(col).data().to_vec();
        if let Some(bad) = c.iter().find(|v| !v.is_finite()) {
            return Err(MetfaError::Numeric(format!("division by non-finite {bad}")));
        }
        if let Some(bad) = c.iter().find(|v| **v <= 0.0) {
            return Err(MetfaError::Domain(format!("division by non-positive {bad}")));
        }
        let mut out = self.val(x).clone();
        for (chunk, cv) in out.data_mut().chunks_mut(d).zip(&c) {
            for o in chunk {
                *o /= cv;
            }
        }
        Ok(self.push(out, Op::DivCol(x, col), &[x, col]))
    }

    /// `x + c` elementwise.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let out = self.val(x).map(|v| v + c);
        self.push(out, Op::Shift(x), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.val(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.val(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.val(x).map(f64::exp);
        self.push(out, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.val(x).data().iter().find(|v| **v <= 0.0) {
            return Err(MetfaError::Domain(format!("log of non-positive {bad}")));
        }
        let out = self.val(x).map(f64::ln);
        Ok(self.push(out, Op::Log(x), &[x]))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.val(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    /// `x · ln x` elementwise with `0 · ln 0 = 0`.
    ///
    /// The derivative `ln x + 1` is unbounded at zero; the backward pass
    /// uses 0 there.
    pub fn xlogx(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.val(x).data().iter().find(|v| **v < 0.0) {
            return Err(MetfaError::Domain(format!("x·ln x of negative {bad}")));
        }
        let out = self.val(x).map(|v| if v == 0.0 { 0.0 } else { v * v.ln() });
        Ok(self.push(out, Op::XLogX(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.val(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(out, Op::Mean(x), &[x])
    }

    /// Per-row sum: `n × d → n × 1`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let (n, _) = t.dims2()?;
        let out = Tensor::matrix(n, 1, (0..n).map(|i| t.row(i).iter().sum()).collect())?;
        Ok(self.push(out, Op::SumRows(x), &[x]))
    }

    /// Column means over all rows: `n × d → 1 × d`.
    pub fn mean_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let (n, d) = t.dims2()?;
        let mut acc = vec![0.0; d];
        for i in 0..n {
            for (a, v) in acc.iter_mut().zip(t.row(i)) {
                *a += v;
            }
        }
        let out = Tensor::matrix(1, d, acc.into_iter().map(|v| v / n as f64).collect())?;
        Ok(self.push(out, Op::MeanCols(x), &[x]))
    }

    fn extreme_rows(&self, x: Var, want_max: bool) -> Result<(Tensor, Vec<usize>)> {
        let t = self.val(x);
        let (n, _) = t.dims2()?;
        let mut idx = Vec::with_capacity(n);
        let mut vals = Vec::with_capacity(n);
        for i in 0..n {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                let better = if want_max { v > row[best] } else { v < row[best] };
                if better {
                    best = j;
                }
            }
            idx.push(best);
            vals.push(row[best]);
        }
        Ok((Tensor::matrix(n, 1, vals)?, idx))
    }

    /// Per-row maximum. The gradient goes to the first attaining column.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (out, idx) = self.extreme_rows(x, true)?;
        Ok(self.push(out, Op::MaxRows(x, idx), &[x]))
    }

    /// Per-row minimum. The gradient goes to the first attaining column.
    pub fn min_rows(&mut self, x: Var) -> Result<Var> {
        let (out, idx) = self.extreme_rows(x, false)?;
        Ok(self.push(out, Op::MinRows(x, idx), &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let (n, d) = t.dims2()?;
        let data: Vec<f64> = (0..n).flat_map(|i| softmax(t.row(i))).collect();
        let out = Tensor::matrix(n, d, data)?;
        Ok(self.push(out, Op::SoftmaxRows(x), &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let (n, d) = t.dims2()?;
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = t.row(i);
            let lse = logsumexp(row);
            data.extend(row.iter().map(|v| v - lse));
        }
        let out = Tensor::matrix(n, d, data)?;
        Ok(self.push(out, Op::LogSoftmaxRows(x), &[x]))
    }

    /// Row L2 norms `n × d → n × 1`, clamped below at `floor`.
    ///
    /// Returns the number of clamped rows alongside the output. Clamped rows
    /// get a zero gradient.
    pub fn l2_norm_rows(&mut self, x: Var, floor: f64) -> Result<(Var, usize)> {
        let t = self.val(x);
        let (n, _) = t.dims2()?;
        let mut clamped = Vec::with_capacity(n);
        let mut vals = Vec::with_capacity(n);
        for i in 0..n {
            let nrm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            clamped.push(nrm < floor);
            vals.push(nrm.max(floor));
        }
        let count = clamped.iter().filter(|c| **c).count();
        let out = Tensor::matrix(n, 1, vals)?;
        Ok((self.push(out, Op::L2NormRows(x, clamped), &[x]), count))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat of nothing");
        }
        let d = self.val(parts[0]).dims2()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.val(p).dims2()?;
            if c != d {
                return shape_err(format!("concat_rows width {c} vs {d}"));
            }
            rows += r;
            data.extend_from_slice(self.val(p).data());
        }
        let out = Tensor::matrix(rows, d, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat of nothing");
        }
        let n = self.val(parts[0]).dims2()?.0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.val(p).dims2()?;
            if r != n {
                return shape_err(format!("concat_cols height {r} vs {n}"));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.val(p).row(i));
            }
        }
        let out = Tensor::matrix(n, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.val(x).gather_rows(idx)?;
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    /// Squared Euclidean distances between the rows of `a` and the rows of `b`.
    pub fn pairwise_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (n, d) = ta.dims2()?;
        let (m, d2) = tb.dims2()?;
        if d != d2 {
            return shape_err(format!("pairwise_sqdist width {d} vs {d2}"));
        }
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let ra = ta.row(i);
            for j in 0..m {
                data.push(ra.iter().zip(tb.row(j)).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        let out = Tensor::matrix(n, m, data)?;
        Ok(self.push(out, Op::PairwiseSqDist(a, b), &[a, b]))
    }

    // ----- reverse pass -----

    /// Back-propagates from a scalar `loss` and returns gradients for every
    /// node on the tape. The tape is left intact, so several backward passes
    /// over one forward pass are allowed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return shape_err("backward on an empty tape");
        }
        if self.val(loss).numel() != 1 {
            return shape_err(format!("loss must be scalar, got {:?}", self.val(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.val(loss).shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul(&tb.transpose()?)?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, ta.transpose()?.matmul(g)?)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?)?,
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.val(*b), |x, y| x * y)?;
                let gb = g.zip_map(self.val(*a), |x, y| x * y)?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone())?;
                let (n, d) = g.dims2()?;
                let mut acc = vec![0.0; d];
                for i in 0..n {
                    for (a, v) in acc.iter_mut().zip(g.row(i)) {
                        *a += v;
                    }
                }
                self.accumulate(grads, *row, Tensor::matrix(1, d, acc)?)?;
            }
            Op::DivCol(x, col) => {
                let (tx, tc) = (self.val(*x), self.val(*col));
                let (n, d) = tx.dims2()?;
                let mut gx = g.clone();
                let mut gc = vec![0.0; n];
                for (i, gci) in gc.iter_mut().enumerate() {
                    let c = tc.data()[i];
                    let mut s = 0.0;
                    for (gv, xv) in g.row(i).iter().zip(tx.row(i)) {
                        s += gv * xv;
                    }
                    *gci = -s / (c * c);
                    for v in &mut gx.data_mut()[i * d..(i + 1) * d] {
                        *v /= c;
                    }
                }
                self.accumulate(grads, *x, gx)?;
                self.accumulate(grads, *col, Tensor::matrix(n, 1, gc)?)?;
            }
            Op::Shift(x) => self.accumulate(grads, *x, g.clone())?,
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s))?,
            Op::Relu(x) => {
                let gx = g.zip_map(self.val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Exp(x) => self.accumulate(grads, *x, g.zip_map(y, |a, b| a * b)?)?,
            Op::Log(x) => self.accumulate(grads, *x, g.zip_map(self.val(*x), |a, b| a / b)?)?,
            Op::Square(x) => {
                self.accumulate(grads, *x, g.zip_map(self.val(*x), |a, b| 2.0 * a * b)?)?
            }
            Op::XLogX(x) => {
                let gx = g.zip_map(self.val(*x), |a, b| if b > 0.0 { a * (b.ln() + 1.0) } else { 0.0 })?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Sum(x) => {
                let gv = g.item()?;
                self.accumulate(grads, *x, Tensor::full(self.val(*x).shape(), gv))?;
            }
            Op::Mean(x) => {
                let t = self.val(*x);
                let gv = g.item()? / t.numel() as f64;
                self.accumulate(grads, *x, Tensor::full(t.shape(), gv))?;
            }
            Op::SumRows(x) => {
                let (n, d) = self.val(*x).dims2()?;
                let data = (0..n).flat_map(|i| std::iter::repeat_n(g.data()[i], d)).collect();
                self.accumulate(grads, *x, Tensor::matrix(n, d, data)?)?;
            }
            Op::MeanCols(x) => {
                let (n, d) = self.val(*x).dims2()?;
                let row: Vec<f64> = g.data().iter().map(|v| v / n as f64).collect();
                let data = (0..n).flat_map(|_| row.iter().copied()).collect();
                self.accumulate(grads, *x, Tensor::matrix(n, d, data)?)?;
            }
            Op::MaxRows(x, idx) | Op::MinRows(x, idx) => {
                let (n, d) = self.val(*x).dims2()?;
                let mut data = vec![0.0; n * d];
                for (i, &j) in idx.iter().enumerate() {
                    data[i * d + j] = g.data()[i];
                }
                self.accumulate(grads, *x, Tensor::matrix(n, d, data)?)?;
            }
            Op::SoftmaxRows(x) => {
                let (n, d) = y.dims2()?;
                let mut data = Vec::with_capacity(n * d);
                for i in 0..n {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    data.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                self.accumulate(grads, *x, Tensor::matrix(n, d, data)?)?;
            }
            Op::LogSoftmaxRows(x) => {
                let (n, d) = y.dims2()?;
                let mut data = Vec::with_capacity(n * d);
                for i in 0..n {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let gsum: f64 = gr.iter().sum();
                    data.extend(yr.iter().zip(gr).map(|(yv, gv)| gv - yv.exp() * gsum));
                }
                self.accumulate(grads, *x, Tensor::matrix(n, d, data)?)?;
            }
            Op::L2NormRows(x, clamped) => {
                let tx = self.val(*x);
                let (n, d) = tx.dims2()?;
                let mut data = vec![0.0; n * d];
                for i in 0..n {
                    if clamped[i] {
                        continue;
                    }
                    let k = g.data()[i] / y.data()[i];
                    for (o, xv) in data[i * d..(i + 1) * d].iter_mut().zip(tx.row(i)) {
                        *o = k * xv;
                    }
                }
                self.accumulate(grads, *x, Tensor::matrix(n, d, data)?)?;
            }
            Op::ConcatRows(parts) => {
                let d = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.val(p).rows();
                    let slice = g.data()[offset * d..(offset + r) * d].to_vec();
                    self.accumulate(grads, p, Tensor::matrix(r, d, slice)?)?;
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let (n, total) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let c = self.val(p).cols();
                    let mut data = Vec::with_capacity(n * c);
                    for i in 0..n {
                        data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                    }
                    self.accumulate(grads, p, Tensor::matrix(n, c, data)?)?;
                    offset += c;
                }
            }
            Op::GatherRows(x, idx) => {
                let (r, d) = self.val(*x).dims2()?;
                let mut data = vec![0.0; r * d];
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in data[i * d..(i + 1) * d].iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, Tensor::matrix(r, d, data)?)?;
            }
            Op::PairwiseSqDist(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (n, d) = ta.dims2()?;
                let m = tb.rows();
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; m * d];
                for i in 0..n {
                    let ra = ta.row(i);
                    for j in 0..m {
                        let w = 2.0 * g.data()[i * m + j];
                        if w == 0.0 {
                            continue;
                        }
                        let rb = tb.row(j);
                        for k in 0..d {
                            let diff = w * (ra[k] - rb[k]);
                            ga[i * d + k] += diff;
                            gb[j * d + k] -= diff;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(n, d, ga)?)?;
                self.accumulate(grads, *b, Tensor::matrix(m, d, gb)?)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_forward() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(m(&[&[1.0], &[1.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &m(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[0.0, 0.0, 0.0]]));
        let p = g.softmax_rows(x).unwrap();
        for v in g.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn pairwise_sqdist_forward() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[0.0, 0.0]]));
        let b = g.constant(m(&[&[1.0, 0.0], &[3.0, 0.0]]));
        let d = g.pairwise_sqdist(a, b).unwrap();
        assert_eq!(g.value(d), &m(&[&[1.0, 9.0]]));
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).data(), &[6.0]);
    }

    #[test]
    fn relu_derivative() {
        let mut g = Graph::new();
        let x = g.param(m(&[&[-1.0, 2.0]]));
        let r = g.relu(x);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut g = Graph::new();
        let x = g.param(m(&[&[1.0, 2.0]]));
        let unused = g.param(m(&[&[5.0], &[6.0]]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused), Tensor::zeros(&[2, 1]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(m(&[&[1.0, 2.0]]));
        assert!(matches!(g.backward(x), Err(MetfaError::Shape(_))));
        assert!(matches!(Graph::new().backward(Var(0)), Err(MetfaError::Shape(_))));
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::new();
        let x = g.param(m(&[&[0.0, 2.0]]));
        assert!(matches!(g.log(x), Err(MetfaError::Domain(_))));
        let neg = g.param(m(&[&[-1.0]]));
        assert!(matches!(g.xlogx(neg), Err(MetfaError::Domain(_))));
        let one = g.constant(m(&[&[0.0]]));
        let xs = g.constant(m(&[&[1.0, 1.0]]));
        assert!(matches!(g.div_col(xs, one), Err(MetfaError::Domain(_))));
        let inf = g.constant(m(&[&[f64::INFINITY]]));
        assert!(matches!(g.div_col(xs, inf), Err(MetfaError::Numeric(_))));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.param(m(&[&[1.0, 2.0]]));
        let b = g.param(m(&[&[1.0, 2.0, 3.0]]));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, b).is_err());
        assert!(g.pairwise_sqdist(a, b).is_err());
        assert!(g.add_row(a, b).is_err());
    }

    #[test]
    fn max_reduce_routes_to_first_tie() {
        let mut g = Graph::new();
        let x = g.param(m(&[&[2.0, 2.0, 1.0]]));
        let mx = g.max_rows(x).unwrap();
        let s = g.sum(mx);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 0.0, 0.0]);

        let mut g = Graph::new();
        let x = g.param(m(&[&[1.0, 0.5, 0.5]]));
        let mn = g.min_rows(x).unwrap();
        let s = g.sum(mn);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn repeated_use_accumulates() {
        // y = sum(x * x + x) → dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.param(m(&[&[1.5, -2.0]]));
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[4.0, -3.0]);
    }

    #[test]
    fn norm_clamp_zeroes_gradient() {
        let mut g = Graph::new();
        let x = g.param(m(&[&[0.0, 0.0], &[3.0, 4.0]]));
        let (n, clamped) = g.l2_norm_rows(x, 1e-12).unwrap();
        assert_eq!(clamped, 1);
        assert_eq!(g.value(n).data(), &[1e-12, 5.0]);
        let s = g.sum(n);
        let grads = g.backward(s).unwrap();
        let gx = grads.get(x);
        assert_eq!(&gx.data()[..2], &[0.0, 0.0]);
        assert!((gx.data()[2] - 0.6).abs() < 1e-15 && (gx.data()[3] - 0.8).abs() < 1e-15);
    }
}
