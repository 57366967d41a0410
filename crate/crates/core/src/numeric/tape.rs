//! Tape-based reverse-mode automatic differentiation over matrices.
//!
//! Every operation appends a node holding its value and enough information
//! to push a gradient back to its inputs. Nodes only refer to earlier nodes,
//! so [`Tape::backward`] is a single reverse sweep. Parameters are leaves;
//! gradients are returned for leaves only.

use super::tensor::{gemm_strided, Tensor, TensorError};
use super::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Replace one logit by the dot product of a hidden row with a (possibly
/// element-wise mixed) table row.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitSub {
    pub row: usize,
    pub col: usize,
    /// Either a single table row, or one source row per hidden dimension.
    pub sources: Vec<u32>,
}

impl LogitSub {
    fn source(&self, j: usize) -> usize {
        if self.sources.len() == 1 {
            self.sources[0] as usize
        } else {
            self.sources[j] as usize
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, Scalar),
    Sigmoid(Var),
    Tanh(Var),
    SliceCols { src: Var, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    GatherElements { table: Var, src: Vec<u32>, scale: Option<Vec<Scalar>> },
    StackRows { parts: Vec<(Var, usize)> },
    SoftmaxCe { logits: Var, targets: Vec<usize>, probs: Tensor },
    SubstituteLogits { logits: Var, hidden: Var, table: Var, subs: Vec<LogitSub> },
    WeightedRowSq { src: Var, coefs: Vec<Scalar> },
    SumSq(Var),
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation for one backward pass. Not shared across threads;
/// independent tapes may run concurrently.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims("matmul_bt")?;
        let (n, k2) = tb.dims("matmul_bt")?;
        if k != k2 {
            return Err(mismatch("matmul_bt", ta, tb));
        }
        let mut out = Tensor::zeros(m, n);
        gemm_strided(m, k, n, ta.data(), k, 1, tb.data(), 1, k, out.data_mut(), n, 0.0);
        Ok(self.push(out, Op::MatMulBt(a, b)))
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(Scalar, Scalar) -> Scalar) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Add a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, n) = ta.dims("add_row")?;
        if tr.shape() != [1, n] {
            return Err(mismatch("add_row", ta, tr));
        }
        let mut value = ta.clone();
        for chunk in value.data_mut().chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Element-wise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, k: Tensor) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.shape() != k.shape() {
            return Err(mismatch("mul_const", ta, &k));
        }
        let data = ta.data().iter().zip(k.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulConst(a, k)))
    }

    pub fn scale(&mut self, a: Var, k: Scalar) -> Var {
        let value = self.value(a).map(|x| x * k);
        self.push(value, Op::Scale(a, k))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(Scalar::tanh);
        self.push(value, Op::Tanh(a))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (m, n) = ta.dims("slice_cols")?;
        if start + len > n {
            return Err(TensorError::IndexOutOfRange { op: "slice_cols", index: start + len, len: n });
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let value = Tensor::matrix(m, len, data)?;
        Ok(self.push(value, Op::SliceCols { src: a, start }))
    }

    /// Embedding lookup: row `ids[k]` of `table` becomes row `k`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(table).gather_rows(ids)?;
        Ok(self.push(value, Op::GatherRows { table, ids: ids.to_vec() }))
    }

    /// `out[r][j] = scale[r][j] · table[src[r][j]][j] + offset[r][j]`.
    ///
    /// Covers plain lookup, lookup of substituted rows, element-wise mixing
    /// of rows and dropout masks in one op. `src`, `scale` and `offset` are
    /// row-major `rows × cols(table)`.
    pub fn gather_elements(
        &mut self,
        table: Var,
        rows: usize,
        src: Vec<u32>,
        scale: Option<Vec<Scalar>>,
        offset: Option<&[Scalar]>,
    ) -> Result<Var, TensorError> {
        let tt = self.value(table);
        let (v, d) = tt.dims("gather_elements")?;
        let n = rows * d;
        let bad_len = src.len() != n || scale.as_ref().is_some_and(|s| s.len() != n) || offset.is_some_and(|o| o.len() != n);
        if bad_len {
            return Err(TensorError::DataLength { shape: vec![rows, d], expected: n, got: src.len() });
        }
        let mut data = Vec::with_capacity(n);
        for (k, &s) in src.iter().enumerate() {
            let s = s as usize;
            if s >= v {
                return Err(TensorError::IndexOutOfRange { op: "gather_elements", index: s, len: v });
            }
            let mut x = tt.data()[s * d + k % d];
            if let Some(sc) = &scale {
                x *= sc[k];
            }
            if let Some(o) = offset {
                x += o[k];
            }
            data.push(x);
        }
        let value = Tensor::matrix(rows, d, data)?;
        Ok(self.push(value, Op::GatherElements { table, src, scale }))
    }

    /// Row `k` of the output is row `parts[k].1` of `parts[k].0`.
    pub fn stack_rows(&mut self, parts: &[(Var, usize)]) -> Result<Var, TensorError> {
        let cols = match parts.first() {
            Some(&(v, _)) => self.value(v).cols(),
            None => 0,
        };
        let mut data = Vec::with_capacity(parts.len() * cols);
        for &(v, r) in parts {
            let t = self.value(v);
            if t.cols() != cols {
                return Err(mismatch("stack_rows", self.value(parts[0].0), t));
            }
            if r >= t.rows() {
                return Err(TensorError::IndexOutOfRange { op: "stack_rows", index: r, len: t.rows() });
            }
            data.extend_from_slice(t.row(r));
        }
        let value = Tensor::matrix(parts.len(), cols, data)?;
        Ok(self.push(value, Op::StackRows { parts: parts.to_vec() }))
    }

    /// Mean over rows of `−log softmax(logits)[target]`. Uses max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        let (m, n) = tl.dims("softmax_cross_entropy")?;
        if targets.len() != m {
            return Err(TensorError::DataLength { shape: vec![m], expected: m, got: targets.len() });
        }
        let mut probs = Tensor::zeros(m, n);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(TensorError::IndexOutOfRange { op: "softmax_cross_entropy", index: t, len: n });
            }
            let row = tl.row(r);
            let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
            let pr = probs.row_mut(r);
            let mut z = 0.0;
            for (p, &x) in pr.iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in pr.iter_mut() {
                *p /= z;
            }
            loss += z.ln() + max - row[t];
        }
        let value = Tensor::scalar(loss / m.max(1) as Scalar);
        Ok(self.push(value, Op::SoftmaxCe { logits, targets: targets.to_vec(), probs }))
    }

    /// Overwrite selected entries of `logits` (`hidden · tableᵀ` before any
    /// bias) with `hidden[row] · table_row`, where the table row is given by
    /// the substitution's sources. Gradients reach the substituted rows.
    pub fn substitute_logits(
        &mut self,
        logits: Var,
        hidden: Var,
        table: Var,
        subs: Vec<LogitSub>,
    ) -> Result<Var, TensorError> {
        let (tl, th, tt) = (self.value(logits), self.value(hidden), self.value(table));
        let (m, n) = tl.dims("substitute_logits")?;
        let (_, d) = tt.dims("substitute_logits")?;
        if th.rows() != m || th.cols() != d || tt.rows() != n {
            return Err(mismatch("substitute_logits", th, tt));
        }
        let mut value = tl.clone();
        for s in &subs {
            if s.row >= m || s.col >= n || !(s.sources.len() == 1 || s.sources.len() == d) {
                return Err(TensorError::IndexOutOfRange { op: "substitute_logits", index: s.row, len: m });
            }
            if let Some(&bad) = s.sources.iter().find(|&&x| x as usize >= n) {
                return Err(TensorError::IndexOutOfRange { op: "substitute_logits", index: bad as usize, len: n });
            }
            let h = th.row(s.row);
            let dot: Scalar = (0..d).map(|j| h[j] * tt.get(s.source(j), j)).sum();
            value.set(s.row, s.col, dot);
        }
        Ok(self.push(value, Op::SubstituteLogits { logits, hidden, table, subs }))
    }

    /// `Σ_r coefs[r] · ‖row_r‖²`
    pub fn weighted_row_sq_sum(&mut self, a: Var, coefs: Vec<Scalar>) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if coefs.len() != ta.rows() {
            return Err(TensorError::DataLength { shape: ta.shape().to_vec(), expected: ta.rows(), got: coefs.len() });
        }
        let total: Scalar = (0..ta.rows()).map(|r| coefs[r] * ta.row(r).iter().map(|x| x * x).sum::<Scalar>()).sum();
        Ok(self.push(Tensor::scalar(total), Op::WeightedRowSq { src: a, coefs }))
    }

    /// `Σ x²`
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let total = self.value(a).sum_sq();
        self.push(Tensor::scalar(total), Op::SumSq(a))
    }

    /// Sum of same-shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::DataLength { shape: vec![], expected: 1, got: 0 })?;
        let mut value = self.value(*first).clone();
        for &p in &parts[1..] {
            let t = self.value(p);
            if t.shape() != value.shape() {
                return Err(mismatch("sum", &value, t));
            }
            value.add_assign(t);
        }
        Ok(self.push(value, Op::Sum(parts.to_vec())))
    }

    /// Gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        grads[v.0].get_or_insert_with(|| Tensor::zeros_like(&self.nodes[v.0].value))
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                // dA += dC · Bᵀ
                gemm_strided(m, n, k, gd, n, 1, tb.data(), 1, n, self.slot(grads, *a).data_mut(), k, 1.0);
                // dB += Aᵀ · dC
                gemm_strided(k, m, n, ta.data(), 1, k, gd, n, 1, self.slot(grads, *b).data_mut(), n, 1.0);
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.rows();
                // dA += dC · B
                gemm_strided(m, n, k, gd, n, 1, tb.data(), k, 1, self.slot(grads, *a).data_mut(), k, 1.0);
                // dB += dCᵀ · A
                gemm_strided(n, m, k, gd, 1, n, ta.data(), k, 1, self.slot(grads, *b).data_mut(), k, 1.0);
            }
            Op::Add(a, b) => {
                self.slot(grads, *a).add_assign(g);
                self.slot(grads, *b).add_assign(g);
            }
            Op::AddRow(a, row) => {
                self.slot(grads, *a).add_assign(g);
                let n = g.cols();
                let sr = self.slot(grads, *row);
                for chunk in gd.chunks(n) {
                    for (x, y) in sr.data_mut().iter_mut().zip(chunk) {
                        *x += y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let ga: Vec<Scalar> = gd.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                let gb: Vec<Scalar> = gd.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                add_into(self.slot(grads, *a), &ga);
                add_into(self.slot(grads, *b), &gb);
            }
            Op::MulConst(a, k) => {
                let s = self.slot(grads, *a);
                for ((x, y), z) in s.data_mut().iter_mut().zip(gd).zip(k.data()) {
                    *x += y * z;
                }
            }
            Op::Scale(a, k) => {
                let s = self.slot(grads, *a);
                for (x, y) in s.data_mut().iter_mut().zip(gd) {
                    *x += y * k;
                }
            }
            Op::Sigmoid(a) => {
                let s = self.slot(grads, *a);
                for ((x, y), o) in s.data_mut().iter_mut().zip(gd).zip(node.value.data()) {
                    *x += y * o * (1.0 - o);
                }
            }
            Op::Tanh(a) => {
                let s = self.slot(grads, *a);
                for ((x, y), o) in s.data_mut().iter_mut().zip(gd).zip(node.value.data()) {
                    *x += y * (1.0 - o * o);
                }
            }
            Op::SliceCols { src, start } => {
                let len = g.cols();
                let s = self.slot(grads, *src);
                for r in 0..g.rows() {
                    for (x, y) in s.row_mut(r)[*start..*start + len].iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                self.slot(grads, *table).scatter_add_rows(ids, g);
            }
            Op::GatherElements { table, src, scale } => {
                let s = self.slot(grads, *table);
                let d = s.cols();
                let sd = s.data_mut();
                for (k, &row) in src.iter().enumerate() {
                    let mut y = gd[k];
                    if let Some(sc) = scale {
                        y *= sc[k];
                    }
                    sd[row as usize * d + k % d] += y;
                }
            }
            Op::StackRows { parts } => {
                for (k, &(v, r)) in parts.iter().enumerate() {
                    let s = self.slot(grads, v);
                    for (x, y) in s.row_mut(r).iter_mut().zip(g.row(k)) {
                        *x += y;
                    }
                }
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let m = targets.len().max(1) as Scalar;
                let scale = gd[0] / m;
                let s = self.slot(grads, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    let row = s.row_mut(r);
                    for (x, p) in row.iter_mut().zip(probs.row(r)) {
                        *x += scale * p;
                    }
                    row[t] -= scale;
                }
            }
            Op::SubstituteLogits { logits, hidden, table, subs } => {
                let mut pass = g.clone();
                for s in subs {
                    pass.set(s.row, s.col, 0.0);
                }
                self.slot(grads, *logits).add_assign(&pass);
                let (th, tt) = (self.value(*hidden), self.value(*table));
                let d = tt.cols();
                {
                    let sh = self.slot(grads, *hidden);
                    for s in subs {
                        let y = g.get(s.row, s.col);
                        for j in 0..d {
                            let x = sh.get(s.row, j) + y * tt.get(s.source(j), j);
                            sh.set(s.row, j, x);
                        }
                    }
                }
                let st = self.slot(grads, *table);
                for s in subs {
                    let y = g.get(s.row, s.col);
                    let h = th.row(s.row);
                    for (j, &hj) in h.iter().enumerate() {
                        let r = s.source(j);
                        let x = st.get(r, j) + y * hj;
                        st.set(r, j, x);
                    }
                }
            }
            Op::WeightedRowSq { src, coefs } => {
                let ta = self.value(*src);
                let s = self.slot(grads, *src);
                for (r, &c) in coefs.iter().enumerate() {
                    let k = 2.0 * c * gd[0];
                    for (x, y) in s.row_mut(r).iter_mut().zip(ta.row(r)) {
                        *x += k * y;
                    }
                }
            }
            Op::SumSq(a) => {
                let ta = self.value(*a);
                let s = self.slot(grads, *a);
                for (x, y) in s.data_mut().iter_mut().zip(ta.data()) {
                    *x += 2.0 * gd[0] * y;
                }
            }
            Op::Sum(parts) => {
                for &p in parts {
                    self.slot(grads, p).add_assign(g);
                }
            }
        }
    }
}

fn add_into(t: &mut Tensor, v: &[Scalar]) {
    for (x, y) in t.data_mut().iter_mut().zip(v) {
        *x += y;
    }
}

/// Leaf gradients from one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf; exactly zero when unused.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros_like(tape.value(v)))
    }

    /// Move a leaf gradient out.
    pub fn take(&mut self, tape: &Tape, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros_like(tape.value(v)))
    }
}
