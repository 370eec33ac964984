//! Minimal reverse-mode tape over `DenseMatrix` values.
//!
//! A model forward pass is recorded as a tape of primitive ops; each node
//! stores its operands and eagerly computed value. `backward` replays the
//! tape in reverse with hand-derived vector-Jacobian products, giving exact
//! gradients up to float rounding. Central finite differences (see
//! `numerics::finite_diff_grad`) stay an independent oracle: every op here is
//! checked against them in isolation, and the full model is checked
//! end-to-end by the gradcheck harness.
//!
//! Shape mismatches inside the tape are programming errors of the model
//! builder and panic; public entry points validate their contracts before
//! recording anything.

use std::rc::Rc;

use crate::numerics::{matmul, sigmoid, softmax, DenseMatrix};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    ScaleConst(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    /// out[i][j] = m[i][j] * v[i]   (v is rows x 1)
    ScaleRows(Var, Var),
    /// out[i][j] = m[i][j] * v[j]   (v is cols x 1)
    ScaleCols(Var, Var),
    /// out = m + r broadcast over rows   (r is 1 x cols)
    AddRowBroadcast(Var, Var),
    /// out.row(p) = src.row(idx[p]); duplicate indices accumulate on backward
    GatherRows(Var, Rc<Vec<usize>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    Transpose(Var),
    /// scalar dot of two 1 x d rows
    RowDot(Var, Var),
    L2NormalizeRows(Var),
    /// softmax over rows of a P x 1 column, grouped by segment id
    SegmentSoftmax(Var, Rc<Vec<usize>>),
    SumAll(Var),
    /// rows x cols matrix assembled from 1x1 scalars in row-major order
    AssembleScalars(Vec<Var>),
    /// mean over rows of (logsumexp(row i) - m[i][i])
    CeDiagRows(Var),
}

struct Node {
    value: DenseMatrix,
    op: Op,
    requires: bool,
}

/// Gradients of one backward pass, indexed by `Var`.
pub struct Grads {
    by_node: Vec<Option<DenseMatrix>>,
}

impl Grads {
    /// Gradient of the root with respect to `v`; zeros if `v` never
    /// influenced the root.
    pub fn get(&self, v: Var, shape: (usize, usize)) -> DenseMatrix {
        match &self.by_node[v.0] {
            Some(g) => g.clone(),
            None => DenseMatrix::zeros(shape.0, shape.1),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-1x1 node");
        m.get(0, 0)
    }

    fn push(&mut self, value: DenseMatrix, op: Op, requires: bool) -> Var {
        self.nodes.push(Node { value, op, requires });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (data or structure).
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b)).expect("tape matmul shape");
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Matmul(a, b), r)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b)).expect("tape add shape");
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Add(a, b), r)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b)).expect("tape sub shape");
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Sub(a, b), r)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .hadamard(self.value(b))
            .expect("tape hadamard shape");
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Hadamard(a, b), r)
    }

    pub fn scale_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        let r = self.req(a);
        self.push(v, Op::ScaleConst(a, c), r)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let r = self.req(a);
        self.push(v, Op::AddScalar(a), r)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let r = self.req(a);
        self.push(v, Op::Relu(a), r)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let r = self.req(a);
        self.push(v, Op::LeakyRelu(a, slope), r)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let r = self.req(a);
        self.push(v, Op::Sigmoid(a), r)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let r = self.req(a);
        self.push(v, Op::Exp(a), r)
    }

    /// Elementwise power; callers must keep the base strictly positive for
    /// non-integer exponents (degrees always are).
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        let r = self.req(a);
        self.push(v, Op::Powf(a, p), r)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let r = self.req(a);
        self.push(v, Op::Clamp(a, lo, hi), r)
    }

    pub fn scale_rows(&mut self, m: Var, v: Var) -> Var {
        let (rows, cols) = self.value(m).shape();
        assert_eq!(self.value(v).shape(), (rows, 1), "scale_rows vector shape");
        let mut out = DenseMatrix::zeros(rows, cols);
        for i in 0..rows {
            let s = self.value(v).get(i, 0);
            for j in 0..cols {
                out.set(i, j, self.value(m).get(i, j) * s);
            }
        }
        let r = self.req(m) || self.req(v);
        self.push(out, Op::ScaleRows(m, v), r)
    }

    pub fn scale_cols(&mut self, m: Var, v: Var) -> Var {
        let (rows, cols) = self.value(m).shape();
        assert_eq!(self.value(v).shape(), (cols, 1), "scale_cols vector shape");
        let mut out = DenseMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out.set(i, j, self.value(m).get(i, j) * self.value(v).get(j, 0));
            }
        }
        let r = self.req(m) || self.req(v);
        self.push(out, Op::ScaleCols(m, v), r)
    }

    pub fn add_row_broadcast(&mut self, m: Var, row: Var) -> Var {
        let (rows, cols) = self.value(m).shape();
        assert_eq!(self.value(row).shape(), (1, cols), "broadcast row shape");
        let mut out = self.value(m).clone();
        for i in 0..rows {
            for j in 0..cols {
                let v = out.get(i, j) + self.value(row).get(0, j);
                out.set(i, j, v);
            }
        }
        let r = self.req(m) || self.req(row);
        self.push(out, Op::AddRowBroadcast(m, row), r)
    }

    pub fn gather_rows(&mut self, src: Var, idx: Rc<Vec<usize>>) -> Var {
        let cols = self.value(src).cols();
        let mut out = DenseMatrix::zeros(idx.len(), cols);
        for (p, &i) in idx.iter().enumerate() {
            for j in 0..cols {
                out.set(p, j, self.value(src).get(i, j));
            }
        }
        let r = self.req(src);
        self.push(out, Op::GatherRows(src, idx), r)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            assert_eq!(self.value(p).cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(self.value(p).data());
        }
        let out = DenseMatrix::from_vec(rows, cols, data).expect("concat_rows");
        let r = parts.iter().any(|&p| self.req(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), r)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.value(a).shape();
        let (rb, cb) = self.value(b).shape();
        assert_eq!(ra, rb, "concat_cols row mismatch");
        let mut out = DenseMatrix::zeros(ra, ca + cb);
        for i in 0..ra {
            for j in 0..ca {
                out.set(i, j, self.value(a).get(i, j));
            }
            for j in 0..cb {
                out.set(i, ca + j, self.value(b).get(i, j));
            }
        }
        let r = self.req(a) || self.req(b);
        self.push(out, Op::ConcatCols(a, b), r)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let r = self.req(a);
        self.push(v, Op::Transpose(a), r)
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).rows(), 1);
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "row_dot shape");
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        let out = DenseMatrix::from_vec(1, 1, vec![s]).expect("row_dot");
        let r = self.req(a) || self.req(b);
        self.push(out, Op::RowDot(a, b), r)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let v = crate::numerics::l2_normalize_rows(self.value(a));
        let r = self.req(a);
        self.push(v, Op::L2NormalizeRows(a), r)
    }

    /// Softmax over the entries of a P x 1 column grouped by `segments`
    /// (one id per row). Each segment's entries sum to 1.
    pub fn segment_softmax(&mut self, scores: Var, segments: Rc<Vec<usize>>) -> Var {
        let p = self.value(scores).rows();
        assert_eq!(self.value(scores).cols(), 1, "segment_softmax wants a column");
        assert_eq!(segments.len(), p, "segment id per score row");
        let out = segment_softmax_values(self.value(scores), &segments);
        let r = self.req(scores);
        self.push(out, Op::SegmentSoftmax(scores, segments), r)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let out = DenseMatrix::from_vec(1, 1, vec![s]).expect("sum_all");
        let r = self.req(a);
        self.push(out, Op::SumAll(a), r)
    }

    /// rows x cols matrix from row-major 1x1 scalars.
    pub fn assemble_scalars(&mut self, rows: usize, cols: usize, elems: &[Var]) -> Var {
        assert_eq!(elems.len(), rows * cols, "assemble_scalars count");
        let mut data = Vec::with_capacity(elems.len());
        for &e in elems {
            assert_eq!(self.value(e).shape(), (1, 1), "assemble_scalars wants scalars");
            data.push(self.value(e).get(0, 0));
        }
        let out = DenseMatrix::from_vec(rows, cols, data).expect("assemble_scalars");
        let r = elems.iter().any(|&e| self.req(e));
        self.push(out, Op::AssembleScalars(elems.to_vec()), r)
    }

    /// Mean over rows i of `logsumexp(row_i) - m[i][i]`: the cross-entropy of
    /// each row's softmax against the diagonal target.
    pub fn ce_diag_rows(&mut self, m: Var) -> Var {
        let (rows, cols) = self.value(m).shape();
        assert_eq!(rows, cols, "ce_diag_rows wants a square matrix");
        let mut total = 0.0;
        for i in 0..rows {
            total += logsumexp(self.value(m).row(i)) - self.value(m).get(i, i);
        }
        let out = DenseMatrix::from_vec(1, 1, vec![total / rows as f64]).expect("ce");
        let r = self.req(m);
        self.push(out, Op::CeDiagRows(m), r)
    }

    /// Reverse pass from a 1x1 root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be 1x1");
        let mut grads: Vec<Option<DenseMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(DenseMatrix::from_vec(1, 1, vec![1.0]).expect("seed"));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_vjp(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { by_node: grads }
    }

    fn accum(&self, grads: &mut [Option<DenseMatrix>], v: Var, delta: DenseMatrix) {
        if !self.nodes[v.0].requires {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => add_assign(g, &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn apply_vjp(&self, id: usize, g: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.req(*a) {
                    let bt = self.value(*b).transpose();
                    self.accum(grads, *a, matmul(g, &bt).expect("vjp matmul a"));
                }
                if self.req(*b) {
                    let at = self.value(*a).transpose();
                    self.accum(grads, *b, matmul(&at, g).expect("vjp matmul b"));
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.scale(-1.0));
            }
            Op::Hadamard(a, b) => {
                if self.req(*a) {
                    self.accum(grads, *a, g.hadamard(self.value(*b)).expect("vjp"));
                }
                if self.req(*b) {
                    self.accum(grads, *b, g.hadamard(self.value(*a)).expect("vjp"));
                }
            }
            Op::ScaleConst(a, c) => self.accum(grads, *a, g.scale(*c)),
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::Relu(a) => {
                let mask = self.value(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.accum(grads, *a, g.hadamard(&mask).expect("vjp"));
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let mask = self.value(*a).map(|x| if x > 0.0 { 1.0 } else { s });
                self.accum(grads, *a, g.hadamard(&mask).expect("vjp"));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let dy = y.map(|v| v * (1.0 - v));
                self.accum(grads, *a, g.hadamard(&dy).expect("vjp"));
            }
            Op::Exp(a) => {
                self.accum(grads, *a, g.hadamard(&self.nodes[id].value).expect("vjp"));
            }
            Op::Powf(a, p) => {
                let dp = self.value(*a).map(|x| p * x.powf(p - 1.0));
                self.accum(grads, *a, g.hadamard(&dp).expect("vjp"));
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let mask = self.value(*a).map(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
                self.accum(grads, *a, g.hadamard(&mask).expect("vjp"));
            }
            Op::ScaleRows(m, v) => {
                let (rows, cols) = self.value(*m).shape();
                if self.req(*m) {
                    let mut dm = DenseMatrix::zeros(rows, cols);
                    for i in 0..rows {
                        let s = self.value(*v).get(i, 0);
                        for j in 0..cols {
                            dm.set(i, j, g.get(i, j) * s);
                        }
                    }
                    self.accum(grads, *m, dm);
                }
                if self.req(*v) {
                    let mut dv = DenseMatrix::zeros(rows, 1);
                    for i in 0..rows {
                        let mut s = 0.0;
                        for j in 0..cols {
                            s += g.get(i, j) * self.value(*m).get(i, j);
                        }
                        dv.set(i, 0, s);
                    }
                    self.accum(grads, *v, dv);
                }
            }
            Op::ScaleCols(m, v) => {
                let (rows, cols) = self.value(*m).shape();
                if self.req(*m) {
                    let mut dm = DenseMatrix::zeros(rows, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            dm.set(i, j, g.get(i, j) * self.value(*v).get(j, 0));
                        }
                    }
                    self.accum(grads, *m, dm);
                }
                if self.req(*v) {
                    let mut dv = DenseMatrix::zeros(cols, 1);
                    for j in 0..cols {
                        let mut s = 0.0;
                        for i in 0..rows {
                            s += g.get(i, j) * self.value(*m).get(i, j);
                        }
                        dv.set(j, 0, s);
                    }
                    self.accum(grads, *v, dv);
                }
            }
            Op::AddRowBroadcast(m, row) => {
                self.accum(grads, *m, g.clone());
                if self.req(*row) {
                    let (rows, cols) = g.shape();
                    let mut dr = DenseMatrix::zeros(1, cols);
                    for j in 0..cols {
                        let mut s = 0.0;
                        for i in 0..rows {
                            s += g.get(i, j);
                        }
                        dr.set(0, j, s);
                    }
                    self.accum(grads, *row, dr);
                }
            }
            Op::GatherRows(src, idx) => {
                let (rows, cols) = self.value(*src).shape();
                let mut ds = DenseMatrix::zeros(rows, cols);
                for (p, &i) in idx.iter().enumerate() {
                    for j in 0..cols {
                        ds.set(i, j, ds.get(i, j) + g.get(p, j));
                    }
                }
                self.accum(grads, *src, ds);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    if self.req(p) {
                        let mut dp = DenseMatrix::zeros(rows, cols);
                        for i in 0..rows {
                            for j in 0..cols {
                                dp.set(i, j, g.get(offset + i, j));
                            }
                        }
                        self.accum(grads, p, dp);
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(a, b) => {
                let (rows, ca) = self.value(*a).shape();
                let cb = self.value(*b).cols();
                if self.req(*a) {
                    let mut da = DenseMatrix::zeros(rows, ca);
                    for i in 0..rows {
                        for j in 0..ca {
                            da.set(i, j, g.get(i, j));
                        }
                    }
                    self.accum(grads, *a, da);
                }
                if self.req(*b) {
                    let mut db = DenseMatrix::zeros(rows, cb);
                    for i in 0..rows {
                        for j in 0..cb {
                            db.set(i, j, g.get(i, ca + j));
                        }
                    }
                    self.accum(grads, *b, db);
                }
            }
            Op::Transpose(a) => self.accum(grads, *a, g.transpose()),
            Op::RowDot(a, b) => {
                let s = g.get(0, 0);
                if self.req(*a) {
                    self.accum(grads, *a, self.value(*b).scale(s));
                }
                if self.req(*b) {
                    self.accum(grads, *b, self.value(*a).scale(s));
                }
            }
            Op::L2NormalizeRows(a) => {
                // y = v / |v|; dv = (g - y (g . y)) / |v|, zero rows get zero.
                let v = self.value(*a);
                let y = &self.nodes[id].value;
                let (rows, cols) = v.shape();
                let mut dv = DenseMatrix::zeros(rows, cols);
                for i in 0..rows {
                    let norm = v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let gy: f64 = (0..cols).map(|j| g.get(i, j) * y.get(i, j)).sum();
                    for j in 0..cols {
                        dv.set(i, j, (g.get(i, j) - y.get(i, j) * gy) / norm);
                    }
                }
                self.accum(grads, *a, dv);
            }
            Op::SegmentSoftmax(scores, segments) => {
                let y = &self.nodes[id].value;
                let p = y.rows();
                let nseg = segments.iter().max().map_or(0, |&m| m + 1);
                let mut seg_dot = vec![0.0; nseg];
                for r in 0..p {
                    seg_dot[segments[r]] += g.get(r, 0) * y.get(r, 0);
                }
                let mut ds = DenseMatrix::zeros(p, 1);
                for r in 0..p {
                    let yr = y.get(r, 0);
                    ds.set(r, 0, yr * (g.get(r, 0) - seg_dot[segments[r]]));
                }
                self.accum(grads, *scores, ds);
            }
            Op::SumAll(a) => {
                let s = g.get(0, 0);
                let (rows, cols) = self.value(*a).shape();
                let ones = DenseMatrix::zeros(rows, cols).map(|_| s);
                self.accum(grads, *a, ones);
            }
            Op::AssembleScalars(elems) => {
                for (k, &e) in elems.iter().enumerate() {
                    if self.req(e) {
                        let d = DenseMatrix::from_vec(1, 1, vec![g.data()[k]]).expect("vjp");
                        self.accum(grads, e, d);
                    }
                }
            }
            Op::CeDiagRows(m) => {
                let s = g.get(0, 0);
                let mv = self.value(*m);
                let n = mv.rows();
                let mut dm = DenseMatrix::zeros(n, n);
                for i in 0..n {
                    let p = softmax(mv.row(i)).expect("ce softmax");
                    for j in 0..n {
                        let delta = if i == j { 1.0 } else { 0.0 };
                        dm.set(i, j, s * (p[j] - delta) / n as f64);
                    }
                }
                self.accum(grads, *m, dm);
            }
        }
    }
}

fn add_assign(a: &mut DenseMatrix, b: &DenseMatrix) {
    debug_assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

fn segment_softmax_values(scores: &DenseMatrix, segments: &[usize]) -> DenseMatrix {
    let p = scores.rows();
    let nseg = segments.iter().max().map_or(0, |&m| m + 1);
    let mut seg_max = vec![f64::NEG_INFINITY; nseg];
    for r in 0..p {
        seg_max[segments[r]] = seg_max[segments[r]].max(scores.get(r, 0));
    }
    let mut seg_sum = vec![0.0; nseg];
    let mut exps = vec![0.0; p];
    for r in 0..p {
        let e = (scores.get(r, 0) - seg_max[segments[r]]).exp();
        exps[r] = e;
        seg_sum[segments[r]] += e;
    }
    let mut out = DenseMatrix::zeros(p, 1);
    for r in 0..p {
        out.set(r, 0, exps[r] / seg_sum[segments[r]]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, rel_err, SeededRng};

    /// Checks tape gradients for `build` against central differences over a
    /// set of leaf matrices. `build` receives the leaves and must return a
    /// scalar (1x1) root.
    fn check_grads(
        shapes: &[(usize, usize)],
        seed: u64,
        build: impl Fn(&mut Tape, &[Var]) -> Var,
    ) {
        let mut rng = SeededRng::new(seed);
        let mut values: Vec<DenseMatrix> = Vec::new();
        for &(r, c) in shapes {
            // Kink-free draws: keep magnitudes away from 0 so relu/leaky
            // masks are stable within the differencing step.
            let mut m = DenseMatrix::zeros(r, c);
            for v in m.data_mut() {
                let draw = rng.uniform(0.25, 1.5);
                *v = if rng.next_u64() % 2 == 0 { draw } else { -draw };
            }
            values.push(m);
        }

        let mut tape = Tape::new();
        let leaves: Vec<Var> = values.iter().map(|m| tape.leaf(m.clone())).collect();
        let root = build(&mut tape, &leaves);
        let grads = tape.backward(root);

        let flat: Vec<f64> = values.iter().flat_map(|m| m.data().to_vec()).collect();
        let fd = finite_diff_grad(
            &mut |theta: &[f64]| {
                let mut t = Tape::new();
                let mut offset = 0;
                let mut vars = Vec::new();
                for &(r, c) in shapes {
                    let m =
                        DenseMatrix::from_vec(r, c, theta[offset..offset + r * c].to_vec())
                            .unwrap();
                    offset += r * c;
                    vars.push(t.leaf(m));
                }
                let root = build(&mut t, &vars);
                t.scalar(root)
            },
            &flat,
            1e-6,
        )
        .unwrap();

        let mut offset = 0;
        for (leaf, &(r, c)) in leaves.iter().zip(shapes) {
            let g = grads.get(*leaf, (r, c));
            for (k, &gk) in g.data().iter().enumerate() {
                let e = rel_err(gk, fd[offset + k], 1e-8);
                assert!(
                    e < 1e-5,
                    "leaf {:?} coord {}: tape {} vs fd {} (rel {})",
                    (r, c),
                    k,
                    gk,
                    fd[offset + k],
                    e
                );
            }
            offset += r * c;
        }
    }

    #[test]
    fn matmul_chain_grads() {
        check_grads(&[(2, 3), (3, 2), (2, 2)], 1, |t, l| {
            let ab = t.matmul(l[0], l[1]);
            let h = t.hadamard(ab, l[2]);
            t.sum_all(h)
        });
    }

    #[test]
    fn elementwise_grads() {
        check_grads(&[(2, 2), (2, 2)], 2, |t, l| {
            let a = t.relu(l[0]);
            let b = t.leaky_relu(l[1], 0.01);
            let c = t.add(a, b);
            let d = t.sigmoid(c);
            let e = t.exp(d);
            let f = t.scale_const(e, 0.7);
            let g = t.add_scalar(f, 1.3);
            t.sum_all(g)
        });
    }

    #[test]
    fn sub_and_clamp_grads() {
        check_grads(&[(3, 2), (3, 2)], 3, |t, l| {
            let d = t.sub(l[0], l[1]);
            // Bounds far from sampled values: clamp acts as identity here.
            let c = t.clamp(d, -10.0, 10.0);
            t.sum_all(c)
        });
    }

    #[test]
    fn powf_grads_positive_domain() {
        check_grads(&[(2, 2)], 4, |t, l| {
            let sq = t.hadamard(l[0], l[0]);
            let shifted = t.add_scalar(sq, 0.5); // strictly positive
            let p = t.powf(shifted, -0.5);
            t.sum_all(p)
        });
    }

    #[test]
    fn scale_rows_cols_broadcast_grads() {
        check_grads(&[(3, 2), (3, 1), (2, 1), (1, 2)], 5, |t, l| {
            let a = t.scale_rows(l[0], l[1]);
            let b = t.scale_cols(a, l[2]);
            let c = t.add_row_broadcast(b, l[3]);
            t.sum_all(c)
        });
    }

    #[test]
    fn gather_concat_transpose_grads() {
        check_grads(&[(3, 2), (3, 2)], 6, |t, l| {
            let g = t.gather_rows(l[0], Rc::new(vec![0, 2, 1, 0]));
            let c = t.concat_rows(&[g, l[1]]);
            let tr = t.transpose(c);
            let cc = t.concat_cols(tr, tr);
            t.sum_all(cc)
        });
    }

    #[test]
    fn row_dot_and_l2_normalize_grads() {
        check_grads(&[(1, 4), (1, 4)], 7, |t, l| {
            let n = t.l2_normalize_rows(l[0]);
            let d = t.row_dot(n, l[1]);
            t.sum_all(d)
        });
    }

    #[test]
    fn segment_softmax_grads_and_values() {
        // Values: one segment of hand-checked softmax.
        let mut tape = Tape::new();
        let s = tape.leaf(DenseMatrix::from_vec(2, 1, vec![2.0f64.ln(), 0.0]).unwrap());
        let a = tape.segment_softmax(s, Rc::new(vec![0, 0]));
        assert!((tape.value(a).get(0, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((tape.value(a).get(1, 0) - 1.0 / 3.0).abs() < 1e-12);

        check_grads(&[(5, 1), (5, 1)], 8, |t, l| {
            let a = t.segment_softmax(l[0], Rc::new(vec![0, 0, 1, 1, 1]));
            let h = t.hadamard(a, l[1]);
            t.sum_all(h)
        });
    }

    #[test]
    fn assemble_and_ce_diag_grads() {
        check_grads(&[(1, 1), (1, 1), (1, 1), (1, 1)], 9, |t, l| {
            let m = t.assemble_scalars(2, 2, &[l[0], l[1], l[2], l[3]]);
            let lt = t.ce_diag_rows(m);
            let mt = t.transpose(m);
            let lv = t.ce_diag_rows(mt);
            t.add(lt, lv)
        });
    }

    #[test]
    fn ce_diag_rows_value_matches_log4_for_zero_scores() {
        let mut tape = Tape::new();
        let z = tape.constant(DenseMatrix::zeros(4, 4));
        let l = tape.ce_diag_rows(z);
        assert!((tape.scalar(l) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn constants_do_not_accumulate_grads() {
        let mut tape = Tape::new();
        let c = tape.constant(DenseMatrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
        let p = tape.leaf(DenseMatrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap());
        let m = tape.matmul(c, p);
        let grads = tape.backward(m);
        assert_eq!(grads.get(p, (2, 1)).data(), &[1.0, 2.0]);
        // Constant leaf keeps a zero gradient.
        assert_eq!(grads.get(c, (1, 2)).data(), &[0.0, 0.0]);
    }
}
