use super::{matmul_at_into, matmul_bt_into, matmul_into, Segments, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction / normalization axis of a 2-D tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Axis 0: operate down each column.
    Rows,
    /// Axis 1: operate across each row.
    Cols,
}

impl Axis {
    pub fn from_index(axis: usize) -> Result<Axis> {
        match axis {
            0 => Ok(Axis::Rows),
            1 => Ok(Axis::Cols),
            _ => Err(Error::Index { op: "axis", index: axis, bound: 2 }),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var, Axis),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Tensor, count: usize },
    FrobeniusDiff(Var, Var),
    SegmentNorm(Var, Segments),
    Sum(Var),
    Mean(Var, Option<Axis>),
    Concat(Vec<Var>, Axis),
    Embedding { table: Var, ids: Vec<usize> },
    SegmentMean(Var, Segments),
    Broadcast(Var, Segments),
    SegmentMaxAbs { x: Var, picks: Vec<(usize, f64)> },
    Column(Var, usize),
    StraightThrough(Var),
    RnnScan { pre: Var, recur: Var, segments: Segments },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Eagerly recorded computation graph.
///
/// Nodes are appended in creation order, which is a topological order, so the
/// backward sweep is a single reverse pass over the node list.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.shape(a);
        let (q2, r) = self.shape(b);
        if q != q2 {
            return Err(Error::shape("matmul", (p, q), (q2, r)));
        }
        let mut out = vec![0.0; p * r];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, p, q, r);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(p, r, out), Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Adds a `1 x c` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(row) != (1, c) {
            return Err(Error::shape("add_row", (r, c), self.shape(row)));
        }
        let mut v = self.value(x).clone();
        let b = self.value(row).data().to_vec();
        for chunk in v.data_mut().chunks_mut(c) {
            for (o, bv) in chunk.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(v, Op::AddRow(x, row), rg))
    }

    /// Adds `col[i]` to every entry of row `i`.
    pub fn add_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(col) != (r, 1) {
            return Err(Error::shape("add_col", (r, c), self.shape(col)));
        }
        let mut v = self.value(x).clone();
        let s = self.value(col).data().to_vec();
        for (chunk, sv) in v.data_mut().chunks_mut(c).zip(&s) {
            chunk.iter_mut().for_each(|o| *o += sv);
        }
        let rg = self.rg(x) || self.rg(col);
        Ok(self.push(v, Op::AddCol(x, col), rg))
    }

    /// Multiplies row `i` of `x` by `col[i]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(col) != (r, 1) {
            return Err(Error::shape("mul_col", (r, c), self.shape(col)));
        }
        let mut v = self.value(x).clone();
        let s = self.value(col).data().to_vec();
        for (chunk, sv) in v.data_mut().chunks_mut(c).zip(&s) {
            chunk.iter_mut().for_each(|o| *o *= sv);
        }
        let rg = self.rg(x) || self.rg(col);
        Ok(self.push(v, Op::MulCol(x, col), rg))
    }

    // ---- nonlinearities -------------------------------------------------

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Var {
        let t = self.value(x);
        let v = match axis {
            Axis::Cols => softmax_rows(t),
            Axis::Rows => softmax_rows(&t.transpose()).transpose(),
        };
        let rg = self.rg(x);
        self.push(v, Op::Softmax(x, axis), rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows whose target is `None` are masked out.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", (r, c), (targets.len(), 1)));
        }
        let t = self.value(logits);
        let mut total = 0.0;
        let mut count = 0;
        for (i, target) in targets.iter().enumerate() {
            if let Some(j) = *target {
                if j >= c {
                    return Err(Error::Index { op: "cross_entropy", index: j, bound: c });
                }
                total += log_sum_exp(t.row_slice(i)) - t.get(i, j);
                count += 1;
            }
        }
        let probs = softmax_rows(t);
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    // ---- norms and reductions -------------------------------------------

    /// `||a - b||_F` as a `1 x 1` tensor.
    pub fn frobenius_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("frobenius_diff", a, b)?;
        let sq: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(sq.sqrt()), Op::FrobeniusDiff(a, b), rg))
    }

    /// Frobenius norm of each row group, as a `groups x 1` column.
    pub fn segment_norm(&mut self, x: Var, segments: &Segments) -> Result<Var> {
        let (r, c) = self.shape(x);
        if segments.total_rows() != r {
            return Err(Error::shape("segment_norm", (r, c), (segments.total_rows(), c)));
        }
        let t = self.value(x);
        let norms: Vec<f64> = segments
            .iter()
            .map(|rg| t.data()[rg.start * c..rg.end * c].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::column(&norms), Op::SegmentNorm(x, segments.clone()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean over all entries (`None`) or along an axis.
    pub fn mean(&mut self, x: Var, axis: Option<Axis>) -> Var {
        let t = self.value(x);
        let (r, c) = t.shape();
        let v = match axis {
            None => Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64),
            Some(Axis::Rows) => {
                let mut out = vec![0.0; c];
                for row in t.data().chunks(c) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= r as f64);
                Tensor::row(&out)
            }
            Some(Axis::Cols) => {
                let out: Vec<f64> =
                    t.data().chunks(c).map(|row| row.iter().sum::<f64>() / c as f64).collect();
                Tensor::column(&out)
            }
        };
        let rg = self.rg(x);
        self.push(v, Op::Mean(x, axis), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::config("concat of zero tensors"))?;
        let (r0, c0) = self.shape(first);
        let v = match axis {
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if r != r0 {
                        return Err(Error::shape("concat", (r0, c0), (r, c)));
                    }
                    cols += c;
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(i));
                    }
                }
                Tensor::new(r0, cols, data)
            }
            Axis::Rows => {
                let mut rows = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if c != c0 {
                        return Err(Error::shape("concat", (r0, c0), (r, c)));
                    }
                    rows += r;
                }
                let mut data = Vec::with_capacity(rows * c0);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::new(rows, c0, data)
            }
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.shape(table);
        if ids.is_empty() {
            return Err(Error::config("embedding lookup with no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::Index { op: "embedding", index: id, bound: n });
            }
            data.extend_from_slice(self.value(table).row_slice(id));
        }
        let rg = self.rg(table);
        let op = Op::Embedding { table, ids: ids.to_vec() };
        Ok(self.push(Tensor::new(ids.len(), d, data), op, rg))
    }

    /// Mean of each row group: `rows x c -> groups x c`.
    pub fn segment_mean(&mut self, x: Var, segments: &Segments) -> Result<Var> {
        let (r, c) = self.shape(x);
        if segments.total_rows() != r {
            return Err(Error::shape("segment_mean", (r, c), (segments.total_rows(), c)));
        }
        let t = self.value(x);
        let mut data = vec![0.0; segments.count() * c];
        for (g, range) in segments.iter().enumerate() {
            let n = range.len() as f64;
            let out = &mut data[g * c..(g + 1) * c];
            for i in range {
                for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= n);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(segments.count(), c, data), Op::SegmentMean(x, segments.clone()), rg))
    }

    /// Repeats row `g` of `x` over every row of group `g`: `groups x c -> rows x c`.
    pub fn broadcast(&mut self, x: Var, segments: &Segments) -> Result<Var> {
        let (g, c) = self.shape(x);
        if segments.count() != g {
            return Err(Error::shape("broadcast", (g, c), (segments.count(), c)));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(segments.total_rows() * c);
        for (gi, range) in segments.iter().enumerate() {
            for _ in range {
                data.extend_from_slice(t.row_slice(gi));
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(segments.total_rows(), c, data),
            Op::Broadcast(x, segments.clone()),
            rg,
        ))
    }

    /// Infinity norm (max absolute entry) of each row group, as a column.
    /// The gradient flows to the first maximizing entry.
    pub fn segment_max_abs(&mut self, x: Var, segments: &Segments) -> Result<Var> {
        let (r, c) = self.shape(x);
        if segments.total_rows() != r {
            return Err(Error::shape("segment_max_abs", (r, c), (segments.total_rows(), c)));
        }
        let t = self.value(x);
        let mut picks = Vec::with_capacity(segments.count());
        let mut out = Vec::with_capacity(segments.count());
        for range in segments.iter() {
            let mut best = (range.start * c, -1.0);
            for idx in range.start * c..range.end * c {
                let a = t.data()[idx].abs();
                if a > best.1 {
                    best = (idx, a);
                }
            }
            let sign = if t.data()[best.0] < 0.0 { -1.0 } else { 1.0 };
            picks.push((best.0, sign));
            out.push(best.1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::column(&out), Op::SegmentMaxAbs { x, picks }, rg))
    }

    /// Column `j` of `x` as a `rows x 1` tensor.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if j >= c {
            return Err(Error::Index { op: "column", index: j, bound: c });
        }
        let t = self.value(x);
        let v: Vec<f64> = (0..r).map(|i| t.get(i, j)).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::column(&v), Op::Column(x, j), rg))
    }

    /// Forward value `hard`, gradient routed unchanged to `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::shape("straight_through", hard.shape(), self.shape(soft)));
        }
        let rg = self.rg(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }

    /// Elman recurrence within each row group:
    /// `h_t = tanh(pre_t + h_{t-1} * recur)`, `h_{-1} = 0`.
    pub fn rnn_scan(&mut self, pre: Var, recur: Var, segments: &Segments) -> Result<Var> {
        let (n, h) = self.shape(pre);
        if self.shape(recur) != (h, h) {
            return Err(Error::shape("rnn_scan", (n, h), self.shape(recur)));
        }
        if segments.total_rows() != n {
            return Err(Error::shape("rnn_scan", (n, h), (segments.total_rows(), h)));
        }
        let p = self.value(pre).data();
        let u = self.value(recur).data();
        let mut out = vec![0.0; n * h];
        for range in segments.iter() {
            for t in range.clone() {
                let (done, rest) = out.split_at_mut(t * h);
                let cur = &mut rest[..h];
                cur.copy_from_slice(&p[t * h..(t + 1) * h]);
                if t > range.start {
                    matmul_into(&done[(t - 1) * h..t * h], u, cur, 1, h, h);
                }
                cur.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        let rg = self.rg(pre) || self.rg(recur);
        let op = Op::RnnScan { pre, recur, segments: segments.clone() };
        Ok(self.push(Tensor::new(n, h, out), op, rg))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients are added to the stored
    /// gradient of every node that requires one, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
        if !self.rg(v) {
            return None;
        }
        let (r, c) = self.shape(v);
        Some(adj[v.0].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = self.shape(*a);
                let r = self.shape(*b).1;
                if let Some(ga) = self.slot(adj, *a) {
                    matmul_bt_into(g.data(), self.value(*b).data(), ga.data_mut(), p, r, q);
                }
                if let Some(gb) = self.slot(adj, *b) {
                    matmul_at_into(self.value(*a).data(), g.data(), gb.data_mut(), p, q, r);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(adj, v) {
                        gv.add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(adj, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(adj, *b) {
                    for (o, d) in gb.data_mut().iter_mut().zip(g.data()) {
                        *o -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(adj, *a) {
                    for ((o, d), y) in ga.data_mut().iter_mut().zip(g.data()).zip(self.value(*b).data()) {
                        *o += d * y;
                    }
                }
                if let Some(gb) = self.slot(adj, *b) {
                    for ((o, d), x) in gb.data_mut().iter_mut().zip(g.data()).zip(self.value(*a).data()) {
                        *o += d * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(adj, *a) {
                    for (o, d) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += c * d;
                    }
                }
            }
            Op::AddRow(x, row) => {
                if let Some(gx) = self.slot(adj, *x) {
                    gx.add_assign(g);
                }
                let c = g.cols();
                if let Some(gr) = self.slot(adj, *row) {
                    for chunk in g.data().chunks(c) {
                        for (o, d) in gr.data_mut().iter_mut().zip(chunk) {
                            *o += d;
                        }
                    }
                }
            }
            Op::AddCol(x, col) => {
                if let Some(gx) = self.slot(adj, *x) {
                    gx.add_assign(g);
                }
                let c = g.cols();
                if let Some(gc) = self.slot(adj, *col) {
                    for (o, chunk) in gc.data_mut().iter_mut().zip(g.data().chunks(c)) {
                        *o += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::MulCol(x, col) => {
                let c = g.cols();
                let s = self.value(*col).data();
                if let Some(gx) = self.slot(adj, *x) {
                    for ((o, d), sv) in gx.data_mut().chunks_mut(c).zip(g.data().chunks(c)).zip(s) {
                        for (oo, dd) in o.iter_mut().zip(d) {
                            *oo += dd * sv;
                        }
                    }
                }
                let xv = self.value(*x).data();
                if let Some(gc) = self.slot(adj, *col) {
                    for ((o, d), xr) in gc.data_mut().iter_mut().zip(g.data().chunks(c)).zip(xv.chunks(c)) {
                        *o += d.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.slot(adj, *x) {
                    for ((o, d), y) in gx.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *o += d * (1.0 - y * y);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(adj, *x) {
                    for ((o, d), a) in gx.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        if *a > 0.0 {
                            *o += d;
                        }
                    }
                }
            }
            Op::Softmax(x, axis) => {
                if let Some(gx) = self.slot(adj, *x) {
                    match axis {
                        Axis::Cols => softmax_backward_rows(out, g, gx),
                        Axis::Rows => {
                            let mut tmp = Tensor::zeros(out.cols(), out.rows());
                            softmax_backward_rows(&out.transpose(), &g.transpose(), &mut tmp);
                            gx.add_assign(&tmp.transpose());
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if *count == 0 {
                    return;
                }
                let scale = g.item() / *count as f64;
                let c = probs.cols();
                if let Some(gl) = self.slot(adj, *logits) {
                    for (i, target) in targets.iter().enumerate() {
                        if let Some(j) = *target {
                            let row = &mut gl.data_mut()[i * c..(i + 1) * c];
                            for (o, p) in row.iter_mut().zip(probs.row_slice(i)) {
                                *o += scale * p;
                            }
                            row[j] -= scale;
                        }
                    }
                }
            }
            Op::FrobeniusDiff(a, b) => {
                let norm = out.item();
                if norm == 0.0 {
                    // Subgradient 0, but the parents still receive a gradient.
                    self.slot(adj, *a);
                    self.slot(adj, *b);
                    return;
                }
                let k = g.item() / norm;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(adj, *a) {
                    for ((o, x), y) in ga.data_mut().iter_mut().zip(av).zip(bv) {
                        *o += k * (x - y);
                    }
                }
                if let Some(gb) = self.slot(adj, *b) {
                    for ((o, x), y) in gb.data_mut().iter_mut().zip(av).zip(bv) {
                        *o -= k * (x - y);
                    }
                }
            }
            Op::SegmentNorm(x, segments) => {
                let c = self.shape(*x).1;
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(adj, *x) {
                    for (s, range) in segments.iter().enumerate() {
                        let norm = out.data()[s];
                        if norm == 0.0 {
                            continue;
                        }
                        let k = g.data()[s] / norm;
                        for idx in range.start * c..range.end * c {
                            gx.data_mut()[idx] += k * xv[idx];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let d = g.item();
                if let Some(gx) = self.slot(adj, *x) {
                    gx.data_mut().iter_mut().for_each(|o| *o += d);
                }
            }
            Op::Mean(x, axis) => {
                let (r, c) = self.shape(*x);
                if let Some(gx) = self.slot(adj, *x) {
                    match axis {
                        None => {
                            let d = g.item() / (r * c) as f64;
                            gx.data_mut().iter_mut().for_each(|o| *o += d);
                        }
                        Some(Axis::Rows) => {
                            for row in gx.data_mut().chunks_mut(c) {
                                for (o, d) in row.iter_mut().zip(g.data()) {
                                    *o += d / r as f64;
                                }
                            }
                        }
                        Some(Axis::Cols) => {
                            for (row, d) in gx.data_mut().chunks_mut(c).zip(g.data()) {
                                row.iter_mut().for_each(|o| *o += d / c as f64);
                            }
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => match axis {
                Axis::Cols => {
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.shape(p).1;
                        if let Some(gp) = self.slot(adj, p) {
                            for (row_o, row_g) in gp.data_mut().chunks_mut(pc).zip(g.data().chunks(total)) {
                                for (o, d) in row_o.iter_mut().zip(&row_g[offset..offset + pc]) {
                                    *o += d;
                                }
                            }
                        }
                        offset += pc;
                    }
                }
                Axis::Rows => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if let Some(gp) = self.slot(adj, p) {
                            for (o, d) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                                *o += d;
                            }
                        }
                        offset += n;
                    }
                }
            },
            Op::Embedding { table, ids } => {
                let d = g.cols();
                if let Some(gt) = self.slot(adj, *table) {
                    for (row, &id) in g.data().chunks(d).zip(ids) {
                        for (o, v) in gt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SegmentMean(x, segments) => {
                let c = g.cols();
                if let Some(gx) = self.slot(adj, *x) {
                    for (s, range) in segments.iter().enumerate() {
                        let n = range.len() as f64;
                        let src = g.row_slice(s);
                        for i in range {
                            for (o, d) in gx.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                                *o += d / n;
                            }
                        }
                    }
                }
            }
            Op::Broadcast(x, segments) => {
                let c = g.cols();
                if let Some(gx) = self.slot(adj, *x) {
                    for (s, range) in segments.iter().enumerate() {
                        for i in range {
                            for (o, d) in gx.data_mut()[s * c..(s + 1) * c].iter_mut().zip(g.row_slice(i)) {
                                *o += d;
                            }
                        }
                    }
                }
            }
            Op::SegmentMaxAbs { x, picks } => {
                if let Some(gx) = self.slot(adj, *x) {
                    for (s, &(idx, sign)) in picks.iter().enumerate() {
                        gx.data_mut()[idx] += sign * g.data()[s];
                    }
                }
            }
            Op::Column(x, j) => {
                let c = self.shape(*x).1;
                if let Some(gx) = self.slot(adj, *x) {
                    for (i, d) in g.data().iter().enumerate() {
                        gx.data_mut()[i * c + j] += d;
                    }
                }
            }
            Op::StraightThrough(soft) => {
                if let Some(gs) = self.slot(adj, *soft) {
                    gs.add_assign(g);
                }
            }
            Op::RnnScan { pre, recur, segments } => {
                let h = out.cols();
                let u = self.value(*recur).data();
                // da_t = (g_t + da_{t+1} U^T) * (1 - h_t^2)
                let mut da = vec![0.0; out.len()];
                for range in segments.iter() {
                    let mut carry = vec![0.0; h];
                    for t in range.rev() {
                        let row = &mut da[t * h..(t + 1) * h];
                        for j in 0..h {
                            let y = out.data()[t * h + j];
                            row[j] = (g.data()[t * h + j] + carry[j]) * (1.0 - y * y);
                        }
                        carry.iter_mut().for_each(|c| *c = 0.0);
                        matmul_bt_into(row, u, &mut carry, 1, h, h);
                    }
                }
                if let Some(gu) = self.slot(adj, *recur) {
                    for range in segments.iter() {
                        for t in range.start + 1..range.end {
                            matmul_at_into(
                                &out.data()[(t - 1) * h..t * h],
                                &da[t * h..(t + 1) * h],
                                gu.data_mut(),
                                1,
                                h,
                                h,
                            );
                        }
                    }
                }
                if let Some(gp) = self.slot(adj, *pre) {
                    for (o, d) in gp.data_mut().iter_mut().zip(&da) {
                        *o += d;
                    }
                }
            }
        }
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

fn softmax_backward_rows(y: &Tensor, g: &Tensor, gx: &mut Tensor) {
    let c = y.cols();
    for ((yr, gr), or) in y.data().chunks(c).zip(g.data().chunks(c)).zip(gx.data_mut().chunks_mut(c)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, yv), gv) in or.iter_mut().zip(yr).zip(gr) {
            *o += yv * (gv - dot);
        }
    }
}
