use rand::Rng;

use super::kernels::{self, LayerNormCache, KL_CLAMP};
use super::Tensor;
use crate::error::{Result, TcdError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    MulConst(NodeId, Vec<f64>),
    Scale(NodeId, f64),
    Square(NodeId),
    Softmax(NodeId, usize),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: LayerNormCache,
    },
    Gelu(NodeId),
    RowNormalize {
        x: NodeId,
        eps: f64,
        norms: Vec<f64>,
    },
    GatherRows(NodeId, Vec<usize>),
    Pick(NodeId, Vec<(usize, usize)>),
    ScatterRows(Vec<(NodeId, Vec<usize>)>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    MeanRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    WeightedSum(Vec<(NodeId, f64)>),
    KlDiv { q: NodeId, p: Vec<f64> },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    MseConst(NodeId, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Tape of recorded operations. Recording order is a topological order, so
/// backward is a single reverse sweep.
#[derive(Default)]
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if the node received one.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let n = &self.nodes[id.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).expect("grad matches value shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TcdError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b), &[a, b]))
    }

    fn zip_with(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `x[M×N] + row[N]`, broadcasting the row over all M rows.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(row).numel() != n {
            return Err(TcdError::dim("add_row", self.shape(x), self.shape(row)));
        }
        let (xd, rd) = (self.value(x).data(), self.value(row).data());
        let mut out = xd.to_vec();
        for i in 0..m {
            for (o, r) in out[i * n..(i + 1) * n].iter_mut().zip(rd) {
                *o += r;
            }
        }
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::AddRow(x, row), &[x, row]))
    }

    /// `x[M×N] * col[M×1]`, scaling row i by `col[i]`.
    pub fn mul_col(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(col).numel() != m {
            return Err(TcdError::dim("mul_col", self.shape(x), self.shape(col)));
        }
        let (xd, cd) = (self.value(x).data(), self.value(col).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = xd[i * n + j] * cd[i];
            }
        }
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::MulCol(x, col), &[x, col]))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).scaled(c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let v = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|a| a * a).collect()).expect("shape");
        self.push(v, Op::Square(x), &[x])
    }

    /// Inverted dropout. A no-op when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f64, rng: &mut R) -> Result<NodeId> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(TcdError::Config(format!("dropout probability {p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(v, Op::MulConst(x, mask), &[x]))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = kernels::softmax(self.value(x), axis)?;
        Ok(self.push(v, Op::Softmax(x, axis), &[x]))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (v, cache) = kernels::layer_norm_cached(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, cache }, &[x, gamma, beta]))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = kernels::gelu(self.value(x));
        self.push(v, Op::Gelu(x), &[x])
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn row_normalize(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let (v, norms) = kernels::row_normalize_cached(self.value(x), eps)?;
        Ok(self.push(v, Op::RowNormalize { x, eps, norms }, &[x]))
    }

    /// Pairwise cosine similarities of the rows of `a` against the rows of `b`.
    pub fn cross_relation(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let na = self.row_normalize(a, kernels::COSINE_EPS)?;
        let nb = self.row_normalize(b, kernels::COSINE_EPS)?;
        self.matmul_nt(na, nb)
    }

    pub fn relation_matrix(&mut self, reps: NodeId) -> Result<NodeId> {
        let n = self.row_normalize(reps, kernels::COSINE_EPS)?;
        self.matmul_nt(n, n)
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if rows.is_empty() {
            return Err(TcdError::Empty("gather_rows with no rows".into()));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(TcdError::Contract(format!("gather_rows: row {r} out of range {m}")));
            }
            out.extend_from_slice(&xd[r * n..(r + 1) * n]);
        }
        let v = Tensor::new(vec![rows.len(), n], out)?;
        Ok(self.push(v, Op::GatherRows(x, rows.to_vec()), &[x]))
    }

    /// Picks individual `(row, col)` entries into a column `[K×1]`.
    pub fn pick(&mut self, x: NodeId, coords: &[(usize, usize)]) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if coords.is_empty() {
            return Err(TcdError::Empty("pick with no coordinates".into()));
        }
        let mut out = Vec::with_capacity(coords.len());
        for &(r, c) in coords {
            if r >= m || c >= n {
                return Err(TcdError::Contract(format!("pick: ({r},{c}) outside [{m}x{n}]")));
            }
            out.push(self.value(x).at(r, c));
        }
        let v = Tensor::new(vec![coords.len(), 1], out)?;
        Ok(self.push(v, Op::Pick(x, coords.to_vec()), &[x]))
    }

    /// Places the rows of each part at the given row indices of an `[rows×N]`
    /// output. Parts are accumulated in the order given.
    pub fn scatter_rows(&mut self, parts: &[(NodeId, Vec<usize>)], rows: usize) -> Result<NodeId> {
        let Some((first, _)) = parts.first() else {
            return Err(TcdError::Empty("scatter_rows with no parts".into()));
        };
        let (_, n) = self.value(*first).dims2()?;
        let mut out = vec![0.0; rows * n];
        for (id, idx) in parts {
            let (pm, pn) = self.value(*id).dims2()?;
            if pn != n || pm != idx.len() {
                return Err(TcdError::dim("scatter_rows", self.shape(*id), &[idx.len(), n]));
            }
            let pd = self.value(*id).data();
            for (k, &r) in idx.iter().enumerate() {
                if r >= rows {
                    return Err(TcdError::Contract(format!("scatter_rows: row {r} out of range {rows}")));
                }
                for (o, &p) in out[r * n..(r + 1) * n].iter_mut().zip(&pd[k * n..(k + 1) * n]) {
                    *o += p;
                }
            }
        }
        let v = Tensor::new(vec![rows, n], out)?;
        let parents: Vec<NodeId> = parts.iter().map(|(id, _)| *id).collect();
        Ok(self.push(v, Op::ScatterRows(parts.to_vec()), &parents))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if start >= end || end > m {
            return Err(TcdError::Contract(format!("slice_rows {start}..{end} of {m}")));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let v = Tensor::new(vec![end - start, n], data)?;
        Ok(self.push(v, Op::SliceRows(x, start), &[x]))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if start >= end || end > n {
            return Err(TcdError::Contract(format!("slice_cols {start}..{end} of {n}")));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&xd[i * n + start..i * n + end]);
        }
        let v = Tensor::new(vec![m, end - start], data)?;
        Ok(self.push(v, Op::SliceCols(x, start), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let (_, n) = self.value(*parts.first().ok_or_else(|| TcdError::Empty("concat_rows".into()))?).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pn != n {
                return Err(TcdError::dim("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            rows += pm;
        }
        let v = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let (m, _) = self.value(*parts.first().ok_or_else(|| TcdError::Empty("concat_cols".into()))?).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(TcdError::dim("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let v = Tensor::new(vec![m, n], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Column means, `[M×N] -> [1×N]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(&xd[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let v = Tensor::new(vec![1, n], out)?;
        Ok(self.push(v, Op::MeanRows(x), &[x]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut s = 0.0;
        for &(id, w) in terms {
            if !self.value(id).is_scalar() {
                return Err(TcdError::Contract("weighted_sum expects scalar terms".into()));
            }
            s += w * self.value(id).item();
        }
        let parents: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), &parents))
    }

    /// Arithmetic mean of scalar nodes.
    pub fn mean_of(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(TcdError::Empty("mean_of with no terms".into()));
        }
        let w = 1.0 / terms.len() as f64;
        let weighted: Vec<(NodeId, f64)> = terms.iter().map(|&t| (t, w)).collect();
        self.weighted_sum(&weighted)
    }

    /// `KL(p ‖ q)` against a constant distribution `p`; `q` is clamped at 1e-12.
    pub fn kl_div(&mut self, p: &[f64], q: NodeId) -> Result<NodeId> {
        let v = kernels::kl_div(p, self.value(q).data())?;
        Ok(self.push(Tensor::scalar(v), Op::KlDiv { q, p: p.to_vec() }, &[q]))
    }

    pub fn cross_entropy_masked(&mut self, logits: NodeId, targets: &[usize], mask: &[bool]) -> Result<NodeId> {
        let v = kernels::cross_entropy_masked(self.value(logits), targets, mask)?;
        let count = mask.iter().filter(|&&m| m).count();
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            count,
        };
        Ok(self.push(Tensor::scalar(v), op, &[logits]))
    }

    /// Mean squared difference against a constant target.
    pub fn mse_const(&mut self, x: NodeId, target: &Tensor) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(TcdError::dim("mse_const", xv.shape(), target.shape()));
        }
        let n = xv.numel() as f64;
        let s = xv.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(s), Op::MseConst(x, target.clone()), &[x]))
    }

    /// Reverse sweep from a scalar `loss`. Every `requires_grad` node reachable
    /// from the loss ends up holding `dLoss/dNode`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(TcdError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64]) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => node.grad = Some(delta.to_vec()),
        }
    }

    fn accumulate_at(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        let n = node.value.numel();
        let g = node.grad.get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) -> Result<()> {
        // Temporarily take the op so parents can be mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let res = self.propagate_op(i, &op, g);
        self.nodes[i].op = op;
        res
    }

    fn propagate_op(&mut self, i: usize, op: &Op, g: &[f64]) -> Result<()> {
        let out_shape = self.nodes[i].value.shape().to_vec();
        let gt = || Tensor::new(out_shape.clone(), g.to_vec());
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let gt = gt()?;
                if self.requires_grad(*a) {
                    let da = kernels::matmul_nt(&gt, self.value(*b))?;
                    self.accumulate(*a, da.data());
                }
                if self.requires_grad(*b) {
                    let db = kernels::matmul_tn(self.value(*a), &gt)?;
                    self.accumulate(*b, db.data());
                }
            }
            Op::MatMulNt(a, b) => {
                let gt = gt()?;
                if self.requires_grad(*a) {
                    let da = kernels::matmul(&gt, self.value(*b))?;
                    self.accumulate(*a, da.data());
                }
                if self.requires_grad(*b) {
                    let db = kernels::matmul_tn(&gt, self.value(*a))?;
                    self.accumulate(*b, db.data());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::AddRow(x, row) => {
                self.accumulate(*x, g);
                let n = self.value(*row).numel();
                let mut dr = vec![0.0; n];
                for chunk in g.chunks(n) {
                    for (d, v) in dr.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                self.accumulate(*row, &dr);
            }
            Op::MulCol(x, col) => {
                let (m, n) = self.value(*x).dims2()?;
                let cd = self.value(*col).data();
                let xd = self.value(*x).data();
                let mut dx = vec![0.0; m * n];
                let mut dc = vec![0.0; m];
                for r in 0..m {
                    for c in 0..n {
                        dx[r * n + c] = g[r * n + c] * cd[r];
                        dc[r] += g[r * n + c] * xd[r * n + c];
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*col, &dc);
            }
            Op::MulConst(x, mask) => {
                let dx: Vec<f64> = g.iter().zip(mask).map(|(a, b)| a * b).collect();
                self.accumulate(*x, &dx);
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(*x, &dx);
            }
            Op::Square(x) => {
                let dx: Vec<f64> = g.iter().zip(self.value(*x).data()).map(|(a, v)| 2.0 * v * a).collect();
                self.accumulate(*x, &dx);
            }
            Op::Softmax(x, axis) => {
                let y = self.nodes[i].value.data();
                let (outer, len, inner) = kernels::axis_split(&out_shape, *axis)?;
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let base = o * len * inner + k;
                        let dot: f64 = (0..len).map(|t| y[base + t * inner] * g[base + t * inner]).sum();
                        for t in 0..len {
                            let j = base + t * inner;
                            dx[j] = y[j] * (g[j] - dot);
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let n = self.value(*gamma).numel();
                let gam = self.value(*gamma).data().to_vec();
                let rows = g.len() / n;
                let mut dx = vec![0.0; g.len()];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let xh = &cache.xhat[r * n..(r + 1) * n];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..n {
                        let d = gr[c] * gam[c];
                        mean_d += d;
                        mean_dx += d * xh[c];
                        dg[c] += gr[c] * xh[c];
                        db[c] += gr[c];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    let is = cache.inv_std[r];
                    for c in 0..n {
                        let d = gr[c] * gam[c];
                        dx[r * n + c] = is * (d - mean_d - xh[c] * mean_dx);
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gamma, &dg);
                self.accumulate(*beta, &db);
            }
            Op::Gelu(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(a, &v)| a * kernels::gelu_grad_scalar(v))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::RowNormalize { x, eps, norms } => {
                let (m, n) = self.value(*x).dims2()?;
                let y = self.nodes[i].value.data();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    if norms[r] > *eps {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            dx[r * n + c] = (gr[c] - yr[c] * dot) / norms[r];
                        }
                    } else {
                        for c in 0..n {
                            dx[r * n + c] = gr[c] / eps;
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::GatherRows(x, rows) => {
                let n = out_shape[1];
                let rows = rows.clone();
                self.accumulate_at(*x, |dx| {
                    for (k, &r) in rows.iter().enumerate() {
                        for c in 0..n {
                            dx[r * n + c] += g[k * n + c];
                        }
                    }
                });
            }
            Op::Pick(x, coords) => {
                let n = self.value(*x).dims2()?.1;
                self.accumulate_at(*x, |dx| {
                    for (k, &(r, c)) in coords.iter().enumerate() {
                        dx[r * n + c] += g[k];
                    }
                });
            }
            Op::ScatterRows(parts) => {
                let n = out_shape[1];
                for (id, idx) in parts {
                    let mut d = Vec::with_capacity(idx.len() * n);
                    for &r in idx {
                        d.extend_from_slice(&g[r * n..(r + 1) * n]);
                    }
                    self.accumulate(*id, &d);
                }
            }
            Op::SliceRows(x, start) => {
                let n = out_shape[1];
                let start = *start;
                self.accumulate_at(*x, |dx| {
                    for (d, v) in dx[start * n..start * n + g.len()].iter_mut().zip(g) {
                        *d += v;
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let (m, w) = (out_shape[0], out_shape[1]);
                let n = self.value(*x).dims2()?.1;
                let start = *start;
                self.accumulate_at(*x, |dx| {
                    for r in 0..m {
                        for c in 0..w {
                            dx[r * n + start + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(p, &g[off..off + len]);
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = out_shape[1];
                let mut col = 0;
                for &p in parts {
                    let (m, w) = self.value(p).dims2()?;
                    let mut d = Vec::with_capacity(m * w);
                    for r in 0..m {
                        d.extend_from_slice(&g[r * n + col..r * n + col + w]);
                    }
                    self.accumulate(p, &d);
                    col += w;
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = self.value(*x).dims2()?;
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        dx[r * n + c] = g[c] / m as f64;
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.value(*x).numel()];
                self.accumulate(*x, &dx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let dx = vec![g[0] / n as f64; n];
                self.accumulate(*x, &dx);
            }
            Op::WeightedSum(terms) => {
                for &(id, w) in terms {
                    self.accumulate(id, &[w * g[0]]);
                }
            }
            Op::KlDiv { q, p } => {
                let qd = self.value(*q).data();
                let dq: Vec<f64> = p
                    .iter()
                    .zip(qd)
                    .map(|(&pi, &qi)| if pi > 0.0 && qi > KL_CLAMP { -g[0] * pi / qi } else { 0.0 })
                    .collect();
                self.accumulate(*q, &dq);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                count,
            } => {
                let lv = self.value(*logits);
                let (m, v) = lv.dims2()?;
                let mut dl = vec![0.0; m * v];
                let scale = g[0] / *count as f64;
                for r in 0..m {
                    if !mask[r] {
                        continue;
                    }
                    let row = lv.row(r);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    for c in 0..v {
                        dl[r * v + c] = scale * (row[c] - max).exp() / z;
                    }
                    dl[r * v + targets[r]] -= scale;
                }
                self.accumulate(*logits, &dl);
            }
            Op::MseConst(x, target) => {
                let n = target.numel() as f64;
                let dx: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| g[0] * 2.0 * (a - b) / n)
                    .collect();
                self.accumulate(*x, &dx);
            }
        }
        Ok(())
    }
}
