//! Reverse-mode gradient tape for the handful of ops the model needs.
//!
//! Every op computes its forward value eagerly and records what its
//! vector-Jacobian product needs. [`Tape::backward`] walks the recorded ops in
//! exact reverse order.

use std::collections::BTreeMap;
use std::ops::Range;

use super::matrix::{axpy, dot, Matrix};
use super::ops::{clamp_prob, sigmoid, smooth_l1_elem, smooth_l1_elem_grad, softmax_in_place, PROB_CLAMP};
use crate::error::{LmnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Identifies a row-addressed table whose gradient is kept sparse.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TableKey {
    Param(ParamId),
    /// A table stored outside the [`ParamSet`], such as the sharded memory values.
    External(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Gather {
        table: TableKey,
        ids: Vec<usize>,
        skip: Option<usize>,
    },
    SelectRows {
        input: NodeId,
        index: Vec<usize>,
    },
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Concat(Vec<NodeId>),
    SoftmaxRows(NodeId),
    PairSum {
        row: NodeId,
        col: NodeId,
        picks: Vec<(usize, usize)>,
        k: usize,
    },
    WeightedRowSum {
        weights: NodeId,
        values: NodeId,
    },
    SegmentMean {
        input: NodeId,
        segments: Vec<Range<usize>>,
    },
    TargetAttention {
        seq: NodeId,
        target: NodeId,
        segments: Vec<Range<usize>>,
        weights: Vec<Vec<f64>>,
    },
    SmoothL1Mean {
        a: NodeId,
        b: NodeId,
        beta: f64,
    },
    Bce {
        probs: NodeId,
        labels: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    pub dense: BTreeMap<ParamId, Matrix>,
    pub sparse: BTreeMap<TableKey, BTreeMap<usize, Vec<f64>>>,
}

impl Gradients {
    pub fn dense(&self, id: ParamId) -> Option<&Matrix> {
        self.dense.get(&id)
    }

    pub fn sparse_rows(&self, key: TableKey) -> Option<&BTreeMap<usize, Vec<f64>>> {
        self.sparse.get(&key)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LmnError::shape(
            op,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId, value: &Matrix) -> NodeId {
        self.push(value.clone(), Op::Param(id))
    }

    /// Rows `ids` of a table, already fetched by the caller into `rows`.
    /// Gradients accumulate per row id; the id equal to `skip` (padding) gets none.
    pub fn gather(&mut self, table: TableKey, ids: Vec<usize>, rows: Matrix, skip: Option<usize>) -> Result<NodeId> {
        if rows.rows() != ids.len() {
            return Err(LmnError::shape("gather", ids.len(), rows.rows()));
        }
        Ok(self.push(rows, Op::Gather { table, ids, skip }))
    }

    /// Row `r` of the output is row `index[r]` of `input`.
    pub fn select_rows(&mut self, input: NodeId, index: Vec<usize>) -> Result<NodeId> {
        let iv = self.value(input);
        let mut out = Matrix::zeros(index.len(), iv.cols());
        for (r, &i) in index.iter().enumerate() {
            if i >= iv.rows() {
                return Err(LmnError::OutOfRange {
                    what: "select_rows",
                    index: i,
                    len: iv.rows(),
                });
            }
            out.row_mut(r).copy_from_slice(iv.row(i));
        }
        Ok(self.push(out, Op::SelectRows { input, index }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_bt(self.value(b))?;
        Ok(self.push(v, Op::MatMulBt(a, b)))
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(LmnError::shape(
                "add_bias",
                format!("1x{}", av.cols()),
                format!("{:?}", bv.shape()),
            ));
        }
        let mut v = av.clone();
        for r in 0..v.rows() {
            axpy(1.0, bv.data(), v.row_mut(r));
        }
        Ok(self.push(v, Op::AddBias(a, bias)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_same("add", self.value(a), self.value(b))?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.data_mut().iter_mut().for_each(|x| *x = sigmoid(*x));
        self.push(v, Op::Sigmoid(a))
    }

    /// Column-wise concatenation of nodes with equal row counts.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or_else(|| LmnError::contract("concat of zero parts"))?;
        let mut cols = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(LmnError::shape("concat", rows, v.rows()));
            }
            cols += v.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            let dst = out.row_mut(r);
            for p in parts {
                let src = self.nodes[p.0].value.row(r);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let mut v = self.value(a).clone();
        if v.cols() == 0 {
            return Err(LmnError::contract("softmax over zero columns"));
        }
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        Ok(self.push(v, Op::SoftmaxRows(a)))
    }

    /// `out[r][t] = row[r][i] + col[r][j]` for the `t`-th pick `(i, j)` of row `r`.
    /// `picks` holds `k` pairs per row, row-major.
    pub fn pair_sum(&mut self, row: NodeId, col: NodeId, picks: Vec<(usize, usize)>, k: usize) -> Result<NodeId> {
        let (rv, cv) = (self.value(row), self.value(col));
        if rv.rows() != cv.rows() || picks.len() != rv.rows() * k {
            return Err(LmnError::shape(
                "pair_sum",
                format!("{} rows with {k} picks each", rv.rows()),
                format!("{} col rows, {} picks", cv.rows(), picks.len()),
            ));
        }
        let mut out = Matrix::zeros(rv.rows(), k);
        for r in 0..rv.rows() {
            for t in 0..k {
                let (i, j) = picks[r * k + t];
                if i >= rv.cols() || j >= cv.cols() {
                    return Err(LmnError::OutOfRange {
                        what: "pair_sum pick",
                        index: i.max(j),
                        len: rv.cols().min(cv.cols()),
                    });
                }
                out.set(r, t, rv.get(r, i) + cv.get(r, j));
            }
        }
        Ok(self.push(out, Op::PairSum { row, col, picks, k }))
    }

    /// `out[r] = Σ_t weights[r][t] · values[r·k + t]` with `k = weights.cols()`.
    pub fn weighted_row_sum(&mut self, weights: NodeId, values: NodeId) -> Result<NodeId> {
        let (wv, vv) = (self.value(weights), self.value(values));
        let k = wv.cols();
        if vv.rows() != wv.rows() * k {
            return Err(LmnError::shape("weighted_row_sum", wv.rows() * k, vv.rows()));
        }
        let mut out = Matrix::zeros(wv.rows(), vv.cols());
        for r in 0..wv.rows() {
            for t in 0..k {
                let w = wv.get(r, t);
                let src = vv.row(r * k + t);
                axpy(w, src, out.row_mut(r));
            }
        }
        Ok(self.push(out, Op::WeightedRowSum { weights, values }))
    }

    /// Mean of the input rows within each segment; an empty segment yields a zero row.
    pub fn segment_mean(&mut self, input: NodeId, segments: Vec<Range<usize>>) -> Result<NodeId> {
        let iv = self.value(input);
        let mut out = Matrix::zeros(segments.len(), iv.cols());
        for (s, seg) in segments.iter().enumerate() {
            if seg.end > iv.rows() {
                return Err(LmnError::OutOfRange {
                    what: "segment_mean range",
                    index: seg.end,
                    len: iv.rows(),
                });
            }
            if seg.is_empty() {
                continue;
            }
            let inv = 1.0 / seg.len() as f64;
            for r in seg.clone() {
                axpy(inv, iv.row(r), out.row_mut(s));
            }
        }
        Ok(self.push(out, Op::SegmentMean { input, segments }))
    }

    /// Per segment `b`: softmax over rows `t` of `seq[t]·target[b]`, then the
    /// weighted sum of those rows. An empty segment yields a zero row.
    pub fn target_attention(&mut self, seq: NodeId, target: NodeId, segments: Vec<Range<usize>>) -> Result<NodeId> {
        let (sv, tv) = (self.value(seq), self.value(target));
        if tv.rows() != segments.len() || tv.cols() != sv.cols() {
            return Err(LmnError::shape(
                "target_attention",
                format!("{}x{}", segments.len(), sv.cols()),
                format!("{:?}", tv.shape()),
            ));
        }
        let mut out = Matrix::zeros(segments.len(), sv.cols());
        let mut weights = Vec::with_capacity(segments.len());
        for (b, seg) in segments.iter().enumerate() {
            if seg.end > sv.rows() {
                return Err(LmnError::OutOfRange {
                    what: "target_attention range",
                    index: seg.end,
                    len: sv.rows(),
                });
            }
            let mut w: Vec<f64> = seg.clone().map(|t| dot(sv.row(t), tv.row(b))).collect();
            if !w.is_empty() {
                softmax_in_place(&mut w);
                for (wt, t) in w.iter().zip(seg.clone()) {
                    axpy(*wt, sv.row(t), out.row_mut(b));
                }
            }
            weights.push(w);
        }
        Ok(self.push(
            out,
            Op::TargetAttention {
                seq,
                target,
                segments,
                weights,
            },
        ))
    }

    /// Mean over all elements of the Smooth-L1 residual `a − b`. Returns a `1 × 1` node.
    /// Zero elements yield a zero loss.
    pub fn smooth_l1_mean(&mut self, a: NodeId, b: NodeId, beta: f64) -> Result<NodeId> {
        check_same("smooth_l1_mean", self.value(a), self.value(b))?;
        if !(beta > 0.0) {
            return Err(LmnError::contract(format!(
                "smooth_l1 beta must be positive, got {beta}"
            )));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.data().len();
        let total: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| smooth_l1_elem(x - y, beta))
            .sum();
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        Ok(self.push(Matrix::row_vector(&[loss]), Op::SmoothL1Mean { a, b, beta }))
    }

    /// Mean binary cross-entropy of an `R × 1` probability column against labels.
    pub fn bce(&mut self, probs: NodeId, labels: Vec<f64>) -> Result<NodeId> {
        let pv = self.value(probs);
        if pv.cols() != 1 || pv.rows() != labels.len() || labels.is_empty() {
            return Err(LmnError::shape(
                "bce",
                format!("{}x1", labels.len()),
                format!("{:?}", pv.shape()),
            ));
        }
        let loss = super::ops::binary_cross_entropy(pv.data(), &labels)?;
        Ok(self.push(Matrix::row_vector(&[loss]), Op::Bce { probs, labels }))
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(LmnError::shape(
                "backward",
                "1x1 loss",
                format!("{:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::row_vector(&[1.0]));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match out.dense.get_mut(id) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        out.dense.insert(*id, g);
                    }
                },
                Op::Gather { table, ids, skip } => {
                    let rows = out.sparse.entry(*table).or_default();
                    for (r, &id) in ids.iter().enumerate() {
                        if Some(id) == *skip {
                            continue;
                        }
                        let acc = rows.entry(id).or_insert_with(|| vec![0.0; g.cols()]);
                        axpy(1.0, g.row(r), acc);
                    }
                }
                Op::SelectRows { input, index } => {
                    let iv = self.value(*input);
                    let mut di = Matrix::zeros(iv.rows(), iv.cols());
                    for (r, &i) in index.iter().enumerate() {
                        axpy(1.0, g.row(r), di.row_mut(i));
                    }
                    accumulate(&mut grads, *input, di)?;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_bt(self.value(*b))?;
                    let db = self.value(*a).matmul_at(&g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::MatMulBt(a, b) => {
                    let da = g.matmul(self.value(*b))?;
                    let db = g.matmul_at(self.value(*a))?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::AddBias(a, bias) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        axpy(1.0, g.row(r), db.data_mut());
                    }
                    accumulate(&mut grads, *bias, db)?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Scale(a, s) => {
                    let mut da = g;
                    da.scale(*s);
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Relu(a) => {
                    let mut da = g;
                    for (d, y) in da.data_mut().iter_mut().zip(node.value.data()) {
                        if *y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Sigmoid(a) => {
                    let mut da = g;
                    for (d, y) in da.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let cols = self.value(*p).cols();
                        let mut dp = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        off += cols;
                        accumulate(&mut grads, *p, dp)?;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let mut da = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let d = super::ops::softmax_backward(node.value.row(r), g.row(r));
                        da.row_mut(r).copy_from_slice(&d);
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::PairSum { row, col, picks, k } => {
                    let (rv, cv) = (self.value(*row), self.value(*col));
                    let mut dr = Matrix::zeros(rv.rows(), rv.cols());
                    let mut dc = Matrix::zeros(cv.rows(), cv.cols());
                    for r in 0..g.rows() {
                        for t in 0..*k {
                            let (i, j) = picks[r * k + t];
                            let d = g.get(r, t);
                            dr.set(r, i, dr.get(r, i) + d);
                            dc.set(r, j, dc.get(r, j) + d);
                        }
                    }
                    accumulate(&mut grads, *row, dr)?;
                    accumulate(&mut grads, *col, dc)?;
                }
                Op::WeightedRowSum { weights, values } => {
                    let (wv, vv) = (self.value(*weights), self.value(*values));
                    let k = wv.cols();
                    let mut dw = Matrix::zeros(wv.rows(), k);
                    let mut dv = Matrix::zeros(vv.rows(), vv.cols());
                    for r in 0..wv.rows() {
                        for t in 0..k {
                            dw.set(r, t, dot(g.row(r), vv.row(r * k + t)));
                            axpy(wv.get(r, t), g.row(r), dv.row_mut(r * k + t));
                        }
                    }
                    accumulate(&mut grads, *weights, dw)?;
                    accumulate(&mut grads, *values, dv)?;
                }
                Op::SegmentMean { input, segments } => {
                    let iv = self.value(*input);
                    let mut di = Matrix::zeros(iv.rows(), iv.cols());
                    for (s, seg) in segments.iter().enumerate() {
                        if seg.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / seg.len() as f64;
                        for r in seg.clone() {
                            axpy(inv, g.row(s), di.row_mut(r));
                        }
                    }
                    accumulate(&mut grads, *input, di)?;
                }
                Op::TargetAttention {
                    seq,
                    target,
                    segments,
                    weights,
                } => {
                    let (sv, tv) = (self.value(*seq), self.value(*target));
                    let mut ds = Matrix::zeros(sv.rows(), sv.cols());
                    let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                    for (b, seg) in segments.iter().enumerate() {
                        let w = &weights[b];
                        if w.is_empty() {
                            continue;
                        }
                        let gb = g.row(b);
                        let dw: Vec<f64> = seg.clone().map(|t| dot(gb, sv.row(t))).collect();
                        let dscore = super::ops::softmax_backward(w, &dw);
                        for (pos, t) in seg.clone().enumerate() {
                            axpy(w[pos], gb, ds.row_mut(t));
                            axpy(dscore[pos], tv.row(b), ds.row_mut(t));
                            axpy(dscore[pos], sv.row(t), dt.row_mut(b));
                        }
                    }
                    accumulate(&mut grads, *seq, ds)?;
                    accumulate(&mut grads, *target, dt)?;
                }
                Op::SmoothL1Mean { a, b, beta } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let n = av.data().len().max(1) as f64;
                    let scale = g.get(0, 0) / n;
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for ((d, x), y) in da.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        *d = scale * smooth_l1_elem_grad(x - y, *beta);
                    }
                    let mut db = da.clone();
                    db.scale(-1.0);
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Bce { probs, labels } => {
                    let pv = self.value(*probs);
                    let scale = g.get(0, 0) / labels.len() as f64;
                    let mut dp = Matrix::zeros(pv.rows(), 1);
                    for (r, &y) in labels.iter().enumerate() {
                        let raw = pv.get(r, 0);
                        let p = clamp_prob(raw);
                        // clamped probabilities are constant in the input
                        if raw > PROB_CLAMP && raw < 1.0 - PROB_CLAMP {
                            dp.set(r, 0, scale * (-y / p + (1.0 - y) / (1.0 - p)));
                        }
                    }
                    accumulate(&mut grads, *probs, dp)?;
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) -> Result<()> {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
