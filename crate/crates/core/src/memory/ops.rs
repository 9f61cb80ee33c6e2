//! Tape-free kernels of the memory read path.
//!
//! Slot `(i, j)` of the value table lives at flat index `i·√n + j`.

use std::cmp::Ordering;

use crate::error::{LmnError, Result};
use crate::numerics::ops::{smooth_l1, softmax};
use crate::numerics::{axpy, dot, Matrix};

/// Refuse to materialize full key tables above this many slots.
pub const NAIVE_MAX_SLOTS: usize = 1 << 20;

/// Row and column sub-key tables of one head, each `√n × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryKeys {
    pub row_keys: Matrix,
    pub col_keys: Matrix,
}

impl MemoryKeys {
    pub fn new(row_keys: Matrix, col_keys: Matrix) -> Result<Self> {
        if row_keys.shape() != col_keys.shape() {
            return Err(LmnError::shape(
                "MemoryKeys::new",
                format!("{:?}", row_keys.shape()),
                format!("{:?}", col_keys.shape()),
            ));
        }
        row_keys.ensure_finite("row keys")?;
        col_keys.ensure_finite("col keys")?;
        Ok(MemoryKeys { row_keys, col_keys })
    }

    pub fn sqrt_n(&self) -> usize {
        self.row_keys.rows()
    }

    pub fn d(&self) -> usize {
        self.row_keys.cols()
    }
}

/// The `n × d` value table.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryValues {
    pub values: Matrix,
}

impl MemoryValues {
    pub fn new(values: Matrix) -> Self {
        MemoryValues { values }
    }

    pub fn slots(&self) -> usize {
        self.values.rows()
    }

    pub fn row(&self, slot: usize) -> Result<&[f64]> {
        if slot >= self.values.rows() {
            return Err(LmnError::OutOfRange {
                what: "memory slot",
                index: slot,
                len: self.values.rows(),
            });
        }
        Ok(self.values.row(slot))
    }

    /// Stacks the requested rows in order.
    pub fn gather(&self, slots: &[usize]) -> Result<Matrix> {
        let mut out = Matrix::zeros(slots.len(), self.values.cols());
        for (r, &s) in slots.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.row(s)?);
        }
        Ok(out)
    }
}

#[inline]
pub fn flat_index(row: usize, col: usize, sqrt_n: usize) -> usize {
    row * sqrt_n + col
}

#[inline]
pub fn split_index(slot: usize, sqrt_n: usize) -> (usize, usize) {
    (slot / sqrt_n, slot % sqrt_n)
}

/// Counts scalar multiply-adds spent on key scoring.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MulAddCounter {
    pub madds: u64,
}

/// Slots selected for one query, their normalized weights and the read vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationResult {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub read: Vec<f64>,
}

/// Row-axis and column-axis activation scores.
pub fn score_axes(q_row: &[f64], q_col: &[f64], keys: &MemoryKeys) -> Result<(Vec<f64>, Vec<f64>)> {
    score_axes_counted(q_row, q_col, keys, &mut MulAddCounter::default())
}

pub fn score_axes_counted(
    q_row: &[f64],
    q_col: &[f64],
    keys: &MemoryKeys,
    counter: &mut MulAddCounter,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = keys.d();
    if q_row.len() != d || q_col.len() != d {
        return Err(LmnError::shape(
            "score_axes",
            d,
            format!("{} / {}", q_row.len(), q_col.len()),
        ));
    }
    let s_row: Vec<f64> = (0..keys.sqrt_n()).map(|i| dot(q_row, keys.row_keys.row(i))).collect();
    let s_col: Vec<f64> = (0..keys.sqrt_n()).map(|j| dot(q_col, keys.col_keys.row(j))).collect();
    counter.madds += 2 * (keys.sqrt_n() * d) as u64;
    Ok((s_row, s_col))
}

/// Broadcast-add of the two axis scores into the flat `n`-slot grid.
pub fn combine_scores(s_row: &[f64], s_col: &[f64]) -> Result<Vec<f64>> {
    if s_row.len() != s_col.len() {
        return Err(LmnError::shape("combine_scores", s_row.len(), s_col.len()));
    }
    let mut out = Vec::with_capacity(s_row.len() * s_col.len());
    for r in s_row {
        out.extend(s_col.iter().map(|c| r + c));
    }
    Ok(out)
}

/// Descending score, then ascending index.
#[inline]
fn rank_order(a: (f64, usize), b: (f64, usize)) -> Ordering {
    // `+ 0.0` maps -0.0 to +0.0 so signed zeros tie like any other equal scores
    (b.0 + 0.0).total_cmp(&(a.0 + 0.0)).then(a.1.cmp(&b.1))
}

/// The `k` largest entries of `scores`, ties broken by lowest index, returned
/// in descending score order.
pub fn top_k(scores: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if k > scores.len() {
        return Err(LmnError::contract(format!(
            "top_k: k={k} exceeds {} scores",
            scores.len()
        )));
    }
    let mut ranked: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
    if k < ranked.len() && k > 0 {
        ranked.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
        ranked.truncate(k);
    }
    ranked.sort_unstable_by(|a, b| rank_order(*a, *b));
    ranked.truncate(k);
    Ok(ranked.into_iter().map(|(s, i)| (i, s)).unzip())
}

/// Same selection as `top_k(combine_scores(s_row, s_col), k)` but only scores
/// the `k × k` grid spanned by the per-axis top-`k`. Returns `(row, col)` pairs.
pub fn product_top_k(s_row: &[f64], s_col: &[f64], k: usize) -> Result<Vec<(usize, usize)>> {
    let sqrt_n = s_row.len();
    if s_col.len() != sqrt_n {
        return Err(LmnError::shape("product_top_k", sqrt_n, s_col.len()));
    }
    if k > sqrt_n * sqrt_n {
        return Err(LmnError::contract(format!(
            "top_k: k={k} exceeds {} slots",
            sqrt_n * sqrt_n
        )));
    }
    let ka = k.min(sqrt_n);
    let (rows, _) = top_k(s_row, ka)?;
    let (cols, _) = top_k(s_col, ka)?;
    let mut cand = Vec::with_capacity(ka * ka);
    for &i in &rows {
        for &j in &cols {
            cand.push((s_row[i] + s_col[j], flat_index(i, j, sqrt_n)));
        }
    }
    cand.sort_unstable_by(|a, b| rank_order(*a, *b));
    cand.truncate(k);
    Ok(cand.into_iter().map(|(_, f)| split_index(f, sqrt_n)).collect())
}

/// Softmax over the selected scores, then the weighted sum of the selected value rows.
pub fn read_memory(scores: &[f64], indices: &[usize], values: &MemoryValues) -> Result<ActivationResult> {
    if scores.len() != indices.len() {
        return Err(LmnError::shape("read_memory", indices.len(), scores.len()));
    }
    let mut seen = indices.to_vec();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(LmnError::contract("read_memory: duplicate slot indices"));
    }
    let weights = softmax(scores)?;
    let mut read = vec![0.0; values.values.cols()];
    for (&w, &slot) in weights.iter().zip(indices) {
        axpy(w, values.row(slot)?, &mut read);
    }
    Ok(ActivationResult {
        indices: indices.to_vec(),
        scores: scores.to_vec(),
        weights,
        read,
    })
}

/// Full concatenated key table: row `i·√n + j` is `[row_keys[i], col_keys[j]]`.
pub fn materialize_full_keys(keys: &MemoryKeys) -> Result<Matrix> {
    let sqrt_n = keys.sqrt_n();
    let n = sqrt_n * sqrt_n;
    if n > NAIVE_MAX_SLOTS {
        return Err(LmnError::contract(format!(
            "refusing to materialize {n} slots (limit {NAIVE_MAX_SLOTS})"
        )));
    }
    let d = keys.d();
    let mut full = Matrix::zeros(n, 2 * d);
    for i in 0..sqrt_n {
        for j in 0..sqrt_n {
            let row = full.row_mut(flat_index(i, j, sqrt_n));
            row[..d].copy_from_slice(keys.row_keys.row(i));
            row[d..].copy_from_slice(keys.col_keys.row(j));
        }
    }
    Ok(full)
}

/// Scores every slot against the concatenated query `[q_row, q_col]`.
pub fn naive_scores(q_row: &[f64], q_col: &[f64], full_keys: &Matrix, counter: &mut MulAddCounter) -> Result<Vec<f64>> {
    let q: Vec<f64> = q_row.iter().chain(q_col).copied().collect();
    if q.len() != full_keys.cols() {
        return Err(LmnError::shape("naive_scores", full_keys.cols(), q.len()));
    }
    counter.madds += (full_keys.rows() * full_keys.cols()) as u64;
    Ok((0..full_keys.rows()).map(|s| dot(&q, full_keys.row(s))).collect())
}

/// Reference read over all `n` slots with materialized keys and no top-k.
pub fn naive_read(q_row: &[f64], q_col: &[f64], keys: &MemoryKeys, values: &MemoryValues) -> Result<Vec<f64>> {
    let full = materialize_full_keys(keys)?;
    if values.slots() != full.rows() {
        return Err(LmnError::shape("naive_read", full.rows(), values.slots()));
    }
    let scores = naive_scores(q_row, q_col, &full, &mut MulAddCounter::default())?;
    let weights = softmax(&scores)?;
    let mut out = vec![0.0; values.values.cols()];
    for (slot, w) in weights.iter().enumerate() {
        axpy(*w, values.values.row(slot), &mut out);
    }
    Ok(out)
}

/// Outcome of [`memory_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryLoss {
    pub value: f64,
    /// No position was real, so the loss is zero by convention.
    pub all_masked: bool,
}

/// Mean over real positions of Smooth-L1(read, query).
pub fn memory_loss(reads: &[Vec<f64>], queries: &[Vec<f64>], mask: &[bool], beta: f64) -> Result<MemoryLoss> {
    if reads.len() != queries.len() || reads.len() != mask.len() {
        return Err(LmnError::shape(
            "memory_loss",
            mask.len(),
            format!("{} reads, {} queries", reads.len(), queries.len()),
        ));
    }
    let mut total = 0.0;
    let mut real = 0usize;
    for ((r, q), &m) in reads.iter().zip(queries).zip(mask) {
        if m {
            total += smooth_l1(r, q, beta)?;
            real += 1;
        }
    }
    Ok(if real == 0 {
        MemoryLoss {
            value: 0.0,
            all_masked: true,
        }
    } else {
        MemoryLoss {
            value: total / real as f64,
            all_masked: false,
        }
    })
}
