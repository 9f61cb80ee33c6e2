use rand::Rng;

use super::config::MemoryConfig;
use super::ops::{
    combine_scores, flat_index, memory_loss, read_memory, top_k, ActivationResult, MemoryKeys, MemoryLoss, MemoryValues,
};
use crate::error::{LmnError, Result};
use crate::numerics::{param_rng, uniform, Matrix, Mlp, NodeId, ParamId, ParamSet, TableKey, Tape};

/// Sparse-gradient key of the value table on a [`Tape`].
pub const VALUES_TABLE: TableKey = TableKey::External(0);

/// Query MLPs and sub-key tables owned by one head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadParams {
    pub row_mlp: Mlp,
    pub col_mlp: Mlp,
    pub row_keys: ParamId,
    pub col_keys: ParamId,
}

/// Learnable parts of the memory except the value table, which may be sharded
/// and is therefore passed in by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBlock {
    config: MemoryConfig,
    merge: Mlp,
    heads: Vec<HeadParams>,
}

/// Read of one query across all heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadRead {
    /// User-aware query.
    pub query: Vec<f64>,
    pub heads: Vec<ActivationResult>,
    /// Sum of the per-head reads.
    pub read: Vec<f64>,
}

/// Result of reading a whole behavior sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRead {
    /// Masked mean of the per-position reads.
    pub summary: Vec<f64>,
    /// `None` at padded positions.
    pub positions: Vec<Option<MultiHeadRead>>,
    pub loss: MemoryLoss,
}

/// Tape nodes produced by [`MemoryBlock::forward_tape`].
#[derive(Debug, Clone)]
pub struct TapeRead {
    /// `R × d` summed reads.
    pub read: NodeId,
    /// `R × d` user-aware queries.
    pub query: NodeId,
    /// Per head, the `R·k` selected flat slot ids, row-major.
    pub slots: Vec<Vec<usize>>,
}

/// Initial `n × d` value table, uniform in `±1/√d`.
pub fn init_values(config: &MemoryConfig, seed: u64) -> MemoryValues {
    let scale = 1.0 / (config.d as f64).sqrt();
    MemoryValues::new(uniform(
        &mut param_rng(seed, "memory.values"),
        config.n(),
        config.d,
        scale,
    ))
}

impl MemoryBlock {
    /// Registers the merge MLP and each head's query MLPs and keys in `params`.
    pub fn new(params: &mut ParamSet, config: &MemoryConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let merge = Mlp::new(params, "memory.merge", &config.merge_dims(), seed)?;
        let key_scale = 1.0 / (d as f64).sqrt();
        let heads = (0..config.heads)
            .map(|h| {
                let row_mlp = Mlp::new(params, &format!("memory.head{h}.row_query"), &[d, d], seed)?;
                let col_mlp = Mlp::new(params, &format!("memory.head{h}.col_query"), &[d, d], seed)?;
                let rk = format!("memory.head{h}.row_keys");
                let ck = format!("memory.head{h}.col_keys");
                let row_keys = params.add(&rk, uniform(&mut param_rng(seed, &rk), config.sqrt_n, d, key_scale));
                let col_keys = params.add(&ck, uniform(&mut param_rng(seed, &ck), config.sqrt_n, d, key_scale));
                Ok(HeadParams {
                    row_mlp,
                    col_mlp,
                    row_keys,
                    col_keys,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MemoryBlock {
            config: config.clone(),
            merge,
            heads,
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn merge_mlp(&self) -> &Mlp {
        &self.merge
    }

    pub fn heads(&self) -> &[HeadParams] {
        &self.heads
    }

    pub fn keys(&self, params: &ParamSet, head: usize) -> Result<MemoryKeys> {
        let h = self.head(head)?;
        MemoryKeys::new(params.get(h.row_keys).clone(), params.get(h.col_keys).clone())
    }

    fn head(&self, head: usize) -> Result<&HeadParams> {
        self.heads.get(head).ok_or(LmnError::OutOfRange {
            what: "memory head",
            index: head,
            len: self.heads.len(),
        })
    }

    fn check_values(&self, values: &MemoryValues) -> Result<()> {
        if values.values.shape() != (self.config.n(), self.config.d) {
            return Err(LmnError::shape(
                "memory values",
                format!("{}x{}", self.config.n(), self.config.d),
                format!("{:?}", values.values.shape()),
            ));
        }
        Ok(())
    }

    /// User-aware query: merge MLP over `[x, u]`.
    pub fn build_query(&self, params: &ParamSet, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.d;
        if x.len() != d || u.len() != d {
            return Err(LmnError::shape(
                "build_query",
                d,
                format!("x {} / u {}", x.len(), u.len()),
            ));
        }
        let merged: Vec<f64> = x.iter().chain(u).copied().collect();
        Ok(self.merge.eval(params, &Matrix::row_vector(&merged))?.into_vec())
    }

    /// Row and column queries of `head` derived from the same user-aware query.
    pub fn split_queries(&self, params: &ParamSet, head: usize, query: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let h = self.head(head)?;
        let q = Matrix::row_vector(query);
        Ok((
            h.row_mlp.eval(params, &q)?.into_vec(),
            h.col_mlp.eval(params, &q)?.into_vec(),
        ))
    }

    /// Scores, top-k and read for one head, given the user-aware query.
    pub fn read_head(
        &self,
        params: &ParamSet,
        head: usize,
        query: &[f64],
        values: &MemoryValues,
    ) -> Result<ActivationResult> {
        self.check_values(values)?;
        let (q_row, q_col) = self.split_queries(params, head, query)?;
        let keys = self.keys(params, head)?;
        let (s_row, s_col) = super::ops::score_axes(&q_row, &q_col, &keys)?;
        let scores = combine_scores(&s_row, &s_col)?;
        let (indices, top) = top_k(&scores, self.config.k_top)?;
        read_memory(&top, &indices, values)
    }

    /// Full read of item `x` for user `u`: every head reads the shared value
    /// table and the head reads are summed.
    pub fn multi_head_read(
        &self,
        params: &ParamSet,
        x: &[f64],
        u: &[f64],
        values: &MemoryValues,
    ) -> Result<MultiHeadRead> {
        let query = self.build_query(params, x, u)?;
        let mut read = vec![0.0; self.config.d];
        let mut heads = Vec::with_capacity(self.heads.len());
        for h in 0..self.heads.len() {
            let act = self.read_head(params, h, &query, values)?;
            read.iter_mut().zip(&act.read).for_each(|(a, b)| *a += b);
            heads.push(act);
        }
        Ok(MultiHeadRead { query, heads, read })
    }

    /// Reads every real position of an `L × d` sequence and averages the reads.
    pub fn memory_forward(
        &self,
        params: &ParamSet,
        sequence: &Matrix,
        u: &[f64],
        mask: &[bool],
        values: &MemoryValues,
    ) -> Result<SequenceRead> {
        if sequence.rows() != mask.len() || sequence.cols() != self.config.d {
            return Err(LmnError::shape(
                "memory_forward",
                format!("{}x{}", mask.len(), self.config.d),
                format!("{:?}", sequence.shape()),
            ));
        }
        let d = self.config.d;
        let mut summary = vec![0.0; d];
        let mut positions = Vec::with_capacity(mask.len());
        let (mut reads, mut queries) = (Vec::new(), Vec::new());
        for (t, &real) in mask.iter().enumerate() {
            if !real {
                positions.push(None);
                continue;
            }
            let r = self.multi_head_read(params, sequence.row(t), u, values)?;
            summary.iter_mut().zip(&r.read).for_each(|(a, b)| *a += b);
            reads.push(r.read.clone());
            queries.push(r.query.clone());
            positions.push(Some(r));
        }
        if !reads.is_empty() {
            let inv = 1.0 / reads.len() as f64;
            summary.iter_mut().for_each(|v| *v *= inv);
        }
        let ones = vec![true; reads.len()];
        let loss = memory_loss(&reads, &queries, &ones, self.config.beta_smooth)?;
        Ok(SequenceRead {
            summary,
            positions,
            loss: MemoryLoss {
                all_masked: reads.is_empty(),
                ..loss
            },
        })
    }

    /// Records the read of `R` query rows on `tape`.
    ///
    /// `items` and `users` are `R × d` nodes (one row per real sequence
    /// position). `fetch` returns the value rows for a list of flat slot ids in
    /// request order; it is where a sharded value store plugs in.
    pub fn forward_tape<F>(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        items: NodeId,
        users: NodeId,
        mut fetch: F,
    ) -> Result<TapeRead>
    where
        F: FnMut(&[usize]) -> Result<Matrix>,
    {
        let rows = tape.value(items).rows();
        let merged = tape.concat(&[items, users])?;
        let query = self.merge.forward(params, tape, merged)?;
        let k = self.config.k_top;
        let sqrt_n = self.config.sqrt_n;

        let mut read: Option<NodeId> = None;
        let mut slots_per_head = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let q_row = h.row_mlp.forward(params, tape, query)?;
            let q_col = h.col_mlp.forward(params, tape, query)?;
            let rk = tape.param(h.row_keys, params.get(h.row_keys));
            let ck = tape.param(h.col_keys, params.get(h.col_keys));
            let s_row = tape.matmul_bt(q_row, rk)?;
            let s_col = tape.matmul_bt(q_col, ck)?;

            let mut picks = Vec::with_capacity(rows * k);
            for r in 0..rows {
                let p = super::ops::product_top_k(tape.value(s_row).row(r), tape.value(s_col).row(r), k)?;
                picks.extend(p);
            }
            let slots: Vec<usize> = picks.iter().map(|&(i, j)| flat_index(i, j, sqrt_n)).collect();
            let selected = tape.pair_sum(s_row, s_col, picks, k)?;
            let weights = tape.softmax_rows(selected)?;
            let value_rows = fetch(&slots)?;
            let gathered = tape.gather(VALUES_TABLE, slots.clone(), value_rows, None)?;
            let head_read = tape.weighted_row_sum(weights, gathered)?;
            read = Some(match read {
                None => head_read,
                Some(acc) => tape.add(acc, head_read)?,
            });
            slots_per_head.push(slots);
        }
        Ok(TapeRead {
            read: read.expect("at least one head by config validation"),
            query,
            slots: slots_per_head,
        })
    }
}

/// Re-draws every key and value entry, used by tests that need fresh random memories.
pub fn randomize_keys(params: &mut ParamSet, block: &MemoryBlock, rng: &mut impl Rng, scale: f64) {
    for h in block.heads() {
        for id in [h.row_keys, h.col_keys] {
            let (r, c) = params.get(id).shape();
            let m = uniform(rng, r, c, scale);
            params.set(id, m).expect("same shape");
        }
    }
}
