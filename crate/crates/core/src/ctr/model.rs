use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{Sample, Vocab, PADDING_ID};
use crate::error::{LmnError, Result};
use crate::memory::{init_values, Checkpoint, CheckpointKind, MemoryBlock, MemoryConfig, MemoryValues, VALUES_TABLE};
use crate::mps::{LookupStats, MemoryServer, UpdateBatch};
use crate::numerics::gradcheck::ParamBlocks;
use crate::numerics::{param_rng, uniform, Gradients, Matrix, Mlp, NodeId, ParamId, ParamSet, TableKey, Tape};
use crate::optim::Adagrad;

/// Which sequence feature the CTR tower sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// User, item and cross features only.
    Base,
    /// Plus the masked mean of the behavior sequence.
    Pooling,
    /// Plus the candidate-weighted attention over the sequence.
    TargetAttention,
    /// Plus the pooled sequence and the memory summary.
    Lmn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Pooling, Variant::TargetAttention, Variant::Lmn];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Pooling => "pooling",
            Variant::TargetAttention => "target_attention",
            Variant::Lmn => "lmn",
        }
    }

    fn code(self) -> u64 {
        match self {
            Variant::Base => 0,
            Variant::Pooling => 1,
            Variant::TargetAttention => 2,
            Variant::Lmn => 3,
        }
    }

    fn from_code(c: u64) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.code() == c)
            .ok_or_else(|| LmnError::Checkpoint(format!("unknown variant code {c}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = LmnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "pooling" => Ok(Variant::Pooling),
            "target_attention" | "din" => Ok(Variant::TargetAttention),
            "lmn" => Ok(Variant::Lmn),
            other => Err(LmnError::Parse(format!(
                "unknown variant {other:?} (expected base, pooling, target_attention or lmn)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub embed_dim: usize,
    /// Hidden widths of the CTR tower; a final width-1 layer is appended.
    pub tower: Vec<usize>,
    /// Used by the lmn variant; `memory.d` must equal `embed_dim`.
    pub memory: MemoryConfig,
    /// Whether the memory summary is fed to the tower (lmn only). With this
    /// off the tower sees exactly what the pooling variant sees.
    pub memory_in_tower: bool,
    pub vocab: Vocab,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, vocab: Vocab) -> Self {
        ModelConfig {
            variant,
            embed_dim: 32,
            tower: vec![256, 128],
            memory: MemoryConfig::default(),
            memory_in_tower: true,
            vocab,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(LmnError::contract("embed_dim must be positive"));
        }
        if self.tower.contains(&0) {
            return Err(LmnError::contract("tower widths must be positive"));
        }
        if self.vocab.users < 2 || self.vocab.items < 2 || self.vocab.cross < 1 {
            return Err(LmnError::contract(
                "vocabulary must hold at least one user and one item",
            ));
        }
        if self.variant == Variant::Lmn {
            self.memory.validate()?;
            if self.memory.d != self.embed_dim {
                return Err(LmnError::contract(format!(
                    "memory d ({}) must equal embed_dim ({})",
                    self.memory.d, self.embed_dim
                )));
            }
        }
        Ok(())
    }

    fn tower_input(&self) -> usize {
        let e = self.embed_dim;
        match self.variant {
            Variant::Base => 3 * e,
            Variant::Pooling | Variant::TargetAttention => 4 * e,
            Variant::Lmn if self.memory_in_tower => 5 * e,
            Variant::Lmn => 4 * e,
        }
    }

    /// Alpha actually applied: only the lmn variant has a memory loss.
    pub fn alpha(&self) -> f64 {
        if self.variant == Variant::Lmn {
            self.memory.alpha
        } else {
            0.0
        }
    }
}

/// Combined objective `ctr + alpha · memory`.
pub fn total_loss(ctr: f64, memory: f64, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(LmnError::contract(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(ctr + alpha * memory)
}

/// Mean binary cross-entropy of predictions against labels.
pub fn ctr_loss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    crate::numerics::binary_cross_entropy(probs, labels)
}

/// Scalar results of one forward pass over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub probs: Vec<f64>,
    pub ctr_loss: f64,
    /// Zero when the batch has no real sequence positions or the variant has no memory.
    pub memory_loss: f64,
    pub total_loss: f64,
    /// Real sequence positions read from memory.
    pub memory_reads: usize,
}

struct Recorded {
    tape: Tape,
    total: NodeId,
    out: BatchOutput,
}

#[derive(Clone, Copy)]
enum Lookup {
    Train,
    Serve,
}

/// The CTR model `f(u, i, c, s)` with its optimizer state.
#[derive(Debug, Clone)]
pub struct CtrModel {
    config: ModelConfig,
    params: ParamSet,
    user_emb: ParamId,
    item_emb: ParamId,
    cross_emb: ParamId,
    tower: Mlp,
    memory: Option<MemoryBlock>,
    values: Option<MemoryServer>,
    optimizer: Adagrad,
    accum: Vec<Matrix>,
    lookups: LookupStats,
}

fn embedding_table(params: &mut ParamSet, name: &str, rows: usize, dim: usize, seed: u64) -> ParamId {
    let scale = 1.0 / (dim as f64).sqrt();
    let mut m = uniform(&mut param_rng(seed, name), rows, dim, scale);
    m.row_mut(PADDING_ID).iter_mut().for_each(|v| *v = 0.0);
    params.add(name, m)
}

impl CtrModel {
    pub fn new(config: ModelConfig, optimizer: Adagrad, shards: usize) -> Result<Self> {
        config.validate()?;
        let e = config.embed_dim;
        let seed = config.seed;
        let mut params = ParamSet::new();
        let user_emb = embedding_table(&mut params, "emb.user", config.vocab.users, e, seed);
        let item_emb = embedding_table(&mut params, "emb.item", config.vocab.items, e, seed);
        let cross_emb = embedding_table(&mut params, "emb.cross", config.vocab.cross, e, seed);
        let mut dims = vec![config.tower_input()];
        dims.extend(&config.tower);
        dims.push(1);
        let tower = Mlp::new(&mut params, "tower", &dims, seed)?;
        let (memory, values) = if config.variant == Variant::Lmn {
            let block = MemoryBlock::new(&mut params, &config.memory, seed)?;
            let server = MemoryServer::from_values(&init_values(&config.memory, seed), shards, &optimizer)?;
            (Some(block), Some(server))
        } else {
            (None, None)
        };
        let accum = params.iter().map(|(_, _, m)| optimizer.accumulator_like(m)).collect();
        Ok(CtrModel {
            config,
            params,
            user_emb,
            item_emb,
            cross_emb,
            tower,
            memory,
            values,
            optimizer,
            accum,
            lookups: LookupStats::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn memory_block(&self) -> Option<&MemoryBlock> {
        self.memory.as_ref()
    }

    pub fn memory_server(&self) -> Option<&MemoryServer> {
        self.values.as_ref()
    }

    pub fn memory_server_mut(&mut self) -> Option<&mut MemoryServer> {
        self.values.as_mut()
    }

    /// The full value table gathered from all shards.
    pub fn memory_values(&self) -> Option<MemoryValues> {
        self.values.as_ref().map(MemoryServer::to_values)
    }

    /// Message counts accumulated by training-time lookups.
    pub fn lookup_stats(&self) -> &LookupStats {
        &self.lookups
    }

    /// Re-partitions the value table over `shards` shards (optimizer state included).
    pub fn reshard(&mut self, shards: usize) -> Result<()> {
        if let Some(server) = &self.values {
            self.values = Some(server.reshard(shards)?);
        }
        Ok(())
    }

    fn embedding_rows(&self, table: ParamId, ids: &[usize]) -> Result<Matrix> {
        let t = self.params.get(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(LmnError::OutOfRange {
                    what: "embedding id",
                    index: id,
                    len: t.rows(),
                });
            }
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        Ok(out)
    }

    fn embed(&self, tape: &mut Tape, table: ParamId, ids: Vec<usize>) -> Result<NodeId> {
        let rows = self.embedding_rows(table, &ids)?;
        tape.gather(TableKey::Param(table), ids, rows, Some(PADDING_ID))
    }

    fn record(&self, batch: &[Sample], lookup: Lookup, stats: &mut LookupStats) -> Result<Recorded> {
        if batch.is_empty() {
            return Err(LmnError::contract("empty batch"));
        }
        for s in batch {
            s.validate()?;
        }
        let mut tape = Tape::new();
        let users = self.embed(&mut tape, self.user_emb, batch.iter().map(|s| s.user_id).collect())?;
        let items = self.embed(&mut tape, self.item_emb, batch.iter().map(|s| s.item_id).collect())?;
        let cross = self.embed(&mut tape, self.cross_emb, batch.iter().map(|s| s.cross_id).collect())?;
        let mut parts = vec![users, items, cross];

        // Only real positions enter the graph, so padding cannot influence anything.
        let mut seq_ids = Vec::new();
        let mut owner = Vec::new();
        let mut segments: Vec<Range<usize>> = Vec::with_capacity(batch.len());
        for (b, s) in batch.iter().enumerate() {
            let start = seq_ids.len();
            seq_ids.extend_from_slice(s.real_items());
            owner.extend(std::iter::repeat_n(b, s.mask_len));
            segments.push(start..seq_ids.len());
        }

        let mut memory_loss = None;
        let reads = seq_ids.len();
        if self.config.variant != Variant::Base {
            let seq = self.embed(&mut tape, self.item_emb, seq_ids)?;
            match self.config.variant {
                Variant::Pooling => parts.push(tape.segment_mean(seq, segments)?),
                Variant::TargetAttention => parts.push(tape.target_attention(seq, items, segments)?),
                Variant::Lmn => {
                    let pooled = tape.segment_mean(seq, segments.clone())?;
                    parts.push(pooled);
                    let s_mem = if reads == 0 {
                        tape.input(Matrix::zeros(batch.len(), self.config.embed_dim))
                    } else {
                        let block = self.memory.as_ref().expect("lmn variant has a memory block");
                        let server = self.values.as_ref().expect("lmn variant has a value server");
                        let seq_users = tape.select_rows(users, owner)?;
                        let read =
                            block.forward_tape(&self.params, &mut tape, seq, seq_users, |slots| match lookup {
                                Lookup::Train => {
                                    let (rows, st) = server.all2all_lookup(slots)?;
                                    stats.merge(&st);
                                    Ok(rows)
                                }
                                Lookup::Serve => server.serving_lookup(slots),
                            })?;
                        memory_loss =
                            Some(tape.smooth_l1_mean(read.read, read.query, self.config.memory.beta_smooth)?);
                        tape.segment_mean(read.read, segments)?
                    };
                    if self.config.memory_in_tower {
                        parts.push(s_mem);
                    }
                }
                Variant::Base => unreachable!(),
            }
        }

        let features = tape.concat(&parts)?;
        let logits = self.tower.forward(&self.params, &mut tape, features)?;
        let probs = tape.sigmoid(logits);
        let labels: Vec<f64> = batch.iter().map(|s| f64::from(s.label)).collect();
        let ctr = tape.bce(probs, labels)?;
        let alpha = self.config.alpha();
        let total = match memory_loss {
            Some(m) if alpha > 0.0 => {
                let weighted = tape.scale(m, alpha);
                tape.add(ctr, weighted)?
            }
            _ => ctr,
        };
        let scalar = |tape: &Tape, n: NodeId| tape.value(n).data()[0];
        let out = BatchOutput {
            probs: tape.value(probs).data().to_vec(),
            ctr_loss: scalar(&tape, ctr),
            memory_loss: memory_loss.map_or(0.0, |m| scalar(&tape, m)),
            total_loss: scalar(&tape, total),
            memory_reads: if self.config.variant == Variant::Lmn { reads } else { 0 },
        };
        Ok(Recorded { tape, total, out })
    }

    /// Forward pass through the serving lookup path; no state changes.
    pub fn forward(&self, batch: &[Sample]) -> Result<BatchOutput> {
        Ok(self.record(batch, Lookup::Serve, &mut LookupStats::default())?.out)
    }

    /// Click probabilities, evaluated in chunks of `batch_size` on the rayon
    /// pool. Chunks are independent, so the result does not depend on thread count.
    pub fn predict(&self, samples: &[Sample], batch_size: usize) -> Result<Vec<f64>> {
        let parts = samples
            .par_chunks(batch_size.max(1))
            .map(|chunk| self.forward(chunk).map(|o| o.probs))
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.concat())
    }

    /// Forward and backward over `batch`; only the lookup counters change.
    pub fn gradients(&mut self, batch: &[Sample]) -> Result<(BatchOutput, Gradients)> {
        let mut stats = LookupStats::default();
        let rec = self.record(batch, Lookup::Train, &mut stats)?;
        self.lookups.merge(&stats);
        let grads = rec.tape.backward(rec.total)?;
        Ok((rec.out, grads))
    }

    /// One optimizer step. Value-table rows are looked up before the update
    /// and updated after it, so every read within the step sees the same snapshot.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<BatchOutput> {
        let (out, grads) = self.gradients(batch)?;
        if !out.total_loss.is_finite() {
            return Err(LmnError::Diverged(format!(
                "loss is {} (ctr {}, memory {})",
                out.total_loss, out.ctr_loss, out.memory_loss
            )));
        }
        self.apply(&grads)?;
        Ok(out)
    }

    fn apply(&mut self, grads: &Gradients) -> Result<()> {
        // Validate everything before mutating anything.
        for (id, g) in &grads.dense {
            g.ensure_finite(self.params.name(*id))?;
        }
        for (key, rows) in &grads.sparse {
            for (row, g) in rows {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(LmnError::NonFinite(format!("gradient of {key:?} row {row}")));
                }
            }
        }
        for (id, g) in &grads.dense {
            self.optimizer
                .apply_dense(self.params.get_mut(*id), &mut self.accum[id.0], g)?;
        }
        for (key, rows) in &grads.sparse {
            match key {
                TableKey::Param(id) => {
                    let table = self.params.get_mut(*id);
                    let acc = &mut self.accum[id.0];
                    for (&row, g) in rows {
                        self.optimizer.apply_slice(table.row_mut(row), acc.row_mut(row), g);
                    }
                }
                &VALUES_TABLE => {
                    let server = self
                        .values
                        .as_mut()
                        .ok_or_else(|| LmnError::contract("value gradient without a value table"))?;
                    let batch = UpdateBatch::build(rows.iter().map(|(&s, g)| (s, g.as_slice())), server.layout())?;
                    server.all2all_apply(&batch, &self.optimizer)?;
                }
                TableKey::External(other) => {
                    return Err(LmnError::contract(format!("gradient for unknown table {other}")));
                }
            }
        }
        Ok(())
    }

    /// Gradient laid out like [`ParamBlocks`]: every parameter, then the value table.
    pub fn flat_gradients(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self
            .params
            .iter()
            .map(|(id, _, m)| {
                if let Some(g) = grads.dense(id) {
                    return g.data().to_vec();
                }
                let mut flat = vec![0.0; m.data().len()];
                if let Some(rows) = grads.sparse_rows(TableKey::Param(id)) {
                    for (&r, g) in rows {
                        flat[r * m.cols()..(r + 1) * m.cols()].copy_from_slice(g);
                    }
                }
                flat
            })
            .collect();
        if let Some(server) = &self.values {
            let d = server.dim();
            let mut flat = vec![0.0; server.layout().n() * d];
            if let Some(rows) = grads.sparse_rows(VALUES_TABLE) {
                for (&s, g) in rows {
                    flat[s * d..(s + 1) * d].copy_from_slice(g);
                }
            }
            out.push(flat);
        }
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new(CheckpointKind::Model);
        let mut int = |k: &str, v: u64| ck.ints.push((k.to_string(), v));
        int("variant", c.variant.code());
        int("embed_dim", c.embed_dim as u64);
        int("users", c.vocab.users as u64);
        int("items", c.vocab.items as u64);
        int("cross", c.vocab.cross as u64);
        int("seed", c.seed);
        int("memory_in_tower", u64::from(c.memory_in_tower));
        int("sqrt_n", c.memory.sqrt_n as u64);
        int("mem_d", c.memory.d as u64);
        int("k_top", c.memory.k_top as u64);
        int("heads", c.memory.heads as u64);
        int("merge_hidden", c.memory.merge_hidden as u64);
        int("tower_layers", c.tower.len() as u64);
        for (i, w) in c.tower.iter().enumerate() {
            int(&format!("tower{i}"), *w as u64);
        }
        ck.reals.push(("alpha".into(), c.memory.alpha));
        ck.reals.push(("beta_smooth".into(), c.memory.beta_smooth));
        ck.reals.push(("lr".into(), self.optimizer.lr));
        for (_, name, m) in self.params.iter() {
            ck.tables.push((name.to_string(), m.clone()));
        }
        if let Some(v) = self.memory_values() {
            ck.tables.push(("memory.values".into(), v.values));
        }
        ck
    }

    /// Rebuilds a model from a checkpoint. Optimizer accumulators start fresh.
    pub fn from_checkpoint(ck: &Checkpoint, shards: usize) -> Result<Self> {
        if ck.kind != CheckpointKind::Model {
            return Err(LmnError::Checkpoint("not a model checkpoint".into()));
        }
        let int = |k: &str| -> Result<usize> {
            usize::try_from(ck.int(k)?).map_err(|e| LmnError::Checkpoint(format!("{k}: {e}")))
        };
        let layers = int("tower_layers")?;
        let tower = (0..layers)
            .map(|i| int(&format!("tower{i}")))
            .collect::<Result<Vec<_>>>()?;
        let config = ModelConfig {
            variant: Variant::from_code(ck.int("variant")?)?,
            embed_dim: int("embed_dim")?,
            tower,
            memory: MemoryConfig {
                sqrt_n: int("sqrt_n")?,
                d: int("mem_d")?,
                k_top: int("k_top")?,
                heads: int("heads")?,
                alpha: ck.real("alpha")?,
                beta_smooth: ck.real("beta_smooth")?,
                merge_hidden: int("merge_hidden")?,
            },
            memory_in_tower: ck.int("memory_in_tower")? != 0,
            vocab: Vocab {
                users: int("users")?,
                items: int("items")?,
                cross: int("cross")?,
            },
            seed: ck.int("seed")?,
        };
        let mut model = CtrModel::new(config, Adagrad::new(ck.real("lr")?), shards)?;
        let ids: Vec<(ParamId, String)> = model.params.iter().map(|(id, n, _)| (id, n.to_string())).collect();
        for (id, name) in ids {
            model.params.set(id, ck.table(&name)?.clone())?;
        }
        if let Some(server) = model.values.as_mut() {
            let values = MemoryValues::new(ck.table("memory.values")?.clone());
            *server = MemoryServer::from_values(&values, shards, &model.optimizer)?;
        }
        let expected = model.params.len() + usize::from(model.values.is_some());
        if ck.tables.len() != expected {
            return Err(LmnError::Checkpoint(format!(
                "expected {expected} tables, found {}",
                ck.tables.len()
            )));
        }
        Ok(model)
    }
}

/// Blocks are the parameters in registration order followed by the value table.
impl ParamBlocks for CtrModel {
    fn block_count(&self) -> usize {
        self.params.len() + usize::from(self.values.is_some())
    }

    fn block_name(&self, block: usize) -> String {
        if block < self.params.len() {
            self.params.name(ParamId(block)).to_string()
        } else {
            "memory.values".to_string()
        }
    }

    fn block_len(&self, block: usize) -> usize {
        if block < self.params.len() {
            self.params.get(ParamId(block)).data().len()
        } else {
            self.values.as_ref().map_or(0, |s| s.layout().n() * s.dim())
        }
    }

    fn get(&self, block: usize, index: usize) -> f64 {
        if block < self.params.len() {
            return self.params.get(ParamId(block)).data()[index];
        }
        let server = self.values.as_ref().expect("value block exists");
        let d = server.dim();
        server.value(index / d).expect("slot in range")[index % d]
    }

    fn set(&mut self, block: usize, index: usize, value: f64) {
        if block < self.params.len() {
            self.params.get_mut(ParamId(block)).data_mut()[index] = value;
            return;
        }
        let server = self.values.as_mut().expect("value block exists");
        let d = server.dim();
        let mut row = server.value(index / d).expect("slot in range").to_vec();
        row[index % d] = value;
        server.set_value(index / d, &row).expect("slot in range");
    }
}
