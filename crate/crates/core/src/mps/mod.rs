//! In-process simulation of the memory parameter server.
//!
//! The value table is split across `S` shards by `slot mod S`. A lookup is a
//! two-phase exchange: requests are scattered to the owning shards
//! (deduplicated and sorted per shard), then replies are gathered back into
//! request order. Gradient updates are pre-aggregated per slot, routed to the
//! owning shard and applied there. Shards run in ascending id order and every
//! shard processes its slots in ascending order, so results do not depend on
//! `S`. Lookups within a step see the table as of the last completed apply.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{LmnError, Result};
use crate::memory::{Checkpoint, CheckpointKind, MemoryValues};
use crate::numerics::{axpy, Matrix};
use crate::optim::Adagrad;

/// Owning shard of `slot` among `shards` shards.
pub fn shard_assign(slot: usize, n: usize, shards: usize) -> Result<usize> {
    if shards == 0 {
        return Err(LmnError::contract("shard count must be at least 1"));
    }
    if slot >= n {
        return Err(LmnError::OutOfRange {
            what: "memory slot",
            index: slot,
            len: n,
        });
    }
    Ok(slot % shards)
}

/// Slot → shard assignment and the per-shard local index map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardLayout {
    shards: usize,
    n: usize,
}

impl ShardLayout {
    pub const RULE: &'static str = "mod";

    pub fn new(shards: usize, n: usize) -> Result<Self> {
        if shards == 0 || n == 0 {
            return Err(LmnError::contract(format!(
                "layout needs shards >= 1 and n >= 1, got S={shards} n={n}"
            )));
        }
        Ok(ShardLayout { shards, n })
    }

    pub fn shards(&self) -> usize {
        self.shards
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn shard_of(&self, slot: usize) -> Result<usize> {
        shard_assign(slot, self.n, self.shards)
    }

    pub fn local_index(&self, slot: usize) -> usize {
        slot / self.shards
    }

    pub fn global_slot(&self, shard: usize, local: usize) -> usize {
        local * self.shards + shard
    }

    /// Number of slots owned by `shard`.
    pub fn shard_len(&self, shard: usize) -> usize {
        if shard >= self.n {
            0
        } else {
            (self.n - shard).div_ceil(self.shards)
        }
    }

    /// Slots owned by `shard`, ascending.
    pub fn slots_of(&self, shard: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.shard_len(shard)).map(move |l| self.global_slot(shard, l))
    }

    /// Text manifest: `shards`, `rule` and `n`, one `key=value` per line.
    pub fn manifest(&self) -> String {
        format!("shards={}\nrule={}\nn={}\n", self.shards, Self::RULE, self.n)
    }

    pub fn parse_manifest(text: &str) -> Result<Self> {
        let kv = crate::config::parse_key_values(text)?;
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| LmnError::Parse(format!("layout manifest missing {k}")))
        };
        if get("rule")? != Self::RULE {
            return Err(LmnError::Parse(format!("unsupported shard rule {}", get("rule")?)));
        }
        let num =
            |k: &str| -> Result<usize> { get(k)?.parse().map_err(|e| LmnError::Parse(format!("layout {k}: {e}"))) };
        ShardLayout::new(num("shards")?, num("n")?)
    }
}

/// Scatter phase of a lookup: which shard serves which request position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupPlan {
    /// Per shard: distinct requested slots, ascending.
    pub requests: Vec<Vec<usize>>,
    /// Per original request position: `(shard, position in that shard's request list)`.
    pub routes: Vec<(usize, usize)>,
}

impl LookupPlan {
    pub fn build(slots: &[usize], layout: &ShardLayout) -> Result<Self> {
        let mut per_shard: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); layout.shards()];
        for &s in slots {
            per_shard[layout.shard_of(s)?].insert(s, 0);
        }
        let requests: Vec<Vec<usize>> = per_shard
            .iter_mut()
            .map(|m| {
                for (pos, v) in m.values_mut().enumerate() {
                    *v = pos;
                }
                m.keys().copied().collect()
            })
            .collect();
        let routes = slots
            .iter()
            .map(|&s| {
                let shard = s % layout.shards();
                (shard, per_shard[shard][&s])
            })
            .collect();
        Ok(LookupPlan { requests, routes })
    }

    pub fn distinct(&self) -> usize {
        self.requests.iter().map(Vec::len).sum()
    }
}

/// Message accounting of one exchange.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LookupStats {
    /// Rows requested by the caller, duplicates included.
    pub requested: usize,
    /// Rows actually fetched from shards.
    pub fetched: usize,
    pub per_shard: Vec<usize>,
}

impl LookupStats {
    pub fn merge(&mut self, other: &LookupStats) {
        self.requested += other.requested;
        self.fetched += other.fetched;
        if self.per_shard.len() < other.per_shard.len() {
            self.per_shard.resize(other.per_shard.len(), 0);
        }
        for (a, b) in self.per_shard.iter_mut().zip(&other.per_shard) {
            *a += b;
        }
    }
}

/// Per-shard gradient lists with duplicate slots already summed.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateBatch {
    /// Per shard: `(slot, gradient)` ascending by slot.
    pub per_shard: Vec<Vec<(usize, Vec<f64>)>>,
}

impl UpdateBatch {
    /// Sums gradients per slot (in iteration order) and routes them to shards.
    pub fn build<'a, I>(grads: I, layout: &ShardLayout) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, &'a [f64])>,
    {
        let mut summed: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (slot, g) in grads {
            layout.shard_of(slot)?;
            match summed.get_mut(&slot) {
                Some(acc) => {
                    if acc.len() != g.len() {
                        return Err(LmnError::shape("UpdateBatch", acc.len(), g.len()));
                    }
                    axpy(1.0, g, acc);
                }
                None => {
                    summed.insert(slot, g.to_vec());
                }
            }
        }
        let mut per_shard = vec![Vec::new(); layout.shards()];
        for (slot, g) in summed {
            per_shard[slot % layout.shards()].push((slot, g));
        }
        Ok(UpdateBatch { per_shard })
    }

    pub fn len(&self) -> usize {
        self.per_shard.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Local rows of one shard and their optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub id: usize,
    pub values: Matrix,
    pub accum: Matrix,
}

impl Shard {
    fn local_row(&self, layout: &ShardLayout, slot: usize) -> Result<usize> {
        let local = layout.local_index(slot);
        if slot % layout.shards() != self.id || local >= self.values.rows() {
            return Err(LmnError::Corruption(format!(
                "shard {} has no row for slot {slot}",
                self.id
            )));
        }
        Ok(local)
    }
}

/// The sharded value table.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryServer {
    layout: ShardLayout,
    d: usize,
    shards: Vec<Shard>,
}

impl MemoryServer {
    pub fn from_values(values: &MemoryValues, shards: usize, optimizer: &Adagrad) -> Result<Self> {
        let n = values.slots();
        let d = values.values.cols();
        let layout = ShardLayout::new(shards, n)?;
        let shards = (0..shards)
            .map(|s| {
                let mut m = Matrix::zeros(layout.shard_len(s), d);
                for (local, slot) in layout.slots_of(s).enumerate() {
                    m.row_mut(local).copy_from_slice(values.values.row(slot));
                }
                Shard {
                    id: s,
                    accum: optimizer.accumulator_like(&m),
                    values: m,
                }
            })
            .collect();
        Ok(MemoryServer { layout, d, shards })
    }

    pub fn layout(&self) -> &ShardLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn shards(&self) -> &[Shard] {
        &self.shards
    }

    /// Reassembles the full `n × d` table in slot order.
    pub fn to_values(&self) -> MemoryValues {
        let mut m = Matrix::zeros(self.layout.n(), self.d);
        for shard in &self.shards {
            for (local, slot) in self.layout.slots_of(shard.id).enumerate() {
                m.row_mut(slot).copy_from_slice(shard.values.row(local));
            }
        }
        MemoryValues::new(m)
    }

    /// Same table and optimizer state spread over `shards` shards.
    pub fn reshard(&self, shards: usize) -> Result<Self> {
        let layout = ShardLayout::new(shards, self.layout.n())?;
        let mut out = Vec::with_capacity(shards);
        for s in 0..shards {
            let mut values = Matrix::zeros(layout.shard_len(s), self.d);
            let mut accum = Matrix::zeros(layout.shard_len(s), self.d);
            for (local, slot) in layout.slots_of(s).enumerate() {
                let src = &self.shards[self.layout.shard_of(slot)?];
                let src_local = src.local_row(&self.layout, slot)?;
                values.row_mut(local).copy_from_slice(src.values.row(src_local));
                accum.row_mut(local).copy_from_slice(src.accum.row(src_local));
            }
            out.push(Shard { id: s, values, accum });
        }
        Ok(MemoryServer {
            layout,
            d: self.d,
            shards: out,
        })
    }

    pub fn value(&self, slot: usize) -> Result<&[f64]> {
        let shard = &self.shards[self.layout.shard_of(slot)?];
        Ok(shard.values.row(shard.local_row(&self.layout, slot)?))
    }

    pub fn set_value(&mut self, slot: usize, row: &[f64]) -> Result<()> {
        if row.len() != self.d {
            return Err(LmnError::shape("set_value", self.d, row.len()));
        }
        let s = self.layout.shard_of(slot)?;
        let local = self.shards[s].local_row(&self.layout, slot)?;
        self.shards[s].values.row_mut(local).copy_from_slice(row);
        Ok(())
    }

    /// Scatter requests to shards, serve each distinct slot once, gather
    /// replies back into request order.
    pub fn all2all_lookup(&self, slots: &[usize]) -> Result<(Matrix, LookupStats)> {
        let plan = LookupPlan::build(slots, &self.layout)?;
        // serve phase: one reply buffer per shard
        let mut replies = Vec::with_capacity(self.shards.len());
        for (shard, req) in self.shards.iter().zip(&plan.requests) {
            let mut buf = Matrix::zeros(req.len(), self.d);
            for (i, &slot) in req.iter().enumerate() {
                let local = shard.local_row(&self.layout, slot)?;
                buf.row_mut(i).copy_from_slice(shard.values.row(local));
            }
            replies.push(buf);
        }
        // gather phase
        let mut out = Matrix::zeros(slots.len(), self.d);
        for (r, &(shard, pos)) in plan.routes.iter().enumerate() {
            let reply = replies
                .get(shard)
                .filter(|b| pos < b.rows())
                .ok_or_else(|| LmnError::Corruption(format!("no reply for request {r}")))?;
            out.row_mut(r).copy_from_slice(reply.row(pos));
        }
        let stats = LookupStats {
            requested: slots.len(),
            fetched: plan.distinct(),
            per_shard: plan.requests.iter().map(Vec::len).collect(),
        };
        Ok((out, stats))
    }

    /// Inference-time lookup. Takes `&self`, so optimizer state cannot change.
    pub fn serving_lookup(&self, slots: &[usize]) -> Result<Matrix> {
        self.all2all_lookup(slots).map(|(m, _)| m)
    }

    /// Applies pre-aggregated gradients on their owning shards. The whole batch
    /// is validated before any row changes.
    pub fn all2all_apply(&mut self, updates: &UpdateBatch, optimizer: &Adagrad) -> Result<()> {
        if updates.per_shard.len() != self.shards.len() {
            return Err(LmnError::shape(
                "all2all_apply",
                self.shards.len(),
                updates.per_shard.len(),
            ));
        }
        for (shard, list) in self.shards.iter().zip(&updates.per_shard) {
            for (slot, g) in list {
                if g.len() != self.d {
                    return Err(LmnError::shape("all2all_apply gradient", self.d, g.len()));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(LmnError::NonFinite(format!("gradient for memory slot {slot}")));
                }
                shard.local_row(&self.layout, *slot)?;
            }
        }
        for (shard, list) in self.shards.iter_mut().zip(&updates.per_shard) {
            for (slot, g) in list {
                let local = self.layout.local_index(*slot);
                let cols = self.d;
                let p = &mut shard.values.data_mut()[local * cols..(local + 1) * cols];
                let a = &mut shard.accum.data_mut()[local * cols..(local + 1) * cols];
                optimizer.apply_slice(p, a, g);
            }
        }
        Ok(())
    }

    /// Writes `shard_<k>.lmn` per shard plus `layout.txt` into `dir`.
    pub fn dump(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for shard in &self.shards {
            let mut ck = Checkpoint::new(CheckpointKind::Shard);
            ck.ints.push(("shard".into(), shard.id as u64));
            ck.ints.push(("shards".into(), self.layout.shards() as u64));
            ck.ints.push(("n".into(), self.layout.n() as u64));
            ck.ints.push(("d".into(), self.d as u64));
            ck.tables.push(("values".into(), shard.values.clone()));
            ck.tables.push(("accumulator".into(), shard.accum.clone()));
            let path = dir.join(format!("shard_{}.lmn", shard.id));
            ck.save(&path)?;
            written.push(path);
        }
        let manifest = dir.join("layout.txt");
        write_atomic(&manifest, self.layout.manifest().as_bytes())?;
        written.push(manifest);
        Ok(written)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let layout = ShardLayout::parse_manifest(&fs::read_to_string(dir.join("layout.txt"))?)?;
        let mut shards = Vec::with_capacity(layout.shards());
        let mut d = None;
        for s in 0..layout.shards() {
            let ck = Checkpoint::load(&dir.join(format!("shard_{s}.lmn")))?;
            if ck.kind != CheckpointKind::Shard || ck.int("shard")? != s as u64 || ck.int("n")? != layout.n() as u64 {
                return Err(LmnError::Corruption(format!("shard file {s} does not match layout")));
            }
            let values = ck.table("values")?.clone();
            let accum = ck.table("accumulator")?.clone();
            if values.rows() != layout.shard_len(s) || accum.shape() != values.shape() {
                return Err(LmnError::Corruption(format!("shard {s} has wrong row count")));
            }
            d = Some(values.cols());
            shards.push(Shard { id: s, values, accum });
        }
        Ok(MemoryServer {
            layout,
            d: d.unwrap_or(0),
            shards,
        })
    }

    /// Human-readable per-shard row counts.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        for shard in &self.shards {
            let _ = writeln!(s, "shard {}: {} rows", shard.id, shard.values.rows());
        }
        s
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(n: usize, d: usize, seed: u64) -> MemoryValues {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MemoryValues::new(crate::numerics::uniform(&mut rng, n, d, 1.0))
    }

    #[test]
    fn assignment_rule() {
        assert_eq!(shard_assign(7, 16, 4).unwrap(), 3);
        assert!((0..16).all(|s| shard_assign(s, 16, 1).unwrap() == 0));
        let alt: Vec<usize> = (0..8).map(|s| shard_assign(s, 8, 2).unwrap()).collect();
        assert_eq!(alt, vec![0, 1, 0, 1, 0, 1, 0, 1]);
        assert!(shard_assign(16, 16, 4).is_err());
        assert!(shard_assign(0, 16, 0).is_err());
    }

    #[test]
    fn layout_partitions_slots() {
        for (s, n) in [(1, 5), (2, 5), (4, 16), (8, 5), (3, 10)] {
            let l = ShardLayout::new(s, n).unwrap();
            let mut all: Vec<usize> = (0..s).flat_map(|k| l.slots_of(k).collect::<Vec<_>>()).collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            for slot in 0..n {
                let k = l.shard_of(slot).unwrap();
                assert_eq!(l.global_slot(k, l.local_index(slot)), slot);
            }
            assert_eq!(ShardLayout::parse_manifest(&l.manifest()).unwrap(), l);
        }
    }

    #[test]
    fn single_shard_lookup_is_direct_indexing() {
        let v = table(9, 3, 1);
        let srv = MemoryServer::from_values(&v, 1, &Adagrad::default()).unwrap();
        let ids = [4, 0, 8, 4];
        assert_eq!(srv.serving_lookup(&ids).unwrap(), v.gather(&ids).unwrap());
    }

    #[test]
    fn duplicate_requests_fetch_once() {
        let v = table(9, 2, 2);
        let srv = MemoryServer::from_values(&v, 4, &Adagrad::default()).unwrap();
        let (rows, stats) = srv.all2all_lookup(&[5, 5, 2]).unwrap();
        assert_eq!(rows.row(0), v.values.row(5));
        assert_eq!(rows.row(1), v.values.row(5));
        assert_eq!(rows.row(2), v.values.row(2));
        assert_eq!(stats.fetched, 2);
        assert_eq!(stats.requested, 3);
        assert_eq!(stats.per_shard, vec![0, 1, 1, 0]);
    }

    #[test]
    fn corrupt_shard_is_detected() {
        let v = table(8, 2, 3);
        let mut srv = MemoryServer::from_values(&v, 2, &Adagrad::default()).unwrap();
        srv.shards[1].values = Matrix::zeros(1, 2);
        assert!(matches!(srv.all2all_lookup(&[7]), Err(LmnError::Corruption(_))));
    }

    #[test]
    fn zero_and_cancelling_updates_leave_table_unchanged() {
        let v = table(16, 3, 4);
        let opt = Adagrad::default();
        let mut srv = MemoryServer::from_values(&v, 4, &opt).unwrap();
        let zero = [0.0; 3];
        let batch = UpdateBatch::build([(3, &zero[..]), (9, &zero[..])], srv.layout()).unwrap();
        srv.all2all_apply(&batch, &opt).unwrap();
        assert_eq!(srv.to_values(), v);
        let (g, ng) = ([0.5, -1.0, 2.0], [-0.5, 1.0, -2.0]);
        let batch = UpdateBatch::build([(6, &g[..]), (6, &ng[..])], srv.layout()).unwrap();
        assert_eq!(batch.len(), 1);
        srv.all2all_apply(&batch, &opt).unwrap();
        assert_eq!(srv.to_values(), v);
    }

    #[test]
    fn nan_gradient_aborts_before_any_write() {
        let v = table(8, 2, 5);
        let opt = Adagrad::default();
        let mut srv = MemoryServer::from_values(&v, 2, &opt).unwrap();
        let (ok, bad) = ([1.0, 1.0], [f64::NAN, 0.0]);
        let batch = UpdateBatch::build([(0, &ok[..]), (5, &bad[..])], srv.layout()).unwrap();
        let err = srv.all2all_apply(&batch, &opt).unwrap_err();
        assert!(err.to_string().contains("slot 5"), "{err}");
        assert_eq!(srv.to_values(), v);
    }

    #[test]
    fn dump_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = table(10, 3, 6);
        let srv = MemoryServer::from_values(&v, 3, &Adagrad::default()).unwrap();
        let files = srv.dump(dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let manifest = fs::read_to_string(dir.path().join("layout.txt")).unwrap();
        assert_eq!(manifest, "shards=3\nrule=mod\nn=10\n");
        assert_eq!(MemoryServer::load(dir.path()).unwrap(), srv);
    }

    proptest! {
        #[test]
        fn sharded_lookup_equals_single_shard(
            ids in proptest::collection::vec(0usize..64, 0..64),
            shards in prop_oneof![Just(1usize), Just(2), Just(4), Just(8)],
        ) {
            let v = table(64, 4, 7);
            let srv = MemoryServer::from_values(&v, shards, &Adagrad::default()).unwrap();
            let (rows, stats) = srv.all2all_lookup(&ids).unwrap();
            prop_assert_eq!(rows, v.gather(&ids).unwrap());
            let mut distinct = ids.clone();
            distinct.sort_unstable();
            distinct.dedup();
            prop_assert_eq!(stats.fetched, distinct.len());
            let plan = LookupPlan::build(&ids, srv.layout()).unwrap();
            for (k, req) in plan.requests.iter().enumerate() {
                prop_assert!(req.iter().all(|s| s % shards == k));
                prop_assert!(req.windows(2).all(|w| w[0] < w[1]));
            }
        }

        #[test]
        fn sharded_apply_is_bit_identical(
            updates in proptest::collection::vec((0usize..32, proptest::collection::vec(-2.0f64..2.0, 3)), 0..40),
            shards in prop_oneof![Just(2usize), Just(4), Just(8)],
            steps in 1usize..4,
        ) {
            let v = table(32, 3, 8);
            let opt = Adagrad::new(0.05);
            let mut single = MemoryServer::from_values(&v, 1, &opt).unwrap();
            let mut multi = MemoryServer::from_values(&v, shards, &opt).unwrap();
            for _ in 0..steps {
                let b1 = UpdateBatch::build(updates.iter().map(|(s, g)| (*s, g.as_slice())), single.layout()).unwrap();
                let b2 = UpdateBatch::build(updates.iter().map(|(s, g)| (*s, g.as_slice())), multi.layout()).unwrap();
                single.all2all_apply(&b1, &opt).unwrap();
                multi.all2all_apply(&b2, &opt).unwrap();
            }
            let a = single.to_values().values;
            let b = multi.to_values().values;
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
