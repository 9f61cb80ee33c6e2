//! Synthetic click logs with planted short- and long-term interests.
//!
//! Every user has a long-term cluster and a short-term cluster that drifts
//! from day to day. Day 0 impressions come mostly from the long-term cluster,
//! so the user's first clicks reveal it; later sequences are dominated by the
//! short-term cluster and the day-0 clicks scroll out of the recent window.
//! The click probability is
//!
//! ```text
//! σ(short·[c_i = cs(u, day)] + long·share_0(u, c_i) + pop_i + bias)
//! ```
//!
//! where `share_0(u, c)` is the fraction of the user's day-0 clicks that fall
//! in cluster `c`. With label noise ε each label is replaced by a fair coin
//! with probability 2ε, so ε = 0.5 makes labels independent of features.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sample::{save_csv, Sample, Vocab, PADDING_ID};
use crate::config::KeyValues;
use crate::error::{LmnError, Result};
use crate::numerics::fnv1a;
use crate::numerics::ops::sigmoid;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub days: u32,
    pub seq_len: usize,
    /// Impressions shown to each user per day.
    pub impressions_per_day: usize,
    /// Label noise ε in `[0, 0.5]`.
    pub noise: f64,
    pub seed: u64,
    pub cross_buckets: usize,
    pub short_weight: f64,
    pub long_weight: f64,
    pub popularity: f64,
    pub bias: f64,
    /// Probability that a user's short-term cluster is redrawn each day.
    pub drift: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            users: 2500,
            items: 2000,
            clusters: 48,
            days: 8,
            seq_len: 20,
            impressions_per_day: 4,
            noise: 0.0,
            seed: 1,
            cross_buckets: 1000,
            short_weight: 4.0,
            long_weight: 8.0,
            popularity: 0.5,
            bias: -6.5,
            drift: 0.3,
        }
    }
}

impl SyntheticSpec {
    /// ε = 0.5 is accepted as the degenerate pure-noise control.
    pub fn validate(&self) -> Result<()> {
        if self.clusters < 2 {
            return Err(LmnError::contract("at least two clusters are required"));
        }
        if self.items < self.clusters {
            return Err(LmnError::contract("need at least one item per cluster"));
        }
        if self.users == 0 || self.days == 0 || self.seq_len == 0 || self.impressions_per_day == 0 {
            return Err(LmnError::contract(
                "users, days, seq_len and impressions_per_day must be positive",
            ));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(LmnError::contract(format!(
                "noise must lie in [0, 0.5], got {}",
                self.noise
            )));
        }
        if !(0.0..=1.0).contains(&self.drift) {
            return Err(LmnError::contract(format!(
                "drift must lie in [0, 1], got {}",
                self.drift
            )));
        }
        if self.cross_buckets == 0 {
            return Err(LmnError::contract("cross_buckets must be positive"));
        }
        Ok(())
    }

    /// Number of trailing days held out for evaluation.
    pub fn eval_days(&self) -> u32 {
        self.days.div_ceil(4)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let d = SyntheticSpec::default();
        let spec = SyntheticSpec {
            users: kv.take_or("users", d.users)?,
            items: kv.take_or("items", d.items)?,
            clusters: kv.take_or("clusters", d.clusters)?,
            days: kv.take_or("days", d.days)?,
            seq_len: kv.take_or("seq_len", d.seq_len)?,
            impressions_per_day: kv.take_or("impressions_per_day", d.impressions_per_day)?,
            noise: kv.take_or("noise", d.noise)?,
            seed: kv.take_or("seed", d.seed)?,
            cross_buckets: kv.take_or("cross_buckets", d.cross_buckets)?,
            short_weight: kv.take_or("short_weight", d.short_weight)?,
            long_weight: kv.take_or("long_weight", d.long_weight)?,
            popularity: kv.take_or("popularity", d.popularity)?,
            bias: kv.take_or("bias", d.bias)?,
            drift: kv.take_or("drift", d.drift)?,
        };
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "users={}", self.users);
        let _ = writeln!(s, "items={}", self.items);
        let _ = writeln!(s, "clusters={}", self.clusters);
        let _ = writeln!(s, "days={}", self.days);
        let _ = writeln!(s, "seq_len={}", self.seq_len);
        let _ = writeln!(s, "impressions_per_day={}", self.impressions_per_day);
        let _ = writeln!(s, "noise={}", self.noise);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "cross_buckets={}", self.cross_buckets);
        let _ = writeln!(s, "short_weight={}", self.short_weight);
        let _ = writeln!(s, "long_weight={}", self.long_weight);
        let _ = writeln!(s, "popularity={}", self.popularity);
        let _ = writeln!(s, "bias={}", self.bias);
        let _ = writeln!(s, "drift={}", self.drift);
        s
    }
}

/// The hidden state behind a generated dataset.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub spec: SyntheticSpec,
    /// Indexed by item id; entry 0 is unused.
    pub item_cluster: Vec<usize>,
    pub item_pop: Vec<f64>,
    /// Indexed by user id; entry 0 is unused.
    pub long_cluster: Vec<usize>,
    /// `short_cluster[user][day]`.
    pub short_cluster: Vec<Vec<usize>>,
    /// Per user, the cluster shares of the day-0 clicks (all zero if none).
    pub long_share: Vec<Vec<f64>>,
}

impl SyntheticWorld {
    /// Noise-free click logit of showing `item` to `user` on `day`.
    pub fn logit(&self, user: usize, item: usize, day: u32) -> f64 {
        let s = &self.spec;
        let c = self.item_cluster[item];
        let short = if self.short_cluster[user][day as usize] == c {
            s.short_weight
        } else {
            0.0
        };
        let long = if day == 0 {
            if self.long_cluster[user] == c {
                s.long_weight
            } else {
                0.0
            }
        } else {
            s.long_weight * self.long_share[user][c]
        };
        short + long + self.item_pop[item] + s.bias
    }

    /// Probability of a click before label noise.
    pub fn click_probability(&self, sample: &Sample) -> f64 {
        sigmoid(self.logit(sample.user_id, sample.item_id, sample.day))
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub world: SyntheticWorld,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl SyntheticData {
    pub fn vocab(&self) -> Vocab {
        Vocab {
            users: self.world.spec.users + 1,
            items: self.world.spec.items + 1,
            cross: self.world.spec.cross_buckets + 1,
        }
    }
}

pub fn cross_id(user: usize, item: usize, buckets: usize) -> usize {
    let mut bytes = [0u8; 16];
    bytes[..8].copy_from_slice(&(user as u64).to_le_bytes());
    bytes[8..].copy_from_slice(&(item as u64).to_le_bytes());
    (fnv1a(&bytes) % buckets as u64) as usize + 1
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.clusters;

    // Balanced cluster assignment so every cluster has items.
    let mut item_cluster: Vec<usize> = (0..spec.items).map(|i| i % c).collect();
    item_cluster.shuffle(&mut rng);
    item_cluster.insert(0, usize::MAX);
    let mut item_pop: Vec<f64> = (0..spec.items)
        .map(|_| rng.gen_range(-1.0..=1.0) * spec.popularity)
        .collect();
    item_pop.insert(0, 0.0);
    let mut members = vec![Vec::new(); c];
    for (item, &cl) in item_cluster.iter().enumerate().skip(1) {
        members[cl].push(item);
    }

    let mut long_cluster = vec![usize::MAX];
    let mut short_cluster = vec![Vec::new()];
    for _ in 0..spec.users {
        let cl = rng.gen_range(0..c);
        long_cluster.push(cl);
        let mut cs = rng.gen_range(0..c);
        let mut per_day = Vec::with_capacity(spec.days as usize);
        for day in 0..spec.days {
            if day > 0 && rng.gen_bool(spec.drift) {
                cs = rng.gen_range(0..c);
            }
            per_day.push(cs);
        }
        short_cluster.push(per_day);
    }

    let mut world = SyntheticWorld {
        spec: spec.clone(),
        item_cluster,
        item_pop,
        long_cluster,
        short_cluster,
        long_share: vec![vec![0.0; c]; spec.users + 1],
    };

    // Clicks so far per user, oldest first.
    let mut history: Vec<Vec<usize>> = vec![Vec::new(); spec.users + 1];
    let eval_from = spec.days - spec.eval_days();
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for day in 0..spec.days {
        let mut todays_clicks: Vec<Vec<usize>> = vec![Vec::new(); spec.users + 1];
        for user in 1..=spec.users {
            let seq: Vec<usize> = history[user].iter().rev().take(spec.seq_len).copied().collect();
            let mask_len = seq.len();
            let mut padded = seq;
            padded.resize(spec.seq_len, PADDING_ID);
            for _ in 0..spec.impressions_per_day {
                let r: f64 = rng.gen();
                let item = if day == 0 {
                    if r < 0.7 {
                        *members[world.long_cluster[user]].choose(&mut rng).expect("non-empty")
                    } else {
                        rng.gen_range(1..=spec.items)
                    }
                } else if r < 0.35 {
                    *members[world.short_cluster[user][day as usize]]
                        .choose(&mut rng)
                        .expect("non-empty")
                } else if r < 0.7 {
                    *members[world.long_cluster[user]].choose(&mut rng).expect("non-empty")
                } else {
                    rng.gen_range(1..=spec.items)
                };
                let p = sigmoid(world.logit(user, item, day));
                let clicked = rng.gen_bool(p);
                let label = if spec.noise > 0.0 && rng.gen_bool(2.0 * spec.noise) {
                    rng.gen_bool(0.5)
                } else {
                    clicked
                };
                if label {
                    todays_clicks[user].push(item);
                }
                let sample = Sample {
                    user_id: user,
                    item_id: item,
                    cross_id: cross_id(user, item, spec.cross_buckets),
                    seq: padded.clone(),
                    mask_len,
                    label: u8::from(label),
                    day,
                };
                if day >= eval_from {
                    eval.push(sample);
                } else {
                    train.push(sample);
                }
            }
        }
        if day == 0 {
            for (user, clicks) in todays_clicks.iter().enumerate().skip(1) {
                if clicks.is_empty() {
                    continue;
                }
                let share = &mut world.long_share[user];
                for &item in clicks {
                    share[world.item_cluster[item]] += 1.0;
                }
                let total = clicks.len() as f64;
                share.iter_mut().for_each(|v| *v /= total);
            }
        }
        for (user, clicks) in todays_clicks.into_iter().enumerate() {
            history[user].extend(clicks);
        }
    }
    Ok(SyntheticData { world, train, eval })
}

/// Writes `train.csv`, `eval.csv`, `meta.txt` and `spec.txt` into `dir`.
pub fn write_dataset(data: &SyntheticData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_csv(&dir.join("train.csv"), &data.train)?;
    save_csv(&dir.join("eval.csv"), &data.eval)?;
    let v = data.vocab();
    let meta = format!(
        "users={}\nitems={}\ncross={}\nseq_len={}\ntrain_samples={}\neval_samples={}\n",
        v.users,
        v.items,
        v.cross,
        data.world.spec.seq_len,
        data.train.len(),
        data.eval.len()
    );
    fs::write(dir.join("meta.txt"), meta)?;
    fs::write(dir.join("spec.txt"), data.world.spec.to_key_values())?;
    Ok(())
}

/// Reads the vocabulary sizes written by [`write_dataset`].
pub fn read_meta(dir: &Path) -> Result<Vocab> {
    let mut kv = KeyValues::parse(&fs::read_to_string(dir.join("meta.txt"))?)?;
    let missing = |k: &str| LmnError::Parse(format!("meta.txt: missing {k}"));
    let v = Vocab {
        users: kv.take("users")?.ok_or_else(|| missing("users"))?,
        items: kv.take("items")?.ok_or_else(|| missing("items"))?,
        cross: kv.take("cross")?.ok_or_else(|| missing("cross"))?,
    };
    let _: Option<usize> = kv.take("seq_len")?;
    let _: Option<usize> = kv.take("train_samples")?;
    let _: Option<usize> = kv.take("eval_samples")?;
    kv.finish()?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::metrics::auc;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            users: 300,
            items: 200,
            clusters: 4,
            days: 8,
            seq_len: 6,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn split_and_shapes() {
        let data = generate(&small()).unwrap();
        assert_eq!(data.train.len(), 300 * 4 * 6);
        assert_eq!(data.eval.len(), 300 * 4 * 2);
        assert!(data.train.iter().all(|s| s.day < 6));
        assert!(data.eval.iter().all(|s| s.day >= 6));
        for s in data.train.iter().chain(&data.eval) {
            s.validate().unwrap();
            assert_eq!(s.seq.len(), 6);
            assert!(s.cross_id >= 1 && s.cross_id <= 1000);
        }
        // day 0 has no history
        assert!(data.train.iter().filter(|s| s.day == 0).all(|s| s.mask_len == 0));
    }

    #[test]
    fn sequences_are_day_causal() {
        let data = generate(&small()).unwrap();
        let mut clicked_on = std::collections::HashMap::<(usize, usize), Vec<u32>>::new();
        for s in data.train.iter().chain(&data.eval) {
            if s.label == 1 {
                clicked_on.entry((s.user_id, s.item_id)).or_default().push(s.day);
            }
        }
        for s in data.train.iter().chain(&data.eval) {
            for &item in s.real_items() {
                let days = &clicked_on[&(s.user_id, item)];
                assert!(
                    days.iter().any(|&d| d < s.day),
                    "item {item} not clicked before day {}",
                    s.day
                );
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval, b.eval);
        let c = generate(&SyntheticSpec { seed: 2, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn oracle_separates_two_disjoint_clusters() {
        let spec = SyntheticSpec { clusters: 2, ..small() };
        let data = generate(&spec).unwrap();
        let labels: Vec<f64> = data.eval.iter().map(|s| f64::from(s.label)).collect();
        let scores: Vec<f64> = data.eval.iter().map(|s| data.world.click_probability(s)).collect();
        let a = auc(&labels, &scores).unwrap();
        assert!(a > 0.9, "oracle AUC {a}");
    }

    #[test]
    fn pure_noise_hides_the_oracle() {
        let spec = SyntheticSpec {
            noise: 0.5,
            users: 1000,
            ..small()
        };
        let data = generate(&spec).unwrap();
        let labels: Vec<f64> = data.eval.iter().map(|s| f64::from(s.label)).collect();
        let scores: Vec<f64> = data.eval.iter().map(|s| data.world.click_probability(s)).collect();
        let a = auc(&labels, &scores).unwrap();
        assert!((a - 0.5).abs() < 0.03, "oracle AUC {a}");
    }

    #[test]
    fn spec_round_trips_through_text() {
        let spec = SyntheticSpec {
            noise: 0.25,
            seed: 9,
            ..small()
        };
        assert_eq!(SyntheticSpec::parse(&spec.to_key_values()).unwrap(), spec);
        assert!(SyntheticSpec::parse("users=10\nbogus=1\n").is_err());
        assert!(SyntheticSpec::parse("clusters=1\n").is_err());
        assert!(SyntheticSpec::parse("noise=0.7\n").is_err());
    }
}
