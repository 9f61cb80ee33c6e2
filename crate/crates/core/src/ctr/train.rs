use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{CtrModel, ModelConfig, Variant};
use crate::config::KeyValues;
use crate::data::{MetricsReport, Sample, Vocab};
use crate::error::{LmnError, Result};
use crate::memory::MemoryConfig;
use crate::numerics::fnv1a;
use crate::optim::Adagrad;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    /// Value-table shards; results do not depend on it.
    pub shards: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            batch_size: 128,
            epochs: 1,
            max_steps: None,
            shards: 1,
        }
    }
}

/// Everything a training run needs except the data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub embed_dim: usize,
    pub tower: Vec<usize>,
    pub memory: MemoryConfig,
    pub memory_in_tower: bool,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::Lmn,
            embed_dim: 32,
            tower: vec![256, 128],
            memory: MemoryConfig::default(),
            memory_in_tower: true,
            seed: 0,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn model_config(&self, vocab: Vocab) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            embed_dim: self.embed_dim,
            tower: self.tower.clone(),
            memory: MemoryConfig {
                d: self.embed_dim,
                ..self.memory.clone()
            },
            memory_in_tower: self.memory_in_tower,
            vocab,
            seed: self.seed,
        }
    }

    /// Parses a `key=value` file; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let d = RunConfig::default();
        let embed_dim = kv.take_or("embed_dim", d.embed_dim)?;
        let optimizer: String = kv.take_or("optimizer", "adagrad".to_string())?;
        if optimizer != "adagrad" {
            return Err(LmnError::Parse(format!("unsupported optimizer {optimizer:?}")));
        }
        let cfg = RunConfig {
            variant: kv.take_or("variant", d.variant)?,
            embed_dim,
            tower: kv.take_list("tower")?.unwrap_or(d.tower),
            memory: MemoryConfig {
                sqrt_n: kv.take_or("sqrt_n", d.memory.sqrt_n)?,
                d: embed_dim,
                k_top: kv.take_or("k_top", d.memory.k_top)?,
                heads: kv.take_or("heads", d.memory.heads)?,
                alpha: kv.take_or("alpha", d.memory.alpha)?,
                beta_smooth: kv.take_or("beta_smooth", d.memory.beta_smooth)?,
                merge_hidden: kv.take_or("merge_hidden", d.memory.merge_hidden)?,
            },
            memory_in_tower: kv.take_or("memory_in_tower", d.memory_in_tower)?,
            seed: kv.take_or("seed", d.seed)?,
            train: TrainConfig {
                lr: kv.take_or("lr", d.train.lr)?,
                batch_size: kv.take_or("batch_size", d.train.batch_size)?,
                epochs: kv.take_or("epochs", d.train.epochs)?,
                max_steps: kv.take("max_steps")?,
                shards: kv.take_or("shards", d.train.shards)?,
            },
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.lr > 0.0) || !t.lr.is_finite() {
            return Err(LmnError::contract(format!("lr must be positive, got {}", t.lr)));
        }
        if t.batch_size == 0 || t.epochs == 0 || t.shards == 0 {
            return Err(LmnError::contract("batch_size, epochs and shards must be positive"));
        }
        if self.variant == Variant::Lmn {
            self.memory.validate()?;
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let tower = self.tower.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let m = &self.memory;
        let t = &self.train;
        let _ = writeln!(s, "variant={}", self.variant);
        let _ = writeln!(s, "embed_dim={}", self.embed_dim);
        let _ = writeln!(s, "tower={tower}");
        let _ = writeln!(s, "sqrt_n={}", m.sqrt_n);
        let _ = writeln!(s, "k_top={}", m.k_top);
        let _ = writeln!(s, "heads={}", m.heads);
        let _ = writeln!(s, "alpha={}", m.alpha);
        let _ = writeln!(s, "beta_smooth={}", m.beta_smooth);
        let _ = writeln!(s, "merge_hidden={}", m.merge_hidden);
        let _ = writeln!(s, "memory_in_tower={}", self.memory_in_tower);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "optimizer=adagrad");
        let _ = writeln!(s, "lr={}", t.lr);
        let _ = writeln!(s, "batch_size={}", t.batch_size);
        let _ = writeln!(s, "epochs={}", t.epochs);
        if let Some(ms) = t.max_steps {
            let _ = writeln!(s, "max_steps={ms}");
        }
        let _ = writeln!(s, "shards={}", t.shards);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    /// Sample-weighted mean of the batch CTR losses seen during the epoch.
    pub train_logloss: f64,
    pub train_memory_loss: f64,
    /// `None` when the eval split is empty or single-class.
    pub eval: Option<MetricsReport>,
}

impl EpochReport {
    pub const CSV_HEADER: &'static str =
        "epoch,steps,train_logloss,train_memory_loss,auc,auc_imp_pct,logloss,logloss_imp_pct,samples";

    pub fn csv_row(&self) -> String {
        let eval = self.eval.as_ref().map_or(",,,,".to_string(), MetricsReport::csv_row);
        format!(
            "{},{},{:.6},{:.6},{}",
            self.epoch, self.steps, self.train_logloss, self.train_memory_loss, eval
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CtrModel,
    pub epochs: Vec<EpochReport>,
    pub steps: usize,
}

/// Metrics of `model` on `samples`.
pub fn evaluate(model: &CtrModel, samples: &[Sample], batch_size: usize) -> Result<MetricsReport> {
    let scores = model.predict(samples, batch_size)?;
    let labels: Vec<f64> = samples.iter().map(|s| f64::from(s.label)).collect();
    MetricsReport::compute(&labels, &scores)
}

fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ fnv1a(b"shuffle") ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Trains from scratch. Deterministic given the config: initialization is
/// keyed by parameter name and seed, and each epoch's shuffle by seed and epoch.
pub fn train(cfg: &RunConfig, train_set: &[Sample], eval_set: &[Sample], vocab: Vocab) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(LmnError::contract("empty training set"));
    }
    let needed = Vocab::covering(train_set.iter().chain(eval_set));
    if needed.users > vocab.users || needed.items > vocab.items || needed.cross > vocab.cross {
        return Err(LmnError::contract(format!(
            "data ids exceed vocabulary {vocab:?} (need {needed:?})"
        )));
    }
    let t = &cfg.train;
    let mut model = CtrModel::new(cfg.model_config(vocab), Adagrad::new(t.lr), t.shards)?;
    let mut epochs = Vec::with_capacity(t.epochs);
    let mut steps = 0;
    let mut batch = Vec::with_capacity(t.batch_size);
    'outer: for epoch in 0..t.epochs {
        let (mut ctr_sum, mut mem_sum, mut seen) = (0.0, 0.0, 0usize);
        for chunk in epoch_order(train_set.len(), cfg.seed, epoch).chunks(t.batch_size) {
            if t.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i].clone()));
            let out = model.train_step(&batch).map_err(|e| match e {
                LmnError::Diverged(msg) => LmnError::Diverged(format!("epoch {epoch}, step {steps}: {msg}")),
                other => other,
            })?;
            steps += 1;
            ctr_sum += out.ctr_loss * batch.len() as f64;
            mem_sum += out.memory_loss * batch.len() as f64;
            seen += batch.len();
        }
        let eval = if eval_set.is_empty() {
            None
        } else {
            evaluate(&model, eval_set, 1024).ok()
        };
        epochs.push(EpochReport {
            epoch,
            steps,
            train_logloss: if seen > 0 { ctr_sum / seen as f64 } else { 0.0 },
            train_memory_loss: if seen > 0 { mem_sum / seen as f64 } else { 0.0 },
            eval,
        });
        if t.max_steps.is_some_and(|m| steps >= m) {
            break 'outer;
        }
    }
    Ok(TrainOutcome { model, epochs, steps })
}
