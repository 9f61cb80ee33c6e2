//! Cost of decomposed versus full-key memory scoring.

use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LmnError, Result};
use crate::memory::{
    materialize_full_keys, naive_scores, score_axes_counted, MemoryKeys, MulAddCounter, NAIVE_MAX_SLOTS,
};
use crate::numerics::uniform;

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub d: usize,
    /// Timed rounds per configuration; the median is reported.
    pub reps: usize,
    /// Also time the full-key path (needs an `n × 2d` table in memory; skipped
    /// above the materialization limit).
    pub naive: bool,
    /// Each round repeats queries until at least this much time has passed.
    pub min_round: Duration,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            d: 32,
            reps: 5,
            naive: true,
            min_round: Duration::from_millis(20),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub sqrt_n: usize,
    pub n: usize,
    pub d: usize,
    /// Counted multiply-adds per query.
    pub decomposed_madds: u64,
    pub naive_madds: u64,
    /// Median wall time per query.
    pub decomposed_ns: f64,
    pub naive_ns: Option<f64>,
}

impl ScalingRow {
    pub const CSV_HEADER: &'static str =
        "sqrt_n,n,d,decomposed_madds,naive_madds,decomposed_ns_per_query,naive_ns_per_query";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.1},{}",
            self.sqrt_n,
            self.n,
            self.d,
            self.decomposed_madds,
            self.naive_madds,
            self.decomposed_ns,
            self.naive_ns.map_or(String::new(), |t| format!("{t:.1}"))
        )
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len().is_multiple_of(2) {
        (xs[m - 1] + xs[m]) / 2.0
    } else {
        xs[m]
    }
}

/// Median per-call time of `f` over `reps` rounds of at least `min_round` each.
fn time_per_call(reps: usize, min_round: Duration, mut f: impl FnMut()) -> f64 {
    f(); // warm caches
    let rounds = (0..reps)
        .map(|_| {
            let start = Instant::now();
            let mut calls = 0u64;
            while start.elapsed() < min_round || calls == 0 {
                f();
                calls += 1;
            }
            start.elapsed().as_nanos() as f64 / calls as f64
        })
        .collect();
    median(rounds)
}

pub fn bench_scaling(sqrt_ns: &[usize], opts: &BenchOptions) -> Result<Vec<ScalingRow>> {
    if opts.d == 0 || opts.reps == 0 {
        return Err(LmnError::contract("d and reps must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rows = Vec::with_capacity(sqrt_ns.len());
    for &sqrt_n in sqrt_ns {
        if sqrt_n == 0 {
            return Err(LmnError::contract("sqrt_n must be positive"));
        }
        let d = opts.d;
        let keys = MemoryKeys::new(uniform(&mut rng, sqrt_n, d, 1.0), uniform(&mut rng, sqrt_n, d, 1.0))?;
        let q_row = uniform(&mut rng, 1, d, 1.0).into_vec();
        let q_col = uniform(&mut rng, 1, d, 1.0).into_vec();

        let mut counter = MulAddCounter::default();
        score_axes_counted(&q_row, &q_col, &keys, &mut counter)?;
        let decomposed_madds = counter.madds;
        let n = sqrt_n * sqrt_n;
        let naive_madds = (n * 2 * d) as u64;

        let decomposed_ns = time_per_call(opts.reps, opts.min_round, || {
            let s = score_axes_counted(
                black_box(&q_row),
                black_box(&q_col),
                &keys,
                &mut MulAddCounter::default(),
            );
            black_box(s.ok());
        });
        let naive_ns = if opts.naive && n <= NAIVE_MAX_SLOTS {
            let full = materialize_full_keys(&keys)?;
            Some(time_per_call(opts.reps, opts.min_round, || {
                let s = naive_scores(
                    black_box(&q_row),
                    black_box(&q_col),
                    &full,
                    &mut MulAddCounter::default(),
                );
                black_box(s.ok());
            }))
        } else {
            None
        };
        rows.push(ScalingRow {
            sqrt_n,
            n,
            d,
            decomposed_madds,
            naive_madds,
            decomposed_ns,
            naive_ns,
        });
    }
    Ok(rows)
}
