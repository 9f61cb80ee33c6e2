use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use lmn_core::bench::{self, BenchOptions, ScalingRow};
use lmn_core::ctr::{
    self, check_model_gradients, gradcheck_config, CtrModel, EpochReport, GradCheckOptions, RunConfig,
};
use lmn_core::data::{generate, load_csv, read_meta, write_dataset, MetricsReport, Sample, SyntheticSpec};
use lmn_core::memory::Checkpoint;

use crate::error::{CliError, IoContext};
use crate::manifest::{write_atomic, RunManifest, VERSION_TAG};
use crate::{BenchArgs, CheckGradArgs, EvalArgs, GenDataArgs, TrainArgs};

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).at(path)
}

/// Prints `text` to stdout and, when asked, also stores it atomically.
fn emit(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    std::io::stdout().write_all(text.as_bytes()).at("<stdout>")?;
    if let Some(path) = out {
        write_atomic(path, text.as_bytes())?;
    }
    Ok(())
}

fn csv_table(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

pub fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let mut spec = match &a.spec {
        Some(p) => SyntheticSpec::parse(&read_text(p)?)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let data = generate(&spec)?;
    write_dataset(&data, &a.out)?;
    let row = |name: &str, s: &[Sample]| {
        let clicks = s.iter().filter(|x| x.label == 1).count();
        format!("{name},{},{clicks}", s.len())
    };
    emit(
        &csv_table(
            "split,samples,clicks",
            [row("train", &data.train), row("eval", &data.eval)],
        ),
        None,
    )?;
    eprintln!(
        "wrote {} train and {} eval samples to {}",
        data.train.len(),
        data.eval.len(),
        a.out.display()
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let (cfg, data_dir) = match &a.manifest {
        Some(m) => {
            let m = RunManifest::load(m)?;
            (m.config, m.data)
        }
        None => {
            let (Some(config), Some(data)) = (&a.config, &a.data) else {
                return Err(CliError::Usage("train needs --config and --data, or --manifest".into()));
            };
            (RunConfig::parse(&read_text(config)?)?, data.clone())
        }
    };
    // Absolute, so a manifest can be replayed from any working directory.
    let data_dir = fs::canonicalize(&data_dir).at(&data_dir)?;
    let vocab = read_meta(&data_dir)?;
    let train_set = load_csv(&data_dir.join("train.csv"))?;
    let eval_set = load_csv(&data_dir.join("eval.csv"))?;
    let loaded = start.elapsed();

    let outcome = ctr::train(&cfg, &train_set, &eval_set, vocab)?;
    let trained = start.elapsed() - loaded;

    fs::create_dir_all(&a.out).at(&a.out)?;
    let checkpoint = a.out.join("model.ckpt");
    let report = a.out.join("report.csv");
    let snapshot = a.out.join("config.txt");
    outcome.model.to_checkpoint().save(&checkpoint)?;
    let table = csv_table(EpochReport::CSV_HEADER, outcome.epochs.iter().map(EpochReport::csv_row));
    write_atomic(&report, table.as_bytes())?;
    write_atomic(&snapshot, cfg.to_key_values().as_bytes())?;

    let secs = Duration::as_secs_f64;
    let manifest = RunManifest {
        version: VERSION_TAG.to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        data: data_dir,
        checkpoint,
        report,
        config_snapshot: snapshot,
        timings: vec![
            ("load".into(), secs(&loaded)),
            ("train".into(), secs(&trained)),
            ("total".into(), secs(&start.elapsed())),
        ],
    };
    // Last, so its presence marks a complete run.
    write_atomic(&a.out.join("manifest.csv"), &manifest.to_csv()?)?;
    emit(&table, None)?;
    match outcome.epochs.last().and_then(|e| e.eval.as_ref()) {
        Some(m) => eprintln!(
            "{}: {} steps, eval AUC {:.4}, LogLoss {:.4} ({:.1}s)",
            cfg.variant,
            outcome.steps,
            m.auc,
            m.logloss,
            secs(&trained)
        ),
        None => eprintln!("{}: {} steps ({:.1}s)", cfg.variant, outcome.steps, secs(&trained)),
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<CtrModel, CliError> {
    Ok(CtrModel::from_checkpoint(&Checkpoint::load(path)?, 1)?)
}

fn split_path(data: &Path, split: &str) -> PathBuf {
    if data.is_dir() {
        data.join(format!("{split}.csv"))
    } else {
        data.to_path_buf()
    }
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let samples = load_csv(&split_path(&a.data, &a.split))?;
    let model = load_model(&a.checkpoint)?;
    let mut report = ctr::evaluate(&model, &samples, a.batch_size)?;
    if let Some(base) = &a.base {
        report = report.with_base(&ctr::evaluate(&load_model(base)?, &samples, a.batch_size)?)?;
    }
    emit(
        &csv_table(MetricsReport::CSV_HEADER, [report.csv_row()]),
        a.out.as_deref(),
    )?;
    eprintln!(
        "{}: AUC {:.4}, LogLoss {:.4} on {} samples",
        model.config().variant,
        report.auc,
        report.logloss,
        report.samples
    );
    Ok(())
}

pub fn check_grad(a: &CheckGradArgs) -> Result<(), CliError> {
    let cfg = match &a.config {
        Some(p) => RunConfig::parse(&read_text(p)?)?,
        None => gradcheck_config(),
    };
    let opts = GradCheckOptions {
        batch_size: a.batch_size,
        epsilon: a.epsilon,
        tolerance: a.tolerance,
        seed: a.seed,
    };
    let report = check_model_gradients(&cfg, &opts)?;
    let rows = report.blocks.iter().map(|b| {
        format!(
            "{},{},{:.3e},{},{}",
            b.name,
            b.entries,
            b.max_rel_err,
            b.worst_index,
            if b.passed { "pass" } else { "fail" }
        )
    });
    emit(&csv_table("block,entries,max_rel_err,worst_index,status", rows), None)?;
    let worst = report.max_rel_err();
    if report.passed() {
        eprintln!("PASS, max rel err {worst:.3e} < {}", a.tolerance);
        Ok(())
    } else {
        let failing: Vec<&str> = report.failures().map(|b| b.name.as_str()).collect();
        Err(CliError::Failed(format!(
            "FAIL, max rel err {worst:.3e} >= {} in {}",
            a.tolerance,
            failing.join(", ")
        )))
    }
}

pub fn bench_scaling(a: &BenchArgs) -> Result<(), CliError> {
    if a.sqrt_n.is_empty() {
        return Err(CliError::Usage("--sqrt-n needs at least one value".into()));
    }
    let opts = BenchOptions {
        d: a.d,
        reps: a.reps,
        naive: a.naive,
        min_round: Duration::from_millis(a.min_round_ms),
        seed: a.seed,
    };
    let rows = bench::bench_scaling(&a.sqrt_n, &opts)?;
    emit(
        &csv_table(ScalingRow::CSV_HEADER, rows.iter().map(ScalingRow::csv_row)),
        a.out.as_deref(),
    )?;
    let first = &rows[0];
    for r in &rows[1..] {
        eprintln!(
            "sqrt_n {} vs {}: counted ratio {:.1} (naive {:.1}), wall ratio {:.2}",
            r.sqrt_n,
            first.sqrt_n,
            r.decomposed_madds as f64 / first.decomposed_madds as f64,
            r.naive_madds as f64 / first.naive_madds as f64,
            r.decomposed_ns / first.decomposed_ns
        );
    }
    Ok(())
}
