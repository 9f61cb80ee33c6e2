//! Ranking and calibration metrics.

use crate::error::{LmnError, Result};
use crate::numerics::ops::clamp_prob;

/// Area under the ROC curve via the Mann-Whitney rank statistic; tied scores
/// share their average rank.
pub fn auc(labels: &[f64], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(LmnError::shape("auc", labels.len(), scores.len()));
    }
    let positives = labels.iter().filter(|&&y| y > 0.5).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(LmnError::contract("auc needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] > 0.5 {
                pos_rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Mean negative log-likelihood with predictions clamped to `[1e-7, 1 − 1e-7]`.
pub fn logloss(labels: &[f64], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(LmnError::shape("logloss", labels.len(), scores.len()));
    }
    if labels.is_empty() {
        return Err(LmnError::contract("logloss of an empty set"));
    }
    let total: f64 = labels
        .iter()
        .zip(scores)
        .map(|(&y, &p)| {
            let p = clamp_prob(p);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Relative AUC gain over a base model, measured above random guessing:
/// `((auc − 0.5) / (base − 0.5) − 1) · 100`.
pub fn auc_improvement(auc_model: f64, auc_base: f64) -> Result<f64> {
    if !(auc_base > 0.5) {
        return Err(LmnError::contract(format!("base AUC must exceed 0.5, got {auc_base}")));
    }
    Ok(((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0)
}

/// Relative LogLoss change in percent; negative means better.
pub fn logloss_improvement(logloss_model: f64, logloss_base: f64) -> Result<f64> {
    if !(logloss_base > 0.0) {
        return Err(LmnError::contract(format!(
            "base LogLoss must be positive, got {logloss_base}"
        )));
    }
    Ok((logloss_model - logloss_base) / logloss_base * 100.0)
}

/// Rounds to `decimals` places, ties to even.
pub fn round_half_even(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    let scaled = x * scale;
    let floor = scaled.floor();
    let diff = scaled - floor;
    let rounded = if diff > 0.5 {
        floor + 1.0
    } else if diff < 0.5 {
        floor
    } else if floor % 2.0 == 0.0 {
        floor
    } else {
        floor + 1.0
    };
    rounded / scale
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub auc: f64,
    pub logloss: f64,
    pub auc_imp_pct: Option<f64>,
    pub logloss_imp_pct: Option<f64>,
    pub samples: usize,
}

impl MetricsReport {
    pub fn compute(labels: &[f64], scores: &[f64]) -> Result<Self> {
        Ok(MetricsReport {
            auc: auc(labels, scores)?,
            logloss: logloss(labels, scores)?,
            auc_imp_pct: None,
            logloss_imp_pct: None,
            samples: labels.len(),
        })
    }

    /// Fills the improvement columns relative to `base`.
    pub fn with_base(mut self, base: &MetricsReport) -> Result<Self> {
        self.auc_imp_pct = Some(auc_improvement(self.auc, base.auc)?);
        self.logloss_imp_pct = Some(logloss_improvement(self.logloss, base.logloss)?);
        Ok(self)
    }

    pub const CSV_HEADER: &'static str = "auc,auc_imp_pct,logloss,logloss_imp_pct,samples";

    pub fn csv_row(&self) -> String {
        let pct = |v: Option<f64>| v.map_or(String::new(), |x| format!("{:.2}", round_half_even(x, 2)));
        format!(
            "{:.6},{},{:.6},{},{}",
            self.auc,
            pct(self.auc_imp_pct),
            self.logloss,
            pct(self.logloss_imp_pct),
            self.samples
        )
    }
}
