//! Central finite-difference gradient checking.

use super::params::ParamSet;
use crate::error::{LmnError, Result};

/// Default perturbation for central differences.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Anything that exposes its parameters as named flat blocks.
pub trait ParamBlocks {
    fn block_count(&self) -> usize;
    fn block_name(&self, block: usize) -> String;
    fn block_len(&self, block: usize) -> usize;
    fn get(&self, block: usize, index: usize) -> f64;
    fn set(&mut self, block: usize, index: usize, value: f64);
}

impl ParamBlocks for ParamSet {
    fn block_count(&self) -> usize {
        self.len()
    }

    fn block_name(&self, block: usize) -> String {
        self.name(super::tape::ParamId(block)).to_string()
    }

    fn block_len(&self, block: usize) -> usize {
        self.get(super::tape::ParamId(block)).data().len()
    }

    fn get(&self, block: usize, index: usize) -> f64 {
        self.get(super::tape::ParamId(block)).data()[index]
    }

    fn set(&mut self, block: usize, index: usize, value: f64) {
        self.get_mut(super::tape::ParamId(block)).data_mut()[index] = value;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    /// Blocks exceeding the tolerance.
    pub fn failures(&self) -> impl Iterator<Item = &BlockReport> {
        self.blocks.iter().filter(|b| !b.passed)
    }
}

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic[b][i]` against central differences of `loss_fn` for every
/// coordinate of every block of `params`. Parameters are restored afterwards.
pub fn finite_diff_check<P, F>(
    params: &mut P,
    mut loss_fn: F,
    analytic: &[Vec<f64>],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    P: ParamBlocks,
    F: FnMut(&P) -> Result<f64>,
{
    if analytic.len() != params.block_count() {
        return Err(LmnError::shape(
            "finite_diff_check",
            params.block_count(),
            analytic.len(),
        ));
    }
    let base = loss_fn(params)?;
    let again = loss_fn(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(LmnError::contract(format!(
            "loss is not deterministic: {base} then {again}"
        )));
    }

    let mut blocks = Vec::with_capacity(analytic.len());
    for (b, grad) in analytic.iter().enumerate() {
        let len = params.block_len(b);
        if grad.len() != len {
            return Err(LmnError::shape("finite_diff_check block", len, grad.len()));
        }
        let mut worst = (0.0, 0);
        for (i, &a) in grad.iter().enumerate() {
            let orig = params.get(b, i);
            params.set(b, i, orig + epsilon);
            let up = loss_fn(params);
            params.set(b, i, orig - epsilon);
            let down = loss_fn(params);
            params.set(b, i, orig);
            let numeric = (up? - down?) / (2.0 * epsilon);
            let err = relative_error(a, numeric);
            if err > worst.0 || err.is_nan() {
                worst = (err, i);
            }
        }
        blocks.push(BlockReport {
            name: params.block_name(b),
            entries: len,
            max_rel_err: worst.0,
            worst_index: worst.1,
            passed: worst.0 < tolerance,
        });
    }
    Ok(GradCheckReport { blocks, tolerance })
}
