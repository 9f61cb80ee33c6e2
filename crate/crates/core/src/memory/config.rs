use crate::error::{LmnError, Result};

/// Shape and loss settings of one memory block.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryConfig {
    /// Keys per axis; the block has `sqrt_n²` value slots.
    pub sqrt_n: usize,
    /// Embedding / slot dimension.
    pub d: usize,
    /// Slots read per query.
    pub k_top: usize,
    pub heads: usize,
    /// Weight of the memory loss in the combined objective.
    pub alpha: f64,
    pub beta_smooth: f64,
    /// Hidden layers (width `d`) in the user-aware merge MLP.
    pub merge_hidden: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            sqrt_n: 32,
            d: 32,
            k_top: 8,
            heads: 1,
            alpha: 0.1,
            beta_smooth: 1.0,
            merge_hidden: 1,
        }
    }
}

impl MemoryConfig {
    pub fn n(&self) -> usize {
        self.sqrt_n * self.sqrt_n
    }

    pub fn validate(&self) -> Result<()> {
        if self.sqrt_n == 0 {
            return Err(LmnError::contract("sqrt_n must be at least 1"));
        }
        if self.d == 0 {
            return Err(LmnError::contract("d must be at least 1"));
        }
        if self.k_top == 0 || self.k_top > self.n() {
            return Err(LmnError::contract(format!(
                "k_top must lie in [1, {}], got {}",
                self.n(),
                self.k_top
            )));
        }
        if self.heads == 0 {
            return Err(LmnError::contract("heads must be at least 1"));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(LmnError::contract(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta_smooth > 0.0) {
            return Err(LmnError::contract(format!(
                "beta_smooth must be > 0, got {}",
                self.beta_smooth
            )));
        }
        Ok(())
    }

    /// Layer widths of the merge MLP: `2d → d (→ d)*`.
    pub fn merge_dims(&self) -> Vec<usize> {
        let mut dims = vec![2 * self.d];
        dims.extend(std::iter::repeat_n(self.d, self.merge_hidden + 1));
        dims
    }
}
