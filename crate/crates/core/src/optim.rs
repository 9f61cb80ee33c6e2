//! Adagrad with sparse row application.

use crate::error::{LmnError, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adagrad {
    pub lr: f64,
    pub eps: f64,
    pub initial_accumulator: f64,
}

impl Default for Adagrad {
    fn default() -> Self {
        Adagrad {
            lr: 0.01,
            eps: 1e-8,
            initial_accumulator: 0.0,
        }
    }
}

impl Adagrad {
    pub fn new(lr: f64) -> Self {
        Adagrad {
            lr,
            ..Default::default()
        }
    }

    pub fn accumulator_like(&self, m: &Matrix) -> Matrix {
        let mut acc = Matrix::zeros(m.rows(), m.cols());
        acc.data_mut().iter_mut().for_each(|v| *v = self.initial_accumulator);
        acc
    }

    /// One update of a parameter slice and its accumulator.
    #[inline]
    pub fn apply_slice(&self, param: &mut [f64], accum: &mut [f64], grad: &[f64]) {
        for ((p, a), g) in param.iter_mut().zip(accum.iter_mut()).zip(grad) {
            *a += g * g;
            *p -= self.lr * g / (a.sqrt() + self.eps);
        }
    }

    pub fn apply_dense(&self, param: &mut Matrix, accum: &mut Matrix, grad: &Matrix) -> Result<()> {
        if param.shape() != grad.shape() || accum.shape() != grad.shape() {
            return Err(LmnError::shape(
                "adagrad",
                format!("{:?}", param.shape()),
                format!("grad {:?}, accum {:?}", grad.shape(), accum.shape()),
            ));
        }
        grad.ensure_finite("dense gradient")?;
        self.apply_slice(param.data_mut(), accum.data_mut(), grad.data());
        Ok(())
    }
}
