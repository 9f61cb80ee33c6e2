//! Scalar and vector kernels shared by the tape and by the plain forward paths.

use crate::error::{LmnError, Result};

/// Default transition point of the Smooth-L1 loss.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Probability clamp applied before taking logs in the CTR loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(LmnError::contract("softmax of an empty vector"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Vector-Jacobian product of softmax: given output `y` and upstream `dy`,
/// returns `y ⊙ (dy − ⟨y, dy⟩)`.
pub fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let inner: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter().zip(dy).map(|(yi, di)| yi * (di - inner)).collect()
}

#[inline]
pub(crate) fn smooth_l1_elem(e: f64, beta: f64) -> f64 {
    let a = e.abs();
    if a < beta {
        0.5 * e * e / beta
    } else {
        a - 0.5 * beta
    }
}

/// d/de of the per-element Smooth-L1 term.
#[inline]
pub(crate) fn smooth_l1_elem_grad(e: f64, beta: f64) -> f64 {
    if e.abs() < beta {
        e / beta
    } else {
        e.signum()
    }
}

/// Mean Smooth-L1 loss between `a` and `b`.
pub fn smooth_l1(a: &[f64], b: &[f64], beta: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LmnError::shape("smooth_l1", a.len(), b.len()));
    }
    if !(beta > 0.0) {
        return Err(LmnError::contract(format!(
            "smooth_l1 beta must be positive, got {beta}"
        )));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = a.iter().zip(b).map(|(x, y)| smooth_l1_elem(x - y, beta)).sum();
    Ok(total / a.len() as f64)
}

/// Gradient of [`smooth_l1`] with respect to `a` (the gradient w.r.t. `b` is its negation).
pub fn smooth_l1_grad(a: &[f64], b: &[f64], beta: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(LmnError::shape("smooth_l1_grad", a.len(), b.len()));
    }
    let n = a.len().max(1) as f64;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| smooth_l1_elem_grad(x - y, beta) / n)
        .collect())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn binary_cross_entropy(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(LmnError::shape("binary_cross_entropy", probs.len(), labels.len()));
    }
    if probs.is_empty() {
        return Err(LmnError::contract("binary cross-entropy of an empty batch"));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform_and_singleton() {
        let s = softmax(&[0.3; 4]).unwrap();
        for p in s {
            assert_abs_diff_eq!(p, 0.25, epsilon = 1e-15);
        }
        assert_eq!(softmax(&[-7.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn softmax_closed_form() {
        let s = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert_abs_diff_eq!(s[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(s[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(matches!(softmax(&[]), Err(LmnError::Contract(_))));
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let s = softmax(&[1000.0, 1000.0]).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
    }

    #[test]
    fn smooth_l1_cases() {
        assert_eq!(smooth_l1(&[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap(), 0.0);
        assert_abs_diff_eq!(smooth_l1(&[0.5], &[0.0], 1.0).unwrap(), 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(smooth_l1(&[2.0], &[0.0], 1.0).unwrap(), 1.5, epsilon = 1e-15);
        assert!(smooth_l1(&[1.0], &[1.0, 2.0], 1.0).is_err());
        assert!(smooth_l1(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn smooth_l1_gradient_zones() {
        assert_eq!(smooth_l1_grad(&[0.5], &[0.0], 1.0).unwrap(), vec![0.5]);
        assert_eq!(smooth_l1_grad(&[-3.0], &[0.0], 1.0).unwrap(), vec![-1.0]);
    }

    #[test]
    fn bce_cases() {
        assert_abs_diff_eq!(
            binary_cross_entropy(&[0.5, 0.5], &[1.0, 0.0]).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert!(binary_cross_entropy(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-6);
        assert_abs_diff_eq!(
            binary_cross_entropy(&[0.75], &[1.0]).unwrap(),
            -(0.75f64.ln()),
            epsilon = 1e-15
        );
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in proptest::collection::vec(-20.0f64..20.0, 1..32),
            c in -50.0f64..50.0,
        ) {
            let s = softmax(&v).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let t = softmax(&shifted).unwrap();
            for (a, b) in s.iter().zip(&t) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
