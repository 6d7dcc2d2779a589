//! Error metrics between approximate and reference outputs, plus FLOP
//! accounting for dense and block-sparse attention.
//!
//! Metrics accumulate in `f64`. The FLOP model counts the two attention
//! matmuls only (`4·L²·d`); softmax is excluded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub cosine_sim: f64,
    pub mse: f64,
    /// `f64::INFINITY` when the error is exactly zero.
    pub snr_db: f64,
    pub density: f64,
    pub flops_sparse: u64,
    pub flops_dense: u64,
}

fn same_len(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// `⟨a,b⟩ / (‖a‖·‖b‖)`, clamped to `[-1, 1]`. Two zero vectors give 1; one
/// zero vector gives 0.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    same_len(a, b)?;
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 && bb == 0.0 {
        return Ok(1.0);
    }
    if aa == 0.0 || bb == 0.0 {
        return Ok(0.0);
    }
    // One square root keeps `a == b` at exactly 1.
    Ok((ab / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    same_len(a, b)?;
    if a.is_empty() {
        return Err(Error::Empty("mse input"));
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let e = x as f64 - y as f64;
            e * e
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10·log10(‖reference‖² / ‖reference − approx‖²)` in dB. Anchored on the
/// reference, so not symmetric.
pub fn snr_db(reference: &[f32], approx: &[f32]) -> Result<f64> {
    same_len(reference, approx)?;
    let (mut signal, mut noise) = (0.0f64, 0.0f64);
    for (&r, &a) in reference.iter().zip(approx) {
        let (r, a) = (r as f64, a as f64);
        signal += r * r;
        noise += (r - a) * (r - a);
    }
    if signal == 0.0 {
        return Err(Error::ZeroReference);
    }
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / noise).log10())
}

/// `4·L²·d`: two L×L×d matmuls at two FLOPs per multiply-accumulate.
pub fn flops_dense(tokens: usize, d_model: usize) -> u64 {
    4 * (tokens as u64) * (tokens as u64) * d_model as u64
}

/// `round(density · flops_dense)`.
pub fn flops_sparse(tokens: usize, d_model: usize, density: f64) -> Result<u64> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidDensity(density));
    }
    Ok((density * flops_dense(tokens, d_model) as f64).round() as u64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let a = [1.0f32, 2.0, 3.0];
        let b = [2.0f32, 4.0, 7.0];
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for i in 0..3 {
            ab += a[i] as f64 * b[i] as f64;
            aa += a[i] as f64 * a[i] as f64;
            bb += b[i] as f64 * b[i] as f64;
        }
        let expected = ab / (aa.sqrt() * bb.sqrt());
        assert!((cosine_similarity(&a, &b).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 31.0 / 966f64.sqrt()).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0], &[0.0]).unwrap(), 1.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert!(mse(&[1.0], &[]).is_err());
    }

    #[test]
    fn snr_examples() {
        assert_eq!(snr_db(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), f64::INFINITY);
        assert_eq!(snr_db(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!((snr_db(&[3.0, 4.0], &[3.0, 4.5]).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(snr_db(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroReference));
    }

    #[test]
    fn snr_is_reference_anchored() {
        let a = [3.0f32, 4.0];
        let b = [3.0f32, 4.5];
        assert_ne!(snr_db(&a, &b).unwrap(), snr_db(&b, &a).unwrap());
    }

    #[test]
    fn flop_examples() {
        assert_eq!(flops_dense(1024, 64), 268_435_456);
        assert_eq!(flops_dense(1, 7), 28);
        assert_eq!(flops_dense(2, 2), 32);
        assert_eq!(flops_sparse(1024, 64, 1.0).unwrap(), flops_dense(1024, 64));
        assert_eq!(flops_sparse(4, 1, 0.625).unwrap(), 40);
        assert_eq!(flops_sparse(1024, 64, 0.25).unwrap(), 67_108_864);
        assert!(flops_sparse(4, 1, 0.0).is_err());
        assert!(flops_sparse(4, 1, 1.5).is_err());
    }

    fn vec_pair() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
        (1usize..32).prop_flat_map(|n| {
            (
                proptest::collection::vec(-10.0f32..10.0, n),
                proptest::collection::vec(-10.0f32..10.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn cosine_scale_invariance(a in proptest::collection::vec(-10.0f32..10.0, 1..32), c in 0.1f32..10.0) {
            prop_assume!(a.iter().any(|&x| x != 0.0));
            let pos: Vec<f32> = a.iter().map(|x| x * c).collect();
            let neg: Vec<f32> = a.iter().map(|x| -x * c).collect();
            prop_assert!((cosine_similarity(&a, &pos).unwrap() - 1.0).abs() < 1e-6);
            prop_assert!((cosine_similarity(&a, &neg).unwrap() + 1.0).abs() < 1e-6);
        }

        #[test]
        fn mse_symmetric_and_matches_loop((a, b) in vec_pair()) {
            prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
            let mut s = 0.0f64;
            for i in 0..a.len() {
                s += (a[i] as f64 - b[i] as f64).powi(2);
            }
            prop_assert!((mse(&a, &b).unwrap() - s / a.len() as f64).abs() <= 1e-12 * s.max(1.0));
        }

        #[test]
        fn flops_sparse_monotone(a in 0.001f64..1.0, b in 0.001f64..1.0, l in 1usize..2000, d in 1usize..256) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(flops_sparse(l, d, lo).unwrap() <= flops_sparse(l, d, hi).unwrap());
            prop_assert!(flops_sparse(l, d, hi).unwrap() <= flops_dense(l, d));
        }
    }
}
