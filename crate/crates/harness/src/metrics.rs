//! Evaluation metrics of a simulated annotation run.

use std::collections::BTreeMap;

use ddfh_core::{FramePool, FusedFeature, InstanceKey, FEATURE_DIM};
use nalgebra::{SMatrix, SVector};
use thiserror::Error;

const D: usize = FEATURE_DIM;

/// Ridge added to single-Gaussian covariances in the divergence metric.
pub const DIVERGENCE_REG: f64 = 1e-2;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("entropy needs at least one positive value")]
    AllZero,
    #[error("entropy inputs must be finite and nonnegative")]
    Invalid,
}

/// Shannon entropy (nats) of the normalized vector.
pub fn label_entropy(values: &[f64]) -> Result<f64, MetricError> {
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(MetricError::Invalid);
    }
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(MetricError::AllZero);
    }
    let h: f64 = values
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum();
    Ok(h.clamp(0.0, (values.len() as f64).ln()))
}

struct Gaussian {
    mean: SVector<f64, D>,
    cov: SMatrix<f64, D, D>,
    precision: SMatrix<f64, D, D>,
}

fn fit_gaussian(points: &[[f64; D]]) -> Option<Gaussian> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let mean = points.iter().map(|p| SVector::<f64, D>::from(*p)).sum::<SVector<f64, D>>() / n;
    let mut cov = SMatrix::<f64, D, D>::identity() * DIVERGENCE_REG;
    for p in points {
        let d = SVector::<f64, D>::from(*p) - mean;
        cov += d * d.transpose() / n;
    }
    let precision = cov.cholesky()?.inverse();
    Some(Gaussian { mean, cov, precision })
}

/// Symmetric KL divergence `KL(a||b) + KL(b||a)` between Gaussians fitted to
/// two point sets; NaN when either side is empty.
pub fn symmetric_kl(a: &[[f64; D]], b: &[[f64; D]]) -> f64 {
    let (Some(a), Some(b)) = (fit_gaussian(a), fit_gaussian(b)) else {
        return f64::NAN;
    };
    let delta = b.mean - a.mean;
    let trace = (b.precision * a.cov).trace() + (a.precision * b.cov).trace();
    let maha = (delta.transpose() * (a.precision + b.precision) * delta)[(0, 0)];
    0.5 * (trace + maha - 2.0 * D as f64)
}

/// Per-class symmetric KL divergence between labeled and unlabeled fused
/// features of `pool`.
pub fn class_divergence(pool: &FramePool, features: &BTreeMap<InstanceKey, FusedFeature>) -> Vec<f64> {
    let c = pool.class_count();
    let mut labeled = vec![Vec::new(); c];
    let mut unlabeled = vec![Vec::new(); c];
    for (key, r) in pool.instances() {
        let Some(f) = features.get(&key) else { continue };
        if pool.is_labeled(&key.frame_id) {
            labeled[r.class_id].push(*f.values());
        } else {
            unlabeled[r.class_id].push(*f.values());
        }
    }
    (0..c).map(|k| symmetric_kl(&labeled[k], &unlabeled[k])).collect()
}

/// Mean of the finite entries, NaN if there are none.
pub fn finite_mean(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

/// Median of a nonempty slice (NaN for an empty one).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_closed_forms() {
        assert!((label_entropy(&[10.0, 10.0, 10.0]).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert_eq!(label_entropy(&[30.0, 0.0, 0.0]).unwrap(), 0.0);
        let h = label_entropy(&[20.0, 10.0, 10.0]).unwrap();
        assert!((h - 1.5 * 2f64.ln()).abs() < 1e-12);
        assert!((h - 1.0397).abs() < 1e-4);
        assert_eq!(label_entropy(&[0.0, 0.0]), Err(MetricError::AllZero));
        assert_eq!(label_entropy(&[-1.0, 2.0]), Err(MetricError::Invalid));
    }

    #[test]
    fn divergence_of_identical_sets_is_zero() {
        let pts: Vec<[f64; D]> = (0..20).map(|i| std::array::from_fn(|d| ((i * 7 + d * 3) % 11) as f64)).collect();
        assert!(symmetric_kl(&pts, &pts).abs() < 1e-9);
        let shifted: Vec<[f64; D]> = pts.iter().map(|p| std::array::from_fn(|d| p[d] + 1.0)).collect();
        assert!(symmetric_kl(&pts, &shifted) > 0.0);
        assert!(symmetric_kl(&pts, &[]).is_nan());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(finite_mean(&[1.0, f64::NAN, 3.0]), 2.0);
    }
}
