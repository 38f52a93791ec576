//! Quantile normalization and the frame-level informativeness indicators.
//!
//! Every raw indicator is pushed through a [`QuantileMap`] fitted on the
//! pooled scores of the round before aggregation, so indicators with
//! unrelated units (densities, variances, correlations) land on a common
//! standard-normal scale.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;
use thiserror::Error;

use crate::fusion::FusedFeature;
use crate::FEATURE_DIM;

const D: usize = FEATURE_DIM;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("cannot fit a quantile map on an empty score set")]
    EmptyReference,
    #[error("score set contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("correlation needs at least 2 columns, got {0}")]
    TooFewColumns(usize),
}

/// Standard normal quantile function.
pub fn inverse_normal_cdf(q: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * q)
}

/// Fitted quantile transform: empirical CDF of a reference set composed with
/// the standard normal quantile function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileMap {
    reference: Vec<f64>,
    clip: f64,
}

pub const DEFAULT_CLIP: f64 = 1e-7;

impl QuantileMap {
    pub fn fit(scores: &[f64]) -> Result<Self, ScoringError> {
        Self::fit_with_clip(scores, DEFAULT_CLIP)
    }

    pub fn fit_with_clip(scores: &[f64], clip: f64) -> Result<Self, ScoringError> {
        if scores.is_empty() {
            return Err(ScoringError::EmptyReference);
        }
        if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
            return Err(ScoringError::NonFinite(i));
        }
        let mut reference = scores.to_vec();
        reference.sort_by(f64::total_cmp);
        Ok(Self { reference, clip })
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    /// Empirical CDF level of `x`: the order statistic of rank `r` (1-based,
    /// ties take their mid-rank) sits at `(r - 0.5) / n`, values between
    /// order statistics interpolate linearly, values outside the reference
    /// range clamp to the clip bounds.
    pub fn level(&self, x: f64) -> f64 {
        let s = &self.reference;
        let n = s.len();
        let nf = n as f64;
        let q = if x < s[0] {
            self.clip
        } else if x > s[n - 1] {
            1.0 - self.clip
        } else {
            // first index with s[i] >= x, first index with s[i] > x
            let lo = s.partition_point(|v| *v < x);
            let hi = s.partition_point(|v| *v <= x);
            if hi > lo {
                // x equals s[lo..hi]; ranks lo+1..=hi
                let mid_rank = (lo + 1 + hi) as f64 / 2.0;
                (mid_rank - 0.5) / nf
            } else {
                // s[lo - 1] < x < s[lo]
                let (a, b) = (s[lo - 1], s[lo]);
                let t = (x - a) / (b - a);
                (lo as f64 - 0.5 + t) / nf
            }
        };
        q.clamp(self.clip, 1.0 - self.clip)
    }

    /// Quantile-transformed value of `x`.
    pub fn apply(&self, x: f64) -> f64 {
        inverse_normal_cdf(self.level(x))
    }
}

/// Free-function form of [`QuantileMap::fit`].
pub fn qt_fit(scores: &[f64]) -> Result<QuantileMap, ScoringError> {
    QuantileMap::fit(scores)
}

/// Free-function form of [`QuantileMap::apply`].
pub fn qt_apply(map: &QuantileMap, x: f64) -> f64 {
    map.apply(x)
}

/// Mean over the frame's instances of the normalized discrepancy plus the
/// normalized novelty. An empty frame scores 0.
pub fn frame_i_dd(instances: &[(f64, f64)], dd_map: &QuantileMap, nov_map: &QuantileMap) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    let sum: f64 = instances
        .iter()
        .map(|&(dd, nov)| dd_map.apply(dd) + nov_map.apply(nov))
        .sum();
    sum / instances.len() as f64
}

/// Streaming first and second centered moments of 8-D columns. Two sets are
/// combined with the pairwise update, so the labeled side of every
/// heterogeneity query is summarized once per class.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    count: usize,
    mean: [f64; D],
    /// Sum of outer products of deviations from `mean` (lower triangle used).
    comoment: [[f64; D]; D],
}

impl Moments {
    pub fn empty() -> Self {
        Self {
            count: 0,
            mean: [0.0; D],
            comoment: [[0.0; D]; D],
        }
    }

    /// Two-pass moments of `columns`.
    pub fn of(columns: &[[f64; D]]) -> Self {
        let n = columns.len();
        if n == 0 {
            return Self::empty();
        }
        let mean: [f64; D] = std::array::from_fn(|d| columns.iter().map(|c| c[d]).sum::<f64>() / n as f64);
        let mut comoment = [[0.0; D]; D];
        for c in columns {
            let dev: [f64; D] = std::array::from_fn(|d| c[d] - mean[d]);
            for a in 0..D {
                for b in 0..=a {
                    comoment[a][b] += dev[a] * dev[b];
                }
            }
        }
        Self {
            count: n,
            mean,
            comoment,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn merge(&self, other: &Moments) -> Moments {
        if self.count == 0 {
            return other.clone();
        }
        if other.count == 0 {
            return self.clone();
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: [f64; D] = std::array::from_fn(|d| other.mean[d] - self.mean[d]);
        let mean = std::array::from_fn(|d| self.mean[d] + delta[d] * nb / n);
        let mut comoment = [[0.0; D]; D];
        let f = na * nb / n;
        for a in 0..D {
            for b in 0..=a {
                comoment[a][b] = self.comoment[a][b] + other.comoment[a][b] + f * delta[a] * delta[b];
            }
        }
        Moments {
            count: self.count + other.count,
            mean,
            comoment,
        }
    }

    /// Population variance (divide by N) of dimension `d`.
    pub fn variance(&self, d: usize) -> f64 {
        (self.comoment[d][d] / self.count as f64).max(0.0)
    }

    /// Sum of the per-dimension population variances.
    pub fn total_variance(&self) -> f64 {
        (0..D).map(|d| self.variance(d)).sum()
    }

    /// Mean Pearson correlation over the 28 unordered dimension pairs. Pairs
    /// with a (numerically) constant dimension contribute 0.
    pub fn mean_correlation(&self) -> f64 {
        let n = self.count as f64;
        let sd: [f64; D] = std::array::from_fn(|d| self.variance(d).sqrt());
        let constant: [bool; D] = std::array::from_fn(|d| sd[d] <= zero_spread_floor(self.mean[d]));
        let mut sum = 0.0;
        for a in 0..D {
            for b in 0..a {
                if constant[a] || constant[b] {
                    continue;
                }
                let r = self.comoment[a][b] / n / (sd[a] * sd[b]);
                sum += r.clamp(-1.0, 1.0);
            }
        }
        sum / PAIRS
    }
}

const PAIRS: f64 = (D * (D - 1) / 2) as f64;

/// Standard deviations at or below this are treated as zero spread. Scaled
/// by the dimension's magnitude so a constant row with rounding noise in its
/// mean still counts as constant.
pub fn zero_spread_floor(mean: f64) -> f64 {
    1e-12 * mean.abs().max(1.0)
}

/// Mean pairwise Pearson correlation between the 8 feature rows of an
/// 8 x N matrix given as N columns.
pub fn pearson_mean(columns: &[[f64; D]]) -> Result<f64, ScoringError> {
    if columns.len() < 2 {
        return Err(ScoringError::TooFewColumns(columns.len()));
    }
    Ok(Moments::of(columns).mean_correlation())
}

/// `(s_var, s_cor)` of the frame's class-c columns joined with the labeled
/// class-c columns.
pub fn heterogeneity_scores(frame: &[[f64; D]], labeled: &[[f64; D]]) -> Result<(f64, f64), ScoringError> {
    heterogeneity_from_moments(&Moments::of(frame), &Moments::of(labeled))
}

pub fn heterogeneity_from_moments(frame: &Moments, labeled: &Moments) -> Result<(f64, f64), ScoringError> {
    let joined = frame.merge(labeled);
    if joined.count < 2 {
        return Err(ScoringError::TooFewColumns(joined.count));
    }
    let s_var = joined.total_variance();
    let s_cor = 1.0 - joined.mean_correlation().abs();
    Ok((s_var, s_cor.clamp(0.0, 1.0)))
}

/// Sum over the classes present in the frame of the product of normalized
/// variance and normalized decorrelation, divided by the class count.
pub fn frame_i_fh(present: &[(f64, f64)], var_map: &QuantileMap, cor_map: &QuantileMap, class_count: usize) -> f64 {
    if present.is_empty() || class_count == 0 {
        return 0.0;
    }
    let sum: f64 = present
        .iter()
        .map(|&(v, c)| var_map.apply(v) * cor_map.apply(c))
        .sum();
    sum / class_count as f64
}

/// Entropy (nats) of the softmax of per-class confidence sums.
pub fn frame_i_cb(confidence_sums: &[f64]) -> f64 {
    let c = confidence_sums.len();
    if c <= 1 {
        return 0.0;
    }
    let (arg, max) = confidence_sums
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let rest: f64 = confidence_sums
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != arg)
        .map(|(_, v)| (v - max).exp())
        .sum();
    let log_z = max + rest.ln_1p();
    let h: f64 = confidence_sums
        .iter()
        .map(|&v| {
            let log_phi = v - log_z;
            -log_phi.exp() * log_phi
        })
        .sum();
    h.clamp(0.0, (c as f64).ln())
}

/// Aggregate informativeness `(i_dd + i_fh) * i_cb`.
pub fn frame_i_total(i_dd: f64, i_fh: f64, i_cb: f64) -> f64 {
    (i_dd + i_fh) * i_cb
}

/// Raw per-class statistics of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDiagnostics {
    pub class_id: usize,
    pub instances: usize,
    pub confidence_sum: f64,
    pub s_var: f64,
    pub s_cor: f64,
}

/// Indicator breakdown of one candidate frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame_id: crate::records::FrameId,
    pub i_dd: f64,
    pub i_fh: f64,
    pub i_cb: f64,
    pub i_total: f64,
    pub instances: usize,
    pub classes: Vec<ClassDiagnostics>,
}

impl FrameScore {
    pub fn new(
        frame_id: crate::records::FrameId,
        i_dd: f64,
        i_fh: f64,
        i_cb: f64,
        instances: usize,
        classes: Vec<ClassDiagnostics>,
    ) -> Self {
        Self {
            frame_id,
            i_dd,
            i_fh,
            i_cb,
            i_total: frame_i_total(i_dd, i_fh, i_cb),
            instances,
            classes,
        }
    }
}

/// Columns of fused features, for the matrix-shaped kernels.
pub fn columns<'a>(features: impl IntoIterator<Item = &'a FusedFeature>) -> Vec<[f64; D]> {
    features.into_iter().map(|f| *f.values()).collect()
}
