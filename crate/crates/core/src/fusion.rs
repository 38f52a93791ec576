//! Fused 8-D instance features: reduced embedding followed by geometry,
//! z-scored per dimension over the round's union pool.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{FramePool, InstanceKey};
use crate::FEATURE_DIM;

/// Standardized feature vector: indices 0-1 hold the reduced embedding,
/// 2-7 the geometry (length, width, height, volume, rotation, points).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FusedFeature(pub [f64; FEATURE_DIM]);

impl FusedFeature {
    pub fn values(&self) -> &[f64; FEATURE_DIM] {
        &self.0
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("reduced embedding has {rows} rows but the pool has {instances} instances")]
    RowMismatch { rows: usize, instances: usize },
    #[error("non-finite fused feature for instance {0:?}")]
    NonFinite(InstanceKey),
}

/// Per-dimension affine map `x -> (x - mean) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; FEATURE_DIM],
    pub scale: [f64; FEATURE_DIM],
}

impl Standardizer {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; FEATURE_DIM],
            scale: [1.0; FEATURE_DIM],
        }
    }

    /// Two-pass mean and sample standard deviation (n - 1). Dimensions with
    /// no spread, and the single-row case, get scale 1.
    pub fn fit(rows: &[[f64; FEATURE_DIM]]) -> Self {
        let mut out = Self::identity();
        let n = rows.len();
        if n == 0 {
            return out;
        }
        for d in 0..FEATURE_DIM {
            let mean = rows.iter().map(|r| r[d]).sum::<f64>() / n as f64;
            out.mean[d] = mean;
            if n < 2 {
                continue;
            }
            let ss: f64 = rows.iter().map(|r| (r[d] - mean).powi(2)).sum();
            let std = (ss / (n - 1) as f64).sqrt();
            let magnitude = rows.iter().fold(0.0_f64, |m, r| m.max(r[d].abs()));
            if std > 1e-12 * magnitude.max(1.0) {
                out.scale[d] = std;
            }
        }
        out
    }

    pub fn apply(&self, row: &[f64; FEATURE_DIM]) -> [f64; FEATURE_DIM] {
        std::array::from_fn(|d| (row[d] - self.mean[d]) / self.scale[d])
    }
}

/// Unstandardized fused rows in the pool's canonical instance order.
pub fn raw_features(reduced: &[[f64; 2]], pool: &FramePool) -> Result<Vec<[f64; FEATURE_DIM]>, FusionError> {
    let instances = pool.instance_count();
    if reduced.len() != instances {
        return Err(FusionError::RowMismatch {
            rows: reduced.len(),
            instances,
        });
    }
    Ok(pool
        .instances()
        .zip(reduced)
        .map(|((_, r), e)| {
            let g = r.geometry.to_array();
            [e[0], e[1], g[0], g[1], g[2], g[3], g[4], g[5]]
        })
        .collect())
}

/// Fuses the reduced embedding with each instance's geometry and applies
/// `standardizer`. `reduced` holds one row per instance in canonical order.
pub fn fuse_features(
    reduced: &[[f64; 2]],
    pool: &FramePool,
    standardizer: &Standardizer,
) -> Result<BTreeMap<InstanceKey, FusedFeature>, FusionError> {
    let raw = raw_features(reduced, pool)?;
    pool.instances()
        .zip(raw)
        .map(|((key, _), row)| {
            let f = standardizer.apply(&row);
            if f.iter().all(|v| v.is_finite()) {
                Ok((key, FusedFeature(f)))
            } else {
                Err(FusionError::NonFinite(key))
            }
        })
        .collect()
}

/// Fits the standardizer on the pool itself, then fuses.
pub fn fuse_pool(
    reduced: &[[f64; 2]],
    pool: &FramePool,
) -> Result<(Standardizer, BTreeMap<InstanceKey, FusedFeature>), FusionError> {
    let standardizer = Standardizer::fit(&raw_features(reduced, pool)?);
    let fused = fuse_features(reduced, pool, &standardizer)?;
    Ok((standardizer, fused))
}
