//! Naive reference implementations of the scoring kernels.
//!
//! Written for obviousness rather than speed or numerical care: linear scans
//! instead of binary searches, explicit matrix inverses, straight-line
//! formulas. Tests compare them against `ddfh-core`.

use std::collections::BTreeMap;

use ddfh_core::density::ClassDensity;
use ddfh_core::select::RoundState;
use ddfh_core::{FrameId, FusedFeature, GmmModel, InstanceKey, FEATURE_DIM};
use libm::erfc;

const D: usize = FEATURE_DIM;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile: rational approximation followed by Newton
/// steps on the CDF.
pub fn normal_quantile_oracle(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const E: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    let tail = |q: f64| {
        let q = (-2.0 * q.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((E[0] * q + E[1]) * q + E[2]) * q + E[3]) * q + 1.0)
    };
    let mut x = if p < 0.02425 {
        tail(p)
    } else if p > 1.0 - 0.02425 {
        -tail(1.0 - p)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    for _ in 0..3 {
        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        // work on the smaller tail to keep the residual accurate
        let err = if x < 0.0 {
            normal_cdf(x) - p
        } else {
            (1.0 - p) - normal_cdf(-x)
        };
        x -= err / pdf;
    }
    x
}

/// Quantile transform of `x` against `reference`, by counting.
pub fn qt_oracle(reference: &[f64], x: f64, clip: f64) -> f64 {
    let n = reference.len() as f64;
    let below = reference.iter().filter(|v| **v < x).count();
    let equal = reference.iter().filter(|v| **v == x).count();
    let above = reference.len() - below - equal;
    let level = if equal > 0 {
        // average of the ranks below+1 ..= below+equal, shifted by one half
        (below as f64 + (equal as f64 + 1.0) / 2.0 - 0.5) / n
    } else if below == 0 {
        clip
    } else if above == 0 {
        1.0 - clip
    } else {
        let a = reference.iter().copied().filter(|v| *v < x).fold(f64::NEG_INFINITY, f64::max);
        let b = reference.iter().copied().filter(|v| *v > x).fold(f64::INFINITY, f64::min);
        (below as f64 - 0.5 + (x - a) / (b - a)) / n
    };
    normal_quantile_oracle(level.max(clip).min(1.0 - clip))
}

fn row(columns: &[[f64; D]], d: usize) -> Vec<f64> {
    columns.iter().map(|c| c[d]).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn population_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

/// Pearson correlation of two rows; 0 if either row is constant.
pub fn pearson_pair_oracle(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let sa = population_variance(a).sqrt();
    let sb = population_variance(b).sqrt();
    if sa <= 1e-12 * ma.abs().max(1.0) || sb <= 1e-12 * mb.abs().max(1.0) {
        return 0.0;
    }
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    (cov / (sa * sb)).max(-1.0).min(1.0)
}

/// Mean Pearson correlation over all 28 pairs of the 8 feature rows.
pub fn pearson_oracle(columns: &[[f64; D]]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0;
    for a in 0..D {
        for b in a + 1..D {
            total += pearson_pair_oracle(&row(columns, a), &row(columns, b));
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Sum of the population variances of the 8 rows.
pub fn variance_oracle(columns: &[[f64; D]]) -> f64 {
    (0..D).map(|d| population_variance(&row(columns, d))).sum()
}

/// `(s_var, s_cor)` of the concatenated frame and labeled columns.
pub fn heterogeneity_oracle(frame: &[[f64; D]], labeled: &[[f64; D]]) -> (f64, f64) {
    let all: Vec<[f64; D]> = frame.iter().chain(labeled).copied().collect();
    let s_cor = 1.0 - pearson_oracle(&all).abs();
    (variance_oracle(&all), s_cor.max(0.0).min(1.0))
}

/// Determinant and inverse by Gauss-Jordan elimination with partial pivoting.
pub fn invert(m: &[[f64; D]; D]) -> (f64, [[f64; D]; D]) {
    let mut a = *m;
    let mut inv = [[0.0; D]; D];
    for (i, r) in inv.iter_mut().enumerate() {
        r[i] = 1.0;
    }
    let mut det = 1.0;
    for col in 0..D {
        let pivot = (col..D)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if pivot != col {
            a.swap(pivot, col);
            inv.swap(pivot, col);
            det = -det;
        }
        let p = a[col][col];
        det *= p;
        for k in 0..D {
            a[col][k] /= p;
            inv[col][k] /= p;
        }
        for r in 0..D {
            if r != col {
                let f = a[r][col];
                for k in 0..D {
                    a[r][k] -= f * a[col][k];
                    inv[r][k] -= f * inv[col][k];
                }
            }
        }
    }
    (det, inv)
}

/// Density of a multivariate normal, written out term by term.
pub fn gaussian_pdf_oracle(mean: &[f64; D], cov: &[[f64; D]; D], x: &[f64; D]) -> f64 {
    let (det, inv) = invert(cov);
    let diff: Vec<f64> = (0..D).map(|d| x[d] - mean[d]).collect();
    let mut quad = 0.0;
    for i in 0..D {
        for j in 0..D {
            quad += diff[i] * inv[i][j] * diff[j];
        }
    }
    (-0.5 * quad).exp() / ((2.0 * std::f64::consts::PI).powi(D as i32) * det).sqrt()
}

/// Mixture density as a weighted sum of component densities.
pub fn gmm_pdf_oracle(model: &GmmModel, x: &[f64; D]) -> f64 {
    (0..model.components())
        .map(|k| model.weights()[k] * gaussian_pdf_oracle(&model.means()[k], &model.covariances()[k], x))
        .sum()
}

pub fn class_density_oracle(density: &ClassDensity, x: &[f64; D]) -> f64 {
    match density {
        ClassDensity::Empty => 0.0,
        ClassDensity::Model(m) => gmm_pdf_oracle(m, x),
    }
}

/// Entropy of the softmax of `sums`, computed directly.
pub fn entropy_oracle(sums: &[f64]) -> f64 {
    let z: f64 = sums.iter().map(|s| s.exp()).sum();
    let mut h = 0.0;
    for s in sums {
        let p = s.exp() / z;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

pub fn frame_i_dd_oracle(instances: &[(f64, f64)], dd_reference: &[f64], nov_reference: &[f64], clip: f64) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &(dd, nov) in instances {
        total += qt_oracle(dd_reference, dd, clip);
        total += qt_oracle(nov_reference, nov, clip);
    }
    total / instances.len() as f64
}

pub fn frame_i_fh_oracle(
    present: &[(f64, f64)],
    var_reference: &[f64],
    cor_reference: &[f64],
    class_count: usize,
    clip: f64,
) -> f64 {
    let mut total = 0.0;
    for &(v, c) in present {
        total += qt_oracle(var_reference, v, clip) * qt_oracle(cor_reference, c, clip);
    }
    total / class_count as f64
}

pub fn frame_i_total_oracle(i_dd: f64, i_fh: f64, i_cb: f64) -> f64 {
    i_dd * i_cb + i_fh * i_cb
}

/// Frame score recomputed from scratch.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleScore {
    pub frame_id: FrameId,
    pub i_dd: f64,
    pub i_fh: f64,
    pub i_cb: f64,
    pub i_total: f64,
}

/// Sample-standard-deviation z-scoring of `[reduced | geometry]` rows.
pub fn fused_features_oracle(state: &RoundState) -> BTreeMap<InstanceKey, FusedFeature> {
    let keys: Vec<InstanceKey> = state.pool.instances().map(|(k, _)| k).collect();
    let raw: Vec<[f64; D]> = state
        .pool
        .instances()
        .zip(&state.reduced)
        .map(|((_, r), e)| {
            let g = &r.geometry;
            [e[0], e[1], g.length, g.width, g.height, g.volume, g.rotation, g.point_density]
        })
        .collect();
    let n = raw.len() as f64;
    let mut out = vec![[0.0; D]; raw.len()];
    for d in 0..D {
        let col = row(&raw, d);
        let m = mean(&col);
        let var = if raw.len() > 1 {
            col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let biggest = col.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
        let sd = if var.sqrt() > 1e-12 * biggest.max(1.0) { var.sqrt() } else { 1.0 };
        for (i, x) in col.iter().enumerate() {
            out[i][d] = (x - m) / sd;
        }
    }
    keys.into_iter().zip(out).map(|(k, v)| (k, FusedFeature(v))).collect()
}

/// Straight-line recomposition of the whole scoring pipeline from the
/// reduced coordinates and fitted densities of a prepared round.
pub fn pipeline_oracle(state: &RoundState, clip: f64) -> Vec<OracleScore> {
    let features = fused_features_oracle(state);
    let c = state.class_count;
    let pool = &state.pool;

    let mut labeled_cols: Vec<Vec<[f64; D]>> = vec![Vec::new(); c];
    for (key, r) in pool.instances() {
        if pool.is_labeled(&key.frame_id) {
            labeled_cols[r.class_id].push(features[&key].0);
        }
    }

    struct Raw {
        id: FrameId,
        instances: Vec<(f64, f64)>,
        present: Vec<(f64, f64)>,
        sums: Vec<f64>,
    }
    let mut raws = Vec::new();
    for id in &state.candidates {
        let records = pool.frame(id).unwrap_or(&[]);
        let mut instances = Vec::new();
        let mut cols: Vec<Vec<[f64; D]>> = vec![Vec::new(); c];
        let mut sums = vec![0.0; c];
        for (slot, r) in records.iter().enumerate() {
            let f = features[&InstanceKey {
                frame_id: id.clone(),
                slot,
            }]
            .0;
            let pu = class_density_oracle(&state.unlabeled_density[r.class_id], &f);
            let pl = class_density_oracle(&state.labeled_density[r.class_id], &f);
            instances.push((pu - pl, -pl));
            cols[r.class_id].push(f);
            sums[r.class_id] += r.confidence;
        }
        let mut present = Vec::new();
        for k in 0..c {
            if cols[k].is_empty() {
                continue;
            }
            if cols[k].len() + labeled_cols[k].len() < 2 {
                present.push((0.0, 1.0));
            } else {
                present.push(heterogeneity_oracle(&cols[k], &labeled_cols[k]));
            }
        }
        raws.push(Raw {
            id: id.clone(),
            instances,
            present,
            sums,
        });
    }

    let dd_ref: Vec<f64> = raws.iter().flat_map(|r| r.instances.iter().map(|p| p.0)).collect();
    let nov_ref: Vec<f64> = raws.iter().flat_map(|r| r.instances.iter().map(|p| p.1)).collect();
    let var_ref: Vec<f64> = raws.iter().flat_map(|r| r.present.iter().map(|p| p.0)).collect();
    let cor_ref: Vec<f64> = raws.iter().flat_map(|r| r.present.iter().map(|p| p.1)).collect();

    raws.into_iter()
        .map(|r| {
            let i_dd = frame_i_dd_oracle(&r.instances, &dd_ref, &nov_ref, clip);
            let i_fh = if r.present.is_empty() {
                0.0
            } else {
                frame_i_fh_oracle(&r.present, &var_ref, &cor_ref, c, clip)
            };
            let i_cb = if c > 1 { entropy_oracle(&r.sums) } else { 0.0 };
            OracleScore {
                frame_id: r.id,
                i_dd,
                i_fh,
                i_cb,
                i_total: frame_i_total_oracle(i_dd, i_fh, i_cb),
            }
        })
        .collect()
}
