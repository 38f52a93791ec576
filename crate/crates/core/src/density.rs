//! Per-class Gaussian mixtures over fused features.
//!
//! Fits are a deterministic function of the multiset of rows and the seed:
//! rows are sorted lexicographically before k-means++ draws its centers, and
//! every accumulation runs over that canonical order.

use std::cmp::Ordering;
use std::f64::consts::PI;

use nalgebra::SMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::FusedFeature;
use crate::rng;
use crate::FEATURE_DIM;

const D: usize = FEATURE_DIM;

type Row = [f64; D];
type Cov = [[f64; D]; D];

/// Smallest density ever reported; keeps far-tail densities strictly positive
/// where `exp` of the log-density would underflow.
pub const TINY_DENSITY: f64 = 4.9406564584124654e-324;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    pub components: usize,
    pub reg_covar: f64,
    pub max_iter: usize,
    /// Convergence threshold on the change of average log-likelihood.
    pub tol: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            components: 10,
            reg_covar: 1e-2,
            max_iter: 200,
            tol: 1e-4,
        }
    }
}

impl GmmConfig {
    pub fn validate(&self) -> Result<(), DensityError> {
        if self.components == 0 {
            return Err(DensityError::InvalidConfig("components must be at least 1".into()));
        }
        if !(self.reg_covar > 0.0 && self.reg_covar.is_finite()) {
            return Err(DensityError::InvalidConfig("reg_covar must be positive".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(DensityError::InvalidConfig("tol must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DensityError {
    #[error("no data")]
    Empty,
    #[error("mixture fitting needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("row {0} contains a non-finite value")]
    NonFinite(usize),
    #[error("invalid mixture configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid mixture model: {0}")]
    InvalidModel(String),
}

/// Cholesky factor and normalizer of one component.
#[derive(Clone, Debug, PartialEq)]
struct Factor {
    lower: Cov,
    /// log of (2 pi)^{-d/2} |Sigma|^{-1/2}
    log_norm: f64,
}

impl Factor {
    fn new(cov: &Cov) -> Option<Self> {
        let m = SMatrix::<f64, D, D>::from_fn(|i, j| cov[i][j]);
        let chol = m.cholesky()?;
        let l = chol.l();
        let lower: Cov = std::array::from_fn(|i| std::array::from_fn(|j| l[(i, j)]));
        let log_det_half: f64 = (0..D).map(|i| lower[i][i].ln()).sum();
        Some(Self {
            lower,
            log_norm: -0.5 * D as f64 * (2.0 * PI).ln() - log_det_half,
        })
    }

    /// log N(x; mean, L L^T) via forward substitution.
    fn log_density(&self, x: &Row, mean: &Row) -> f64 {
        let mut z = [0.0; D];
        let mut maha = 0.0;
        for i in 0..D {
            let mut s = x[i] - mean[i];
            for k in 0..i {
                s -= self.lower[i][k] * z[k];
            }
            z[i] = s / self.lower[i][i];
            maha += z[i] * z[i];
        }
        self.log_norm - 0.5 * maha
    }
}

/// Gaussian mixture with full covariances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmRepr", into = "GmmRepr")]
pub struct GmmModel {
    weights: Vec<f64>,
    means: Vec<Row>,
    covariances: Vec<Cov>,
    reg_covar: f64,
    fitted_on: usize,
    seed: u64,
    factors: Vec<Factor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GmmRepr {
    weights: Vec<f64>,
    means: Vec<Row>,
    covariances: Vec<Cov>,
    reg_covar: f64,
    fitted_on: usize,
    seed: u64,
}

impl TryFrom<GmmRepr> for GmmModel {
    type Error = DensityError;

    fn try_from(r: GmmRepr) -> Result<Self, Self::Error> {
        GmmModel::from_parts(r.weights, r.means, r.covariances, r.reg_covar, r.fitted_on, r.seed)
    }
}

impl From<GmmModel> for GmmRepr {
    fn from(m: GmmModel) -> Self {
        GmmRepr {
            weights: m.weights,
            means: m.means,
            covariances: m.covariances,
            reg_covar: m.reg_covar,
            fitted_on: m.fitted_on,
            seed: m.seed,
        }
    }
}

impl GmmModel {
    /// Builds a model from explicit parameters; every covariance must be
    /// symmetric positive definite and the weights must sum to 1.
    pub fn from_parts(
        weights: Vec<f64>,
        means: Vec<Row>,
        covariances: Vec<Cov>,
        reg_covar: f64,
        fitted_on: usize,
        seed: u64,
    ) -> Result<Self, DensityError> {
        let invalid = |m: String| Err(DensityError::InvalidModel(m));
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return invalid(format!(
                "{k} weights, {} means, {} covariances",
                means.len(),
                covariances.len()
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return invalid("weights must be finite and nonnegative".into());
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return invalid(format!("weights sum to {total}"));
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("non-finite mean".into());
        }
        let mut factors = Vec::with_capacity(k);
        for (c, cov) in covariances.iter().enumerate() {
            for i in 0..D {
                for j in 0..i {
                    if (cov[i][j] - cov[j][i]).abs() > 1e-12 * (1.0 + cov[i][j].abs()) {
                        return invalid(format!("covariance {c} is not symmetric"));
                    }
                }
            }
            match Factor::new(cov) {
                Some(f) => factors.push(f),
                None => return invalid(format!("covariance {c} is not positive definite")),
            }
        }
        Ok(Self {
            weights,
            means,
            covariances,
            reg_covar,
            fitted_on,
            seed,
            factors,
        })
    }

    /// One component with covariance `reg_covar * I`.
    pub fn isotropic(mean: Row, reg_covar: f64, fitted_on: usize) -> Self {
        let cov: Cov = std::array::from_fn(|i| std::array::from_fn(|j| if i == j { reg_covar } else { 0.0 }));
        Self::from_parts(vec![1.0], vec![mean], vec![cov], reg_covar, fitted_on, 0)
            .expect("isotropic covariance is positive definite")
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Row] {
        &self.means
    }

    pub fn covariances(&self) -> &[Cov] {
        &self.covariances
    }

    pub fn reg_covar(&self) -> f64 {
        self.reg_covar
    }

    pub fn fitted_on(&self) -> usize {
        self.fitted_on
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Log-density by log-sum-exp over components.
    pub fn log_pdf(&self, x: &Row) -> f64 {
        let mut terms = [0.0; 64];
        let mut heap;
        let terms: &mut [f64] = if self.weights.len() <= terms.len() {
            &mut terms[..self.weights.len()]
        } else {
            heap = vec![0.0; self.weights.len()];
            &mut heap
        };
        for (k, t) in terms.iter_mut().enumerate() {
            *t = self.weights[k].ln() + self.factors[k].log_density(x, &self.means[k]);
        }
        log_sum_exp(terms)
    }

    /// Mixture density, floored at [`TINY_DENSITY`].
    pub fn pdf(&self, x: &Row) -> f64 {
        self.log_pdf(x).exp().max(TINY_DENSITY)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Anything that can answer a density query in fused-feature space.
pub trait Density {
    fn density(&self, f: &FusedFeature) -> f64;
}

impl Density for GmmModel {
    fn density(&self, f: &FusedFeature) -> f64 {
        self.pdf(f.values())
    }
}

/// Density of one class in one pool side (labeled or unlabeled).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ClassDensity {
    /// No instances of the class: the density is zero everywhere.
    Empty,
    Model(GmmModel),
}

impl Density for ClassDensity {
    fn density(&self, f: &FusedFeature) -> f64 {
        match self {
            ClassDensity::Empty => 0.0,
            ClassDensity::Model(m) => m.density(f),
        }
    }
}

/// Fits the density of one class. Fewer than two points fall back to an
/// isotropic single component at the available point.
pub fn fit_class_density(points: &[Row], config: &GmmConfig, seed: u64) -> Result<(ClassDensity, Vec<String>), DensityError> {
    match points.len() {
        0 => Ok((ClassDensity::Empty, vec!["no instances; density is zero".into()])),
        1 => Ok((
            ClassDensity::Model(GmmModel::isotropic(points[0], config.reg_covar, 1)),
            vec!["single instance; isotropic fallback".into()],
        )),
        _ => {
            let fit = gmm_fit(points, config, seed)?;
            Ok((ClassDensity::Model(fit.model), fit.warnings))
        }
    }
}

/// Discrepancy `p_U(f) - p_L(f)`.
pub fn dd_score<U: Density + ?Sized, L: Density + ?Sized>(unlabeled: &U, labeled: &L, f: &FusedFeature) -> f64 {
    unlabeled.density(f) - labeled.density(f)
}

/// Novelty `-p_L(f)`.
pub fn nov_score<L: Density + ?Sized>(labeled: &L, f: &FusedFeature) -> f64 {
    -labeled.density(f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KmeansInit {
    pub centers: Vec<Row>,
    /// Fewer points than requested centers; trailing centers are duplicates.
    pub degenerate: bool,
}

fn lex_cmp(a: &Row, b: &Row) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn sq_dist(a: &Row, b: &Row) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_rows(data: &[Row]) -> Result<(), DensityError> {
    if data.is_empty() {
        return Err(DensityError::Empty);
    }
    match data.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        Some(i) => Err(DensityError::NonFinite(i)),
        None => Ok(()),
    }
}

fn canonical(data: &[Row]) -> Vec<Row> {
    let mut rows = data.to_vec();
    rows.sort_by(lex_cmp);
    rows
}

/// k-means++ seeding: first center uniform, each next one drawn with
/// probability proportional to the squared distance to the nearest chosen
/// center.
pub fn kmeanspp_init(data: &[Row], k: usize, seed: u64) -> Result<KmeansInit, DensityError> {
    check_rows(data)?;
    let rows = canonical(data);
    Ok(kmeanspp_sorted(&rows, k.max(1), seed))
}

fn kmeanspp_sorted(rows: &[Row], k: usize, seed: u64) -> KmeansInit {
    let n = rows.len();
    if n < k {
        let centers = (0..k).map(|i| rows[i.min(n - 1)]).collect();
        return KmeansInit { centers, degenerate: true };
    }
    let mut rng = rng::seeded(seed);
    let mut centers = Vec::with_capacity(k);
    centers.push(rows[rng.random_range(0..n)]);
    let mut nearest: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in nearest.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            chosen.unwrap_or_else(|| nearest.iter().rposition(|&d| d > 0.0).unwrap_or(n - 1))
        } else {
            rng.random_range(0..n)
        };
        let c = rows[pick];
        for (d, r) in nearest.iter_mut().zip(rows) {
            *d = d.min(sq_dist(r, &c));
        }
        centers.push(c);
    }
    KmeansInit {
        centers,
        degenerate: false,
    }
}

/// Result of an EM fit.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Average log-likelihood after every E-step, starting from the
    /// k-means++ initialization.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// EM for a full-covariance mixture. `reg_covar` is added to every
/// covariance diagonal in every M-step.
pub fn gmm_fit(data: &[Row], config: &GmmConfig, seed: u64) -> Result<GmmFit, DensityError> {
    config.validate()?;
    check_rows(data)?;
    let n = data.len();
    if n < 2 {
        return Err(DensityError::TooFewPoints(n));
    }
    let mut warnings = Vec::new();
    let k = if config.components > n {
        let msg = format!("{} components requested for {n} points; using {n}", config.components);
        log::debug!("{msg}");
        warnings.push(msg);
        n
    } else {
        config.components
    };

    let rows = canonical(data);
    let init = kmeanspp_sorted(&rows, k, seed);

    // Hard assignment to the nearest seed center starts the first M-step.
    let mut resp = vec![0.0; n * k];
    let mut point_score = vec![0.0; n];
    for (i, r) in rows.iter().enumerate() {
        let (best, dist) = init
            .centers
            .iter()
            .enumerate()
            .map(|(c, center)| (c, sq_dist(r, center)))
            .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
        resp[i * k + best] = 1.0;
        point_score[i] = -dist;
    }

    let mut params = m_step(&rows, &resp, k, config.reg_covar, &point_score, &mut warnings);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut log_prob = vec![0.0; n * k];
    for iter in 0..=config.max_iter {
        let factors = match params
            .covariances
            .iter()
            .map(Factor::new)
            .collect::<Option<Vec<_>>>()
        {
            Some(f) => f,
            None => return Err(DensityError::InvalidModel("covariance lost positive definiteness".into())),
        };
        let log_w: Vec<f64> = params.weights.iter().map(|w| w.ln()).collect();
        let mut total = 0.0;
        for (i, r) in rows.iter().enumerate() {
            let lp = &mut log_prob[i * k..(i + 1) * k];
            for c in 0..k {
                lp[c] = log_w[c] + factors[c].log_density(r, &params.means[c]);
            }
            let lse = log_sum_exp(lp);
            point_score[i] = lse;
            total += lse;
            for (c, v) in lp.iter().enumerate() {
                resp[i * k + c] = (v - lse).exp();
            }
        }
        let avg = total / n as f64;
        let change = trace.last().map(|prev| avg - prev);
        trace.push(avg);
        if change.is_some_and(|d: f64| d.abs() < config.tol) {
            converged = true;
            break;
        }
        if iter == config.max_iter {
            break;
        }
        params = m_step(&rows, &resp, k, config.reg_covar, &point_score, &mut warnings);
    }
    if !converged {
        warnings.push(format!("EM did not converge in {} iterations", config.max_iter));
    }

    let model = GmmModel::from_parts(params.weights, params.means, params.covariances, config.reg_covar, n, seed)?;
    Ok(GmmFit {
        model,
        log_likelihood: trace,
        converged,
        warnings,
    })
}

struct Params {
    weights: Vec<f64>,
    means: Vec<Row>,
    covariances: Vec<Cov>,
}

/// Weighted moments per component. A component whose responsibility mass
/// falls below `1e-8 * n` is restarted at the lowest-scoring point with
/// covariance `reg * I` and unit mass.
fn m_step(rows: &[Row], resp: &[f64], k: usize, reg: f64, point_score: &[f64], warnings: &mut Vec<String>) -> Params {
    let n = rows.len();
    let mut mass = vec![0.0; k];
    let mut means = vec![[0.0; D]; k];
    for (i, r) in rows.iter().enumerate() {
        for c in 0..k {
            let w = resp[i * k + c];
            mass[c] += w;
            for d in 0..D {
                means[c][d] += w * r[d];
            }
        }
    }
    let mut covariances = vec![[[0.0; D]; D]; k];
    let floor = 1e-8 * n as f64;
    let mut collapsed = vec![false; k];
    for c in 0..k {
        if mass[c] < floor {
            collapsed[c] = true;
            continue;
        }
        for d in 0..D {
            means[c][d] /= mass[c];
        }
    }
    for (i, r) in rows.iter().enumerate() {
        for c in 0..k {
            if collapsed[c] {
                continue;
            }
            let w = resp[i * k + c];
            if w == 0.0 {
                continue;
            }
            let mut diff = [0.0; D];
            for d in 0..D {
                diff[d] = r[d] - means[c][d];
            }
            let cov = &mut covariances[c];
            for a in 0..D {
                let wa = w * diff[a];
                for b in 0..=a {
                    cov[a][b] += wa * diff[b];
                }
            }
        }
    }
    let worst = point_score
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc })
        .0;
    for c in 0..k {
        let cov = &mut covariances[c];
        if collapsed[c] {
            warnings.push(format!("component {c} collapsed; restarted at point {worst}"));
            means[c] = rows[worst];
            mass[c] = 1.0;
            *cov = [[0.0; D]; D];
        } else {
            for a in 0..D {
                for b in 0..=a {
                    cov[a][b] /= mass[c];
                }
            }
        }
        for a in 0..D {
            cov[a][a] += reg;
            for b in 0..a {
                cov[b][a] = cov[a][b];
            }
        }
    }
    let total: f64 = mass.iter().sum();
    let weights = mass.iter().map(|m| m / total).collect();
    Params {
        weights,
        means,
        covariances,
    }
}
