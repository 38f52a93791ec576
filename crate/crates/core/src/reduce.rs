//! Exact t-SNE projection of instance embeddings to two dimensions.
//!
//! Affinities are computed on squared Euclidean distances of the raw
//! embeddings with a per-point precision calibrated to the target perplexity.
//! The layout is optimized by gradient descent with momentum and per-
//! coordinate gains, early exaggeration, and recentering after every step.
//! All loops run in a fixed order, so a given seed always produces the same
//! bits.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Number of leading iterations that use `early_exaggeration`.
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Iteration at which momentum switches from initial to final.
    pub momentum_switch: usize,
    /// Never read from config files; round pipelines derive it from the
    /// round seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 100.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<(), ReduceError> {
        let bad = |what: &str| Err(ReduceError::InvalidConfig(what.to_owned()));
        if !(self.perplexity > 0.0 && self.perplexity.is_finite()) {
            return bad("perplexity must be positive");
        }
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.early_exaggeration > 0.0 && self.early_exaggeration.is_finite()) {
            return bad("early_exaggeration must be positive");
        }
        if !(0.0..1.0).contains(&self.initial_momentum) || !(0.0..1.0).contains(&self.final_momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ReduceError {
    #[error("t-SNE needs at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("row {0} contains a non-finite value")]
    NonFinite(usize),
    #[error("row {row} has dimension {found}, expected {expected}")]
    RaggedInput { row: usize, expected: usize, found: usize },
    #[error("invalid t-SNE configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneDiagnostics {
    pub initial_kl: f64,
    pub final_kl: f64,
    pub requested_perplexity: f64,
    pub effective_perplexity: f64,
    pub perplexity_clamped: bool,
    /// Rows whose distances to all other rows were zero.
    pub degenerate_rows: usize,
    /// Rows whose precision search hit the iteration cap.
    pub unconverged_rows: usize,
    pub iterations: usize,
    pub seed: u64,
}

/// Outcome of the per-point precision search.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    /// Precision beta = 1 / (2 sigma^2).
    pub beta: f64,
    /// Conditional distribution over the given neighbors.
    pub probabilities: Vec<f64>,
    /// Shannon entropy (nats) of `probabilities`.
    pub entropy: f64,
    /// All distances were zero; beta is 1 and the distribution is uniform.
    pub degenerate: bool,
    pub converged: bool,
}

const ENTROPY_TOL: f64 = 1e-5;
const MAX_SEARCH_STEPS: usize = 100;

/// Binary search for the precision whose conditional distribution over
/// `distances` (squared, to the N - 1 other points) has entropy
/// `ln(perplexity)`.
pub fn perplexity_calibration(distances: &[f64], perplexity: f64) -> Calibration {
    let n = distances.len();
    if n == 0 {
        return Calibration {
            beta: 1.0,
            probabilities: Vec::new(),
            entropy: 0.0,
            degenerate: true,
            converged: false,
        };
    }
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let max = distances.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Calibration {
            beta: 1.0,
            probabilities: vec![1.0 / n as f64; n],
            entropy: (n as f64).ln(),
            degenerate: true,
            converged: false,
        };
    }

    let target = perplexity.ln();
    let mut probabilities = vec![0.0; n];
    let mut beta = 1.0;
    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    let mut entropy = 0.0;
    let mut converged = false;
    for _ in 0..MAX_SEARCH_STEPS {
        entropy = conditional(distances, min, beta, &mut probabilities);
        let gap = entropy - target;
        if gap.abs() < ENTROPY_TOL {
            converged = true;
            break;
        }
        if gap > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = 0.5 * (beta + lo);
        }
    }
    if !converged {
        entropy = conditional(distances, min, beta, &mut probabilities);
    }
    Calibration {
        beta,
        probabilities,
        entropy,
        degenerate: false,
        converged,
    }
}

/// Fills `p` with the normalized Gaussian kernel at precision `beta` and
/// returns its entropy. Distances are shifted by their minimum, which leaves
/// the normalized distribution unchanged and keeps the largest term at 1.
fn conditional(distances: &[f64], min: f64, beta: f64, p: &mut [f64]) -> f64 {
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (pj, &d) in p.iter_mut().zip(distances) {
        let shifted = d - min;
        *pj = (-beta * shifted).exp();
        sum += *pj;
        weighted += shifted * *pj;
    }
    for pj in p.iter_mut() {
        *pj /= sum;
    }
    sum.ln() + beta * weighted / sum
}

/// Largest usable perplexity for `n` points.
pub fn max_perplexity(n: usize) -> f64 {
    (n as f64 - 1.0) / 3.0
}

/// Symmetric joint affinities of a point set. Only the strict upper
/// triangle is stored, packed row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct Affinities {
    n: usize,
    upper: Vec<f64>,
    pub effective_perplexity: f64,
    pub perplexity_clamped: bool,
    pub degenerate_rows: usize,
    pub unconverged_rows: usize,
}

fn row_offset(n: usize, i: usize) -> usize {
    i * n - i * (i + 1) / 2
}

impl Affinities {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Less => self.upper[row_offset(self.n, i) + j - i - 1],
            std::cmp::Ordering::Greater => self.get(j, i),
        }
    }

    /// Entries `p_ij` for `j > i`.
    fn row_upper(&self, i: usize) -> &[f64] {
        let off = row_offset(self.n, i);
        &self.upper[off..off + self.n - i - 1]
    }

    pub fn total(&self) -> f64 {
        2.0 * self.upper.iter().sum::<f64>()
    }
}

fn validate_rows(rows: &[Vec<f64>]) -> Result<usize, ReduceError> {
    if rows.len() < 4 {
        return Err(ReduceError::TooFewPoints(rows.len()));
    }
    let dim = rows[0].len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(ReduceError::RaggedInput {
                row: i,
                expected: dim,
                found: r.len(),
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(ReduceError::NonFinite(i));
        }
    }
    Ok(dim)
}

fn sq_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Joint affinities `p_ij = (p_j|i + p_i|j) / 2N` of `rows`. A perplexity
/// at or above `(N - 1) / 3` is clamped to that bound.
pub fn joint_affinities(rows: &[Vec<f64>], perplexity: f64) -> Result<Affinities, ReduceError> {
    validate_rows(rows)?;
    let n = rows.len();
    let limit = max_perplexity(n);
    let clamped = perplexity >= limit;
    let effective = if clamped { limit } else { perplexity };
    if clamped {
        log::warn!("perplexity {perplexity} too large for {n} points, using {effective}");
    }

    let mut cond = vec![0.0; n * n];
    let mut degenerate_rows = 0;
    let mut unconverged_rows = 0;
    let mut neighbors = Vec::with_capacity(n - 1);
    for i in 0..n {
        neighbors.clear();
        neighbors.extend((0..n).filter(|&j| j != i).map(|j| sq_euclidean(&rows[i], &rows[j])));
        let cal = perplexity_calibration(&neighbors, effective);
        degenerate_rows += usize::from(cal.degenerate);
        unconverged_rows += usize::from(!cal.converged && !cal.degenerate);
        let row = &mut cond[i * n..(i + 1) * n];
        let mut probs = cal.probabilities.into_iter();
        for (j, slot) in row.iter_mut().enumerate() {
            if j != i {
                *slot = probs.next().unwrap_or(0.0);
            }
        }
    }

    let denom = 2.0 * n as f64;
    let mut upper = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            upper.push((cond[i * n + j] + cond[j * n + i]) / denom);
        }
    }
    Ok(Affinities {
        n,
        upper,
        effective_perplexity: effective,
        perplexity_clamped: clamped,
        degenerate_rows,
        unconverged_rows,
    })
}

/// KL(P || Q) where Q is the Student-t affinity of the layout `y`.
pub fn kl_divergence(p: &Affinities, y: &[[f64; 2]]) -> f64 {
    let n = p.n;
    let mut z = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            z += 2.0 / (1.0 + sq_dist(&y[i], &y[j]));
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        for (j, &pij) in ((i + 1)..n).zip(p.row_upper(i)) {
            if pij > 0.0 {
                let qij = 1.0 / (1.0 + sq_dist(&y[i], &y[j])) / z;
                kl += 2.0 * pij * (pij / qij).ln();
            }
        }
    }
    kl
}

fn sq_dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

const LANES: usize = 4;

/// Per-point force accumulators `[ax, ay, rx, ry]`: the attractive part
/// `sum_j p_ij k_ij (y_i - y_j)` and the unnormalized repulsive part
/// `sum_j k_ij^2 (y_i - y_j)`, so one pass over the pairs suffices.
type Forces = Vec<[f64; 4]>;

/// Accumulates the interactions of point `i` with every `j > i`; returns
/// the kernel row sum. Summation order is fixed (lane-wise, then lanes in
/// order), so results do not depend on the compiler's vectorization.
fn pair_pass(i: usize, y: &[[f64; 2]], p_row: &[f64], exaggeration: f64, forces: &mut Forces) -> f64 {
    let [xi, yi] = y[i];
    let m = p_row.len();
    let (head, tail) = forces.split_at_mut(i + 1);
    let tail = &mut tail[..m];
    let ys = &y[i + 1..i + 1 + m];

    let mut acc = [[0.0; LANES]; 5];
    let full = m - m % LANES;
    let chunks = p_row[..full]
        .chunks_exact(LANES)
        .zip(ys[..full].chunks_exact(LANES))
        .zip(tail[..full].chunks_exact_mut(LANES));
    for ((pc, yc), fc) in chunks {
        for l in 0..LANES {
            let dx = xi - yc[l][0];
            let dy = yi - yc[l][1];
            let k = 1.0 / (1.0 + dx * dx + dy * dy);
            let a = exaggeration * pc[l] * k;
            let r = k * k;
            acc[0][l] += k;
            acc[1][l] += a * dx;
            acc[2][l] += a * dy;
            acc[3][l] += r * dx;
            acc[4][l] += r * dy;
            let f = &mut fc[l];
            f[0] -= a * dx;
            f[1] -= a * dy;
            f[2] -= r * dx;
            f[3] -= r * dy;
        }
    }
    for t in full..m {
        let dx = xi - ys[t][0];
        let dy = yi - ys[t][1];
        let k = 1.0 / (1.0 + dx * dx + dy * dy);
        let a = exaggeration * p_row[t] * k;
        let r = k * k;
        acc[0][0] += k;
        acc[1][0] += a * dx;
        acc[2][0] += a * dy;
        acc[3][0] += r * dx;
        acc[4][0] += r * dy;
        let f = &mut tail[t];
        f[0] -= a * dx;
        f[1] -= a * dy;
        f[2] -= r * dx;
        f[3] -= r * dy;
    }
    let sum = |lanes: &[f64; LANES]| lanes.iter().sum::<f64>();
    let fi = &mut head[i];
    for d in 0..4 {
        fi[d] += sum(&acc[d + 1]);
    }
    sum(&acc[0])
}

/// Gradient of `KL(P || Q)` with `P` scaled by `exaggeration`.
fn kl_gradient(p: &Affinities, y: &[[f64; 2]], exaggeration: f64, forces: &mut Forces) -> Vec<[f64; 2]> {
    forces.iter_mut().for_each(|f| *f = [0.0; 4]);
    let mut z = 0.0;
    for i in 0..p.n {
        z += 2.0 * pair_pass(i, y, p.row_upper(i), exaggeration, forces);
    }
    forces
        .iter()
        .map(|&[ax, ay, rx, ry]| [4.0 * (ax - rx / z), 4.0 * (ay - ry / z)])
        .collect()
}

fn recenter(y: &mut [[f64; 2]]) {
    let n = y.len() as f64;
    let mx = y.iter().map(|r| r[0]).sum::<f64>() / n;
    let my = y.iter().map(|r| r[1]).sum::<f64>() / n;
    for r in y.iter_mut() {
        r[0] -= mx;
        r[1] -= my;
    }
}

/// Projects `rows` (N x D) to N x 2.
pub fn tsne_reduce(rows: &[Vec<f64>], config: &TsneConfig) -> Result<(Vec<[f64; 2]>, TsneDiagnostics), ReduceError> {
    config.validate()?;
    let p = joint_affinities(rows, config.perplexity)?;
    let n = p.n;

    let mut rng = rng::seeded(config.seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            [1e-4 * a, 1e-4 * b]
        })
        .collect();
    let initial_kl = kl_divergence(&p, &y);

    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0_f64; 2]; n];
    let mut forces: Forces = vec![[0.0; 4]; n];

    for iter in 0..config.iterations {
        let exaggeration = if iter < config.exaggeration_iterations {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < config.momentum_switch {
            config.initial_momentum
        } else {
            config.final_momentum
        };

        let grad = kl_gradient(&p, &y, exaggeration, &mut forces);
        for i in 0..n {
            for d in 0..2 {
                let g = grad[i][d];
                let gain = &mut gains[i][d];
                *gain = if (g > 0.0) != (update[i][d] > 0.0) {
                    *gain + 0.2
                } else {
                    (*gain * 0.8).max(0.01)
                };
                update[i][d] = momentum * update[i][d] - config.learning_rate * *gain * g;
                y[i][d] += update[i][d];
            }
        }
        recenter(&mut y);
    }

    let final_kl = kl_divergence(&p, &y);
    let diagnostics = TsneDiagnostics {
        initial_kl,
        final_kl,
        requested_perplexity: config.perplexity,
        effective_perplexity: p.effective_perplexity,
        perplexity_clamped: p.perplexity_clamped,
        degenerate_rows: p.degenerate_rows,
        unconverged_rows: p.unconverged_rows,
        iterations: config.iterations,
        seed: config.seed,
    };
    Ok((y, diagnostics))
}
