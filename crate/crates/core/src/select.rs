//! One annotation round: reduce, fuse, fit densities, score, rank, cut.
//!
//! The shared stages ([`prepare_round`]) run once per round; per-frame
//! scoring and aggregation are pure functions of their output, which is what
//! lets the harness audit every intermediate value.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{fit_class_density, ClassDensity, DensityError, GmmConfig};
use crate::density::{dd_score, nov_score};
use crate::fusion::{fuse_pool, FusedFeature, FusionError, Standardizer};
use crate::records::{FrameId, FramePool, InstanceKey};
use crate::reduce::{tsne_reduce, ReduceError, TsneConfig, TsneDiagnostics};
use crate::rng::{self, substream_seed};
use crate::scoring::{
    frame_i_cb, frame_i_dd, frame_i_fh, heterogeneity_from_moments, ClassDiagnostics, FrameScore, Moments,
    QuantileMap, ScoringError,
};
use crate::{ENGINE_VERSION, FEATURE_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetMode {
    /// Budget counts frames.
    Frames,
    /// Budget counts detected instances (boxes).
    Boxes,
}

impl std::str::FromStr for BudgetMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "frames" => Ok(BudgetMode::Frames),
            "boxes" => Ok(BudgetMode::Boxes),
            other => Err(format!("unknown budget mode `{other}` (expected frames or boxes)")),
        }
    }
}

/// Settings of one selection round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundConfig {
    pub budget_mode: BudgetMode,
    pub budget: usize,
    /// Every `candidate_stride`-th unlabeled frame (canonical order) is a
    /// candidate this round; the others sit the round out.
    pub candidate_stride: usize,
    /// Detections below this confidence are dropped before scoring.
    pub confidence_threshold: f64,
    pub seed: u64,
    pub tsne: TsneConfig,
    pub gmm: GmmConfig,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            budget_mode: BudgetMode::Frames,
            budget: 10,
            candidate_stride: 1,
            confidence_threshold: 0.1,
            seed: 0,
            tsne: TsneConfig::default(),
            gmm: GmmConfig::default(),
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<(), SelectError> {
        let bad = |m: &str| Err(SelectError::Config(m.to_owned()));
        if self.budget == 0 {
            return bad("budget must be at least 1");
        }
        if self.candidate_stride == 0 {
            return bad("candidate_stride must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return bad("confidence_threshold must lie in [0, 1]");
        }
        self.tsne
            .validate()
            .map_err(|e| SelectError::Config(e.to_string()))?;
        self.gmm
            .validate()
            .map_err(|e| SelectError::Config(e.to_string()))?;
        Ok(())
    }

    /// t-SNE settings of a round, seeded from the run seed.
    pub fn tsne_config(&self) -> TsneConfig {
        TsneConfig {
            seed: substream_seed(self.seed, "reduce"),
            ..self.tsne.clone()
        }
    }

    /// Short stable digest of the full configuration, seed included.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(&(self, self.seed)).expect("config serializes");
        format!("{:016x}", rng::fnv1a_bytes(json.as_bytes()))
    }
}

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("config: {0}")]
    Config(String),
    #[error("no unlabeled candidate frames")]
    NoCandidates,
    #[error("reduce: {0}")]
    Reduce(#[from] ReduceError),
    #[error("fuse: {0}")]
    Fusion(#[from] FusionError),
    #[error("density ({side} class {class}): {source}")]
    Density {
        side: &'static str,
        class: usize,
        source: DensityError,
    },
    #[error("normalize {set}: {source}")]
    Normalize { set: &'static str, source: ScoringError },
    #[error("frame `{0}` is not an unlabeled frame of the pool")]
    NotACandidate(FrameId),
}

/// Memo of the last reduction. The reduction is a pure function of the
/// included instances and the t-SNE settings, so a round whose union pool is
/// unchanged (as in frozen-feature simulations) reuses it.
#[derive(Clone, Debug, Default)]
pub struct ReductionCache {
    entry: Option<(ReductionKey, Vec<[f64; 2]>, TsneDiagnostics)>,
}

#[derive(Clone, Debug, PartialEq)]
struct ReductionKey {
    frames: Vec<(FrameId, usize)>,
    config: TsneConfig,
}

impl ReductionCache {
    pub fn reduce(
        &mut self,
        pool: &FramePool,
        config: &TsneConfig,
    ) -> Result<(Vec<[f64; 2]>, TsneDiagnostics), ReduceError> {
        let key = ReductionKey {
            frames: pool.frames().iter().map(|(id, r)| (id.clone(), r.len())).collect(),
            config: config.clone(),
        };
        if let Some((k, y, d)) = &self.entry {
            if *k == key {
                return Ok((y.clone(), d.clone()));
            }
        }
        let rows: Vec<Vec<f64>> = pool.instances().map(|(_, r)| r.embedding.clone()).collect();
        let (y, d) = tsne_reduce(&rows, config)?;
        self.entry = Some((key, y.clone(), d.clone()));
        Ok((y, d))
    }
}

/// Output of the shared, sequential stages of a round.
#[derive(Clone, Debug)]
pub struct RoundState {
    pub class_count: usize,
    pub round_index: usize,
    /// Confidence-filtered pool restricted to labeled frames and candidates.
    pub pool: FramePool,
    /// Candidate frames in canonical order.
    pub candidates: Vec<FrameId>,
    pub reduced: Vec<[f64; 2]>,
    pub tsne: TsneDiagnostics,
    pub standardizer: Standardizer,
    pub features: BTreeMap<InstanceKey, FusedFeature>,
    /// Per-class density of labeled instances.
    pub labeled_density: Vec<ClassDensity>,
    /// Per-class density of candidate instances.
    pub unlabeled_density: Vec<ClassDensity>,
    pub warnings: Vec<String>,
}

/// Reduced and standardized features of every instance in a pool.
#[derive(Clone, Debug)]
pub struct FusedPool {
    pub reduced: Vec<[f64; 2]>,
    pub tsne: TsneDiagnostics,
    pub standardizer: Standardizer,
    pub features: BTreeMap<InstanceKey, FusedFeature>,
}

/// Reduces the embeddings of `pool` jointly and fuses them with geometry.
pub fn reduce_and_fuse(pool: &FramePool, config: &RoundConfig, cache: &mut ReductionCache) -> Result<FusedPool, SelectError> {
    let (reduced, tsne) = cache.reduce(pool, &config.tsne_config())?;
    let (standardizer, features) = fuse_pool(&reduced, pool)?;
    Ok(FusedPool {
        reduced,
        tsne,
        standardizer,
        features,
    })
}

/// Unlabeled frames that compete this round, after striding.
pub fn candidate_frames(pool: &FramePool, stride: usize) -> Vec<FrameId> {
    pool.unlabeled().step_by(stride.max(1)).cloned().collect()
}

pub fn prepare_round(pool: &FramePool, config: &RoundConfig, cache: &mut ReductionCache) -> Result<RoundState, SelectError> {
    config.validate()?;
    let filtered = pool.filter_by_confidence(config.confidence_threshold);
    let candidates = candidate_frames(&filtered, config.candidate_stride);
    if candidates.is_empty() {
        return Err(SelectError::NoCandidates);
    }
    let round_pool = filtered.restrict(filtered.labeled().iter().chain(&candidates));

    let fused = reduce_and_fuse(&round_pool, config, cache)?;
    let (reduced, tsne, standardizer, features) = (fused.reduced, fused.tsne, fused.standardizer, fused.features);

    let c = round_pool.class_count();
    let mut labeled_points = vec![Vec::new(); c];
    let mut unlabeled_points = vec![Vec::new(); c];
    for (key, r) in round_pool.instances() {
        let f = *features[&key].values();
        if round_pool.is_labeled(&key.frame_id) {
            labeled_points[r.class_id].push(f);
        } else {
            unlabeled_points[r.class_id].push(f);
        }
    }

    let mut warnings = Vec::new();
    let mut fit_side = |side: &'static str, points: &[Vec<[f64; FEATURE_DIM]>]| -> Result<Vec<ClassDensity>, SelectError> {
        points
            .iter()
            .enumerate()
            .map(|(class, pts)| {
                let seed = substream_seed(config.seed, &format!("density/{side}/{class}"));
                let (density, notes) = fit_class_density(pts, &config.gmm, seed)
                    .map_err(|source| SelectError::Density { side, class, source })?;
                warnings.extend(notes.into_iter().map(|n| format!("{side} class {class}: {n}")));
                Ok(density)
            })
            .collect()
    };
    let labeled_density = fit_side("labeled", &labeled_points)?;
    let unlabeled_density = fit_side("unlabeled", &unlabeled_points)?;

    Ok(RoundState {
        class_count: c,
        round_index: pool.round_index(),
        pool: round_pool,
        candidates,
        reduced,
        tsne,
        standardizer,
        features,
        labeled_density,
        unlabeled_density,
        warnings,
    })
}

/// Unnormalized indicators of one candidate frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawFrameScores {
    pub frame_id: FrameId,
    /// `(s_dd, s_nov)` of each instance.
    pub instances: Vec<(f64, f64)>,
    /// All C classes; classes absent from the frame have zero instances.
    pub classes: Vec<ClassDiagnostics>,
}

impl RawFrameScores {
    /// Classes with at least one detection in the frame.
    pub fn present(&self) -> impl Iterator<Item = &ClassDiagnostics> {
        self.classes.iter().filter(|c| c.instances > 0)
    }
}

/// Discrepancy, novelty, and heterogeneity statistics of every candidate.
pub fn raw_scores(state: &RoundState) -> Vec<RawFrameScores> {
    let c = state.class_count;
    let pool = &state.pool;

    let mut labeled_moments = vec![Vec::new(); c];
    for (key, r) in pool.instances() {
        if pool.is_labeled(&key.frame_id) {
            labeled_moments[r.class_id].push(*state.features[&key].values());
        }
    }
    let labeled_moments: Vec<Moments> = labeled_moments.iter().map(|cols| Moments::of(cols)).collect();

    state
        .candidates
        .iter()
        .map(|frame_id| {
            let records = pool.frame(frame_id).unwrap_or(&[]);
            let mut per_class = vec![Vec::new(); c];
            let mut conf = vec![0.0; c];
            let instances = records
                .iter()
                .enumerate()
                .map(|(slot, r)| {
                    let key = InstanceKey {
                        frame_id: frame_id.clone(),
                        slot,
                    };
                    let f = &state.features[&key];
                    per_class[r.class_id].push(*f.values());
                    conf[r.class_id] += r.confidence;
                    let gu = &state.unlabeled_density[r.class_id];
                    let gl = &state.labeled_density[r.class_id];
                    (dd_score(gu, gl, f), nov_score(gl, f))
                })
                .collect();
            let classes = (0..c)
                .map(|class| {
                    let cols = &per_class[class];
                    let (s_var, s_cor) = if cols.is_empty() {
                        (0.0, 0.0)
                    } else {
                        // A lone instance with no labeled peers has no spread.
                        heterogeneity_from_moments(&Moments::of(cols), &labeled_moments[class]).unwrap_or((0.0, 1.0))
                    };
                    ClassDiagnostics {
                        class_id: class,
                        instances: cols.len(),
                        confidence_sum: conf[class],
                        s_var,
                        s_cor,
                    }
                })
                .collect();
            RawFrameScores {
                frame_id: frame_id.clone(),
                instances,
                classes,
            }
        })
        .collect()
}

/// Pooled reference sets the quantile maps are fitted on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSets {
    pub s_dd: Vec<f64>,
    pub s_nov: Vec<f64>,
    pub s_var: Vec<f64>,
    pub s_cor: Vec<f64>,
}

impl ReferenceSets {
    pub fn collect(raw: &[RawFrameScores]) -> Self {
        let mut sets = ReferenceSets::default();
        for frame in raw {
            for &(dd, nov) in &frame.instances {
                sets.s_dd.push(dd);
                sets.s_nov.push(nov);
            }
            for class in frame.present() {
                sets.s_var.push(class.s_var);
                sets.s_cor.push(class.s_cor);
            }
        }
        sets
    }
}

fn fit_map(set: &'static str, scores: &[f64]) -> Result<Option<QuantileMap>, SelectError> {
    if scores.is_empty() {
        return Ok(None);
    }
    QuantileMap::fit(scores)
        .map(Some)
        .map_err(|source| SelectError::Normalize { set, source })
}

/// Normalizes and aggregates raw indicators into frame scores (candidate
/// order preserved).
pub fn aggregate(raw: &[RawFrameScores], class_count: usize) -> Result<(Vec<FrameScore>, ReferenceSets), SelectError> {
    let sets = ReferenceSets::collect(raw);
    let dd = fit_map("s_dd", &sets.s_dd)?;
    let nov = fit_map("s_nov", &sets.s_nov)?;
    let var = fit_map("s_var", &sets.s_var)?;
    let cor = fit_map("s_cor", &sets.s_cor)?;

    let scores = raw
        .iter()
        .map(|frame| {
            let i_dd = match (&dd, &nov) {
                (Some(dd), Some(nov)) => frame_i_dd(&frame.instances, dd, nov),
                _ => 0.0,
            };
            let present: Vec<(f64, f64)> = frame.present().map(|c| (c.s_var, c.s_cor)).collect();
            let i_fh = match (&var, &cor) {
                (Some(var), Some(cor)) => frame_i_fh(&present, var, cor, class_count),
                _ => 0.0,
            };
            let sums: Vec<f64> = frame.classes.iter().map(|c| c.confidence_sum).collect();
            FrameScore::new(
                frame.frame_id.clone(),
                i_dd,
                i_fh,
                frame_i_cb(&sums),
                frame.instances.len(),
                frame.classes.clone(),
            )
        })
        .collect();
    Ok((scores, sets))
}

/// Audit trail of a scored round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    pub round_index: usize,
    pub candidates: usize,
    pub labeled_frames: usize,
    pub reduced_instances: usize,
    pub tsne: TsneDiagnostics,
    pub standardizer: Standardizer,
    pub reference_sets: ReferenceSets,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolScores {
    /// One score per candidate, in canonical frame order.
    pub scores: Vec<FrameScore>,
    pub diagnostics: RoundDiagnostics,
}

/// Scores every unlabeled candidate of `pool`.
pub fn score_pool(pool: &FramePool, config: &RoundConfig) -> Result<PoolScores, SelectError> {
    score_pool_cached(pool, config, &mut ReductionCache::default())
}

pub fn score_pool_cached(
    pool: &FramePool,
    config: &RoundConfig,
    cache: &mut ReductionCache,
) -> Result<PoolScores, SelectError> {
    let state = prepare_round(pool, config, cache)?;
    let raw = raw_scores(&state);
    let (scores, reference_sets) = aggregate(&raw, state.class_count)?;
    let diagnostics = RoundDiagnostics {
        round_index: state.round_index,
        candidates: state.candidates.len(),
        labeled_frames: state.pool.labeled().len(),
        reduced_instances: state.reduced.len(),
        tsne: state.tsne,
        standardizer: state.standardizer,
        reference_sets,
        warnings: state.warnings,
    };
    Ok(PoolScores { scores, diagnostics })
}

/// One frame competing in a ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedFrame {
    pub frame_id: FrameId,
    pub score: f64,
    /// Secondary key: higher wins among equal scores.
    pub tiebreak: f64,
    pub instances: usize,
    pub selected: bool,
}

/// Sorts by score descending, then tiebreak descending, then frame id
/// ascending, and marks the frames that fit the budget. Box budgets are
/// filled first-fit down the ranking; at least one frame is always taken.
pub fn rank_and_cut(mut frames: Vec<RankedFrame>, mode: BudgetMode, budget: usize) -> Vec<RankedFrame> {
    frames.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.tiebreak.total_cmp(&a.tiebreak))
            .then_with(|| a.frame_id.cmp(&b.frame_id))
    });
    for f in frames.iter_mut() {
        f.selected = false;
    }
    match mode {
        BudgetMode::Frames => {
            for f in frames.iter_mut().take(budget) {
                f.selected = true;
            }
        }
        BudgetMode::Boxes => {
            let mut spent = 0;
            for f in frames.iter_mut() {
                if spent + f.instances <= budget {
                    spent += f.instances;
                    f.selected = true;
                }
            }
            if !frames.iter().any(|f| f.selected) {
                if let Some(first) = frames.first_mut() {
                    first.selected = true;
                }
            }
        }
    }
    frames
}

/// Output of one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub engine_version: String,
    pub config_hash: String,
    pub strategy: String,
    pub round_index: usize,
    /// Selected frames in rank order.
    pub selected: Vec<FrameId>,
    pub spent_frames: usize,
    pub spent_instances: usize,
    /// Every candidate in rank order.
    pub ranking: Vec<RankedFrame>,
    /// Indicator breakdown per candidate in rank order; empty for
    /// strategies that do not compute it.
    pub frame_scores: Vec<FrameScore>,
    pub config: RoundConfig,
}

impl SelectionManifest {
    /// Builds a manifest from an already ranked and cut list.
    pub fn from_ranking(
        strategy: &str,
        round_index: usize,
        ranking: Vec<RankedFrame>,
        frame_scores: Vec<FrameScore>,
        config: &RoundConfig,
    ) -> Self {
        let selected: Vec<FrameId> = ranking.iter().filter(|f| f.selected).map(|f| f.frame_id.clone()).collect();
        let spent_instances = ranking.iter().filter(|f| f.selected).map(|f| f.instances).sum();
        Self {
            engine_version: ENGINE_VERSION.to_owned(),
            config_hash: config.digest(),
            strategy: strategy.to_owned(),
            round_index,
            spent_frames: selected.len(),
            selected,
            spent_instances,
            ranking,
            frame_scores,
            config: config.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Ranks scored candidates by total informativeness and cuts by budget.
pub fn select_topk(
    scores: &[FrameScore],
    pool: &FramePool,
    config: &RoundConfig,
) -> Result<SelectionManifest, SelectError> {
    if let Some(bad) = scores
        .iter()
        .find(|s| pool.frame(&s.frame_id).is_none() || pool.is_labeled(&s.frame_id))
    {
        return Err(SelectError::NotACandidate(bad.frame_id.clone()));
    }
    let entries = scores
        .iter()
        .map(|s| RankedFrame {
            frame_id: s.frame_id.clone(),
            score: s.i_total,
            tiebreak: s.i_cb,
            instances: s.instances,
            selected: false,
        })
        .collect();
    let ranking = rank_and_cut(entries, config.budget_mode, config.budget);
    let by_id: BTreeMap<&FrameId, &FrameScore> = scores.iter().map(|s| (&s.frame_id, s)).collect();
    let ordered = ranking.iter().map(|r| by_id[&r.frame_id].clone()).collect();
    Ok(SelectionManifest::from_ranking(
        "ddfh",
        pool.round_index(),
        ranking,
        ordered,
        config,
    ))
}

/// Scores and selects in one call.
pub fn run_round(pool: &FramePool, config: &RoundConfig) -> Result<(SelectionManifest, PoolScores), SelectError> {
    let scored = score_pool(pool, config)?;
    let manifest = select_topk(&scored.scores, pool, config)?;
    Ok((manifest, scored))
}
