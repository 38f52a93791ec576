//! Multi-round annotation loop with frozen features.
//!
//! Each round a strategy ranks the unlabeled candidates, the selected frames
//! move to the labeled set, and balance and coverage metrics are recorded.
//! Nothing is retrained, so instance records never change between rounds.

use std::fmt;
use std::str::FromStr;

use ddfh_core::records::PoolError;
use ddfh_core::rng::substream;
use ddfh_core::select::{
    candidate_frames, rank_and_cut, reduce_and_fuse, score_pool_cached, select_topk, RankedFrame, ReductionCache,
    SelectError,
};
use ddfh_core::{FramePool, RoundConfig, SelectionManifest};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{class_divergence, label_entropy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Ddfh,
    Random,
    ConfEntropy,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Ddfh, Strategy::Random, Strategy::ConfEntropy];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ddfh => "ddfh",
            Strategy::Random => "random",
            Strategy::ConfEntropy => "conf_entropy",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown strategy `{s}` (expected ddfh, random or conf_entropy)"))
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error("pool update: {0}")]
    Pool(#[from] PoolError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round_index: usize,
    pub strategy: Strategy,
    pub seed: u64,
    /// Detections per class in the frames selected this round.
    pub class_counts: Vec<usize>,
    /// 0 when the selected frames hold no detections.
    pub count_entropy: f64,
    pub confidence_sums: Vec<f64>,
    pub conf_entropy: f64,
    /// Per-class labeled vs unlabeled divergence after the round.
    pub divergence: Vec<f64>,
    pub spent_frames: usize,
    pub spent_instances: usize,
}

#[derive(Clone, Debug)]
pub struct SimulationRun {
    pub strategy: Strategy,
    pub seed: u64,
    /// Divergence before the first round.
    pub initial_divergence: Vec<f64>,
    pub rounds: Vec<RoundMetrics>,
    pub manifests: Vec<SelectionManifest>,
    /// Set when the candidates ran out before the requested round count.
    pub truncated: bool,
    pub final_pool: FramePool,
}

fn baseline_manifest(
    strategy: Strategy,
    pool: &FramePool,
    config: &RoundConfig,
) -> Result<SelectionManifest, SelectError> {
    let filtered = pool.filter_by_confidence(config.confidence_threshold);
    let candidates = candidate_frames(&filtered, config.candidate_stride);
    if candidates.is_empty() {
        return Err(SelectError::NoCandidates);
    }
    let mut rng = substream(config.seed, &format!("{}/{}", strategy.name(), pool.round_index()));
    let entries = candidates
        .into_iter()
        .map(|id| {
            let records = filtered.frame(&id).unwrap_or(&[]);
            let score = match strategy {
                Strategy::Random => rng.random::<f64>(),
                _ if records.is_empty() => 0.0,
                _ => records.iter().map(|r| 1.0 - r.confidence).sum::<f64>() / records.len() as f64,
            };
            RankedFrame {
                frame_id: id,
                score,
                tiebreak: 0.0,
                instances: records.len(),
                selected: false,
            }
        })
        .collect();
    let ranking = rank_and_cut(entries, config.budget_mode, config.budget);
    Ok(SelectionManifest::from_ranking(
        strategy.name(),
        pool.round_index(),
        ranking,
        Vec::new(),
        config,
    ))
}

/// One round of `strategy` on `pool`.
pub fn select_round(
    pool: &FramePool,
    strategy: Strategy,
    config: &RoundConfig,
    cache: &mut ReductionCache,
) -> Result<SelectionManifest, SelectError> {
    match strategy {
        Strategy::Ddfh => {
            let scored = score_pool_cached(pool, config, cache)?;
            select_topk(&scored.scores, pool, config)
        }
        _ => baseline_manifest(strategy, pool, config),
    }
}

pub fn run_rounds(pool: &FramePool, strategy: Strategy, rounds: usize, config: &RoundConfig) -> Result<SimulationRun, SimError> {
    run_rounds_cached(pool, strategy, rounds, config, &mut ReductionCache::default())
}

/// As [`run_rounds`], reusing reductions across calls through `cache`.
pub fn run_rounds_cached(
    pool: &FramePool,
    strategy: Strategy,
    rounds: usize,
    config: &RoundConfig,
    cache: &mut ReductionCache,
) -> Result<SimulationRun, SimError> {
    config.validate()?;
    let filtered = pool.filter_by_confidence(config.confidence_threshold);
    let fused = reduce_and_fuse(&filtered, config, cache)?;
    let c = pool.class_count();

    let mut current = pool.clone();
    let mut out = SimulationRun {
        strategy,
        seed: config.seed,
        initial_divergence: class_divergence(&filtered, &fused.features),
        rounds: Vec::new(),
        manifests: Vec::new(),
        truncated: false,
        final_pool: pool.clone(),
    };
    for round in 1..=rounds {
        let remaining = candidate_frames(&current.filter_by_confidence(config.confidence_threshold), config.candidate_stride);
        if remaining.is_empty() {
            out.truncated = true;
            break;
        }
        let manifest = select_round(&current, strategy, config, cache)?;
        current = current.with_labeled(&manifest.selected)?;

        let mut class_counts = vec![0usize; c];
        let mut confidence_sums = vec![0.0; c];
        for id in &manifest.selected {
            for r in filtered.frame(id).unwrap_or(&[]) {
                class_counts[r.class_id] += 1;
                confidence_sums[r.class_id] += r.confidence;
            }
        }
        let counts: Vec<f64> = class_counts.iter().map(|&n| n as f64).collect();
        let labeled_view = current.filter_by_confidence(config.confidence_threshold);
        out.rounds.push(RoundMetrics {
            round_index: round,
            strategy,
            seed: config.seed,
            count_entropy: label_entropy(&counts).unwrap_or(0.0),
            conf_entropy: label_entropy(&confidence_sums).unwrap_or(0.0),
            class_counts,
            confidence_sums,
            divergence: class_divergence(&labeled_view, &fused.features),
            spent_frames: manifest.spent_frames,
            spent_instances: manifest.spent_instances,
        });
        out.manifests.push(manifest);
    }
    out.final_pool = current;
    Ok(out)
}
