//! Synthetic multi-instance pools with controllable class imbalance and
//! labeled/unlabeled shift.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use ddfh_core::records::PoolError;
use ddfh_core::rng::substream;
use ddfh_core::{FrameId, FramePool, GeometricFeatures, InstanceRecord};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub frames: usize,
    /// Per-instance class probabilities; must sum to 1.
    pub class_ratios: Vec<f64>,
    /// Inclusive range of detections per frame.
    pub instances_per_frame: (usize, usize),
    pub embedding_dim: usize,
    /// Gaussian modes per class in embedding space.
    pub modes_per_class: usize,
    /// Typical distance between class centers.
    pub class_separation: f64,
    /// Typical distance between modes of one class.
    pub mode_separation: f64,
    /// Within-mode standard deviation.
    pub noise: f64,
    pub confidence_noise: f64,
    /// Frames labeled before the first round.
    pub initial_labeled: usize,
    /// When set, initially labeled frames draw only from the first n modes
    /// of each class while unlabeled frames draw from all of them.
    pub labeled_modes: Option<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 2000,
            class_ratios: vec![0.8, 0.1, 0.1],
            instances_per_frame: (1, 3),
            embedding_dim: 16,
            modes_per_class: 3,
            class_separation: 12.0,
            mode_separation: 6.0,
            noise: 1.0,
            confidence_noise: 0.5,
            initial_labeled: 20,
            labeled_modes: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("class ratios must be nonnegative and sum to 1, got {0:?}")]
    InvalidRatios(Vec<f64>),
    #[error("{0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let r = &self.class_ratios;
        let sum: f64 = r.iter().sum();
        if r.is_empty() || r.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(SynthError::InvalidRatios(r.clone()));
        }
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_owned()));
        let (lo, hi) = self.instances_per_frame;
        if lo > hi {
            return bad("instances_per_frame must be an ordered (min, max) pair");
        }
        if self.embedding_dim < 2 {
            return bad("embedding_dim must be at least 2");
        }
        if self.modes_per_class == 0 {
            return bad("modes_per_class must be at least 1");
        }
        if self.initial_labeled > self.frames {
            return bad("initial_labeled exceeds frames");
        }
        if let Some(m) = self.labeled_modes {
            if m == 0 || m > self.modes_per_class {
                return bad("labeled_modes must lie in [1, modes_per_class]");
            }
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("mode_separation", self.mode_separation),
            ("noise", self.noise),
            ("confidence_noise", self.confidence_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(SynthError::InvalidConfig(format!("{name} must be finite and nonnegative")));
            }
        }
        if self.noise == 0.0 {
            return bad("noise must be positive");
        }
        Ok(())
    }
}

/// Typical (length, width, height) of the first few classes; further
/// classes get random profiles.
const SHAPES: [(f64, f64, f64); 3] = [(3.9, 1.6, 1.56), (0.8, 0.6, 1.73), (1.76, 0.6, 1.73)];

struct Mode {
    offset: Vec<f64>,
    size_scale: f64,
    points: f64,
}

struct ClassProfile {
    center: Vec<f64>,
    shape: (f64, f64, f64),
    confidence_bias: f64,
    modes: Vec<Mode>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize, length: f64) -> Vec<f64> {
    let scale = length / (dim as f64).sqrt();
    (0..dim).map(|_| scale * normal(rng)).collect()
}

fn profiles(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<ClassProfile> {
    let max_ratio = cfg.class_ratios.iter().cloned().fold(0.0, f64::max);
    cfg.class_ratios
        .iter()
        .enumerate()
        .map(|(c, ratio)| {
            let center = random_direction(rng, cfg.embedding_dim, cfg.class_separation);
            let shape = SHAPES.get(c).copied().unwrap_or_else(|| {
                (
                    rng.random_range(0.5..5.0),
                    rng.random_range(0.4..2.5),
                    rng.random_range(0.8..3.0),
                )
            });
            let modes = (0..cfg.modes_per_class)
                .map(|_| Mode {
                    offset: random_direction(rng, cfg.embedding_dim, cfg.mode_separation),
                    size_scale: (0.15 * normal(rng)).exp(),
                    points: (4.0 + normal(rng)).exp(),
                })
                .collect();
            ClassProfile {
                center,
                shape,
                // frequent classes are detected more confidently
                confidence_bias: 1.0 + 1.5 * ratio / max_ratio,
                modes,
            }
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn instance(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    profile: &ClassProfile,
    mode: &Mode,
    frame_id: &FrameId,
    index: u32,
    class_id: usize,
) -> InstanceRecord {
    let dim = cfg.embedding_dim;
    let noise: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
    let embedding = (0..dim)
        .map(|d| profile.center[d] + mode.offset[d] + cfg.noise * noise[d])
        .collect();
    // standardized chi-square distance from the mode center
    let r2: f64 = noise.iter().map(|v| v * v).sum();
    let atypical = (r2 - dim as f64) / (2.0 * dim as f64).sqrt();
    let confidence = sigmoid(profile.confidence_bias - atypical + cfg.confidence_noise * normal(rng));

    let jitter = |rng: &mut ChaCha8Rng| (0.08 * normal(rng)).exp();
    let length = profile.shape.0 * mode.size_scale * jitter(rng);
    let width = profile.shape.1 * mode.size_scale * jitter(rng);
    let height = profile.shape.2 * mode.size_scale * jitter(rng);
    let geometry = GeometricFeatures {
        length,
        width,
        height,
        volume: length * width * height,
        rotation: rng.random_range(-PI..PI),
        point_density: (mode.points * (0.3 * normal(rng)).exp()).round(),
    };
    InstanceRecord {
        frame_id: frame_id.clone(),
        instance: index,
        class_id,
        confidence,
        embedding,
        geometry,
    }
}

/// Generates a pool; identical configs give identical pools.
pub fn synth_generate(cfg: &SynthConfig) -> Result<FramePool, SynthError> {
    cfg.validate()?;
    let mut layout = substream(cfg.seed, "synth/layout");
    let profiles = profiles(cfg, &mut layout);
    let mut rng = substream(cfg.seed, "synth/frames");
    let labeled_idx: BTreeSet<usize> = sample(&mut rng, cfg.frames, cfg.initial_labeled).into_iter().collect();
    let classes = WeightedIndex::new(&cfg.class_ratios).map_err(|_| SynthError::InvalidRatios(cfg.class_ratios.clone()))?;

    let width = cfg.frames.saturating_sub(1).to_string().len().max(4);
    let mut frames = BTreeMap::new();
    let mut labeled = BTreeSet::new();
    for i in 0..cfg.frames {
        let id = FrameId::new(format!("frame_{i:0width$}"));
        let is_labeled = labeled_idx.contains(&i);
        let allowed = match cfg.labeled_modes {
            Some(m) if is_labeled => m,
            _ => cfg.modes_per_class,
        };
        let (lo, hi) = cfg.instances_per_frame;
        let count = rng.random_range(lo..=hi);
        let records = (0..count)
            .map(|k| {
                let class_id = classes.sample(&mut rng);
                let profile = &profiles[class_id];
                let mode = &profile.modes[rng.random_range(0..allowed)];
                instance(cfg, &mut rng, profile, mode, &id, k as u32, class_id)
            })
            .collect();
        if is_labeled {
            labeled.insert(id.clone());
        }
        frames.insert(id, records);
    }
    Ok(FramePool::new(frames, labeled, cfg.class_ratios.len(), 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_counts() {
        let cfg = SynthConfig {
            frames: 10,
            class_ratios: vec![1.0],
            instances_per_frame: (2, 2),
            initial_labeled: 0,
            ..SynthConfig::default()
        };
        let pool = synth_generate(&cfg).unwrap();
        assert_eq!(pool.frame_count(), 10);
        assert_eq!(pool.instance_count(), 20);
        assert!(pool.instances().all(|(_, r)| r.class_id == 0));
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig {
            frames: 50,
            ..SynthConfig::default()
        };
        assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(synth_generate(&cfg).unwrap(), synth_generate(&other).unwrap());
    }

    #[test]
    fn rejects_bad_ratios() {
        let cfg = SynthConfig {
            class_ratios: vec![0.5, 0.4],
            ..SynthConfig::default()
        };
        assert!(matches!(synth_generate(&cfg), Err(SynthError::InvalidRatios(_))));
    }

    #[test]
    fn labeled_frames_follow_config() {
        let cfg = SynthConfig {
            frames: 100,
            initial_labeled: 7,
            ..SynthConfig::default()
        };
        let pool = synth_generate(&cfg).unwrap();
        assert_eq!(pool.labeled().len(), 7);
    }
}
