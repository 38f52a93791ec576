#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use ddfh_core::rng::substream;
use ddfh_core::{FrameId, FramePool, GeometricFeatures, InstanceRecord};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub struct PoolShape {
    pub frames: usize,
    pub labeled: usize,
    pub classes: usize,
    pub per_frame: (usize, usize),
    pub dim: usize,
    /// Added to every embedding and extent of unlabeled instances.
    pub shift: f64,
    pub seed: u64,
}

impl Default for PoolShape {
    fn default() -> Self {
        Self {
            frames: 30,
            labeled: 10,
            classes: 2,
            per_frame: (1, 3),
            dim: 6,
            shift: 0.0,
            seed: 0,
        }
    }
}

pub fn frame_name(i: usize) -> FrameId {
    FrameId::new(format!("f{i:03}"))
}

/// Gaussian blobs per class; the first `labeled` frames are labeled.
pub fn make_pool(shape: &PoolShape) -> FramePool {
    let mut rng = substream(shape.seed, "test/pool");
    let centers: Vec<Vec<f64>> = (0..shape.classes)
        .map(|_| (0..shape.dim).map(|_| 6.0 * normal(&mut rng)).collect())
        .collect();
    let mut frames = BTreeMap::new();
    let mut labeled = BTreeSet::new();
    for i in 0..shape.frames {
        let id = frame_name(i);
        let is_labeled = i < shape.labeled;
        let shift = if is_labeled { 0.0 } else { shape.shift };
        let n = rng.random_range(shape.per_frame.0..=shape.per_frame.1);
        let records = (0..n)
            .map(|k| {
                let class_id = rng.random_range(0..shape.classes);
                let embedding = centers[class_id].iter().map(|c| c + shift + normal(&mut rng)).collect();
                let (l, w, h) = (
                    2.0 + shift + 0.3 * normal(&mut rng).abs(),
                    1.0 + 0.1 * normal(&mut rng).abs(),
                    1.5 + 0.1 * normal(&mut rng).abs(),
                );
                InstanceRecord {
                    frame_id: id.clone(),
                    instance: k as u32,
                    class_id,
                    confidence: rng.random_range(0.2..1.0),
                    embedding,
                    geometry: GeometricFeatures {
                        length: l,
                        width: w,
                        height: h,
                        volume: l * w * h,
                        rotation: rng.random_range(-3.0..3.0),
                        point_density: rng.random_range(0.0..200.0f64).round(),
                    },
                }
            })
            .collect();
        if is_labeled {
            labeled.insert(id.clone());
        }
        frames.insert(id, records);
    }
    FramePool::new(frames, labeled, shape.classes, 0).unwrap()
}
