//! Domain records and the labeled/unlabeled frame pool.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opaque frame identifier. Ordering is lexicographic and is the canonical
/// frame order everywhere in the engine.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrameId(String);

impl FrameId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for FrameId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// Box geometry and LiDAR support of one detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricFeatures {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// Taken as reported by the detector, never recomputed from the extents.
    pub volume: f64,
    /// Yaw in radians.
    pub rotation: f64,
    /// Number of LiDAR points inside the box.
    pub point_density: f64,
}

impl GeometricFeatures {
    pub fn validate(&self) -> Result<(), String> {
        let all = self.to_array();
        if let Some(i) = all.iter().position(|v| !v.is_finite()) {
            return Err(format!("geometry field {} is not finite", GEOMETRY_NAMES[i]));
        }
        for (name, v) in [
            ("length", self.length),
            ("width", self.width),
            ("height", self.height),
            ("volume", self.volume),
        ] {
            if v <= 0.0 {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(-PI..=PI).contains(&self.rotation) {
            return Err(format!("rotation {} outside [-pi, pi]", self.rotation));
        }
        if self.point_density < 0.0 {
            return Err(format!("point density {} is negative", self.point_density));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.length,
            self.width,
            self.height,
            self.volume,
            self.rotation,
            self.point_density,
        ]
    }
}

const GEOMETRY_NAMES: [&str; 6] = ["length", "width", "height", "volume", "rotation", "point_density"];

/// One detected object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub frame_id: FrameId,
    /// Index of the detection within its frame.
    pub instance: u32,
    pub class_id: usize,
    pub confidence: f64,
    pub embedding: Vec<f64>,
    pub geometry: GeometricFeatures,
}

/// Position of an instance inside a pool: frame plus slot within the frame.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstanceKey {
    pub frame_id: FrameId,
    pub slot: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum PoolError {
    #[error("class count must be at least 1")]
    NoClasses,
    #[error("labeled frame `{0}` is not in the pool")]
    UnknownLabeledFrame(FrameId),
    #[error("record in frame `{frame}` filed under frame `{key}`")]
    MisfiledRecord { frame: FrameId, key: FrameId },
    #[error("frame `{frame}`: class {class_id} outside [0, {class_count})")]
    UnknownClass {
        frame: FrameId,
        class_id: usize,
        class_count: usize,
    },
    #[error("frame `{frame}`: confidence {confidence} outside [0, 1]")]
    Confidence { frame: FrameId, confidence: f64 },
    #[error("frame `{frame}`: embedding dimension {found}, expected {expected}")]
    EmbeddingDim {
        frame: FrameId,
        expected: usize,
        found: usize,
    },
    #[error("embedding dimension must be at least 2, got {0}")]
    EmbeddingTooSmall(usize),
    #[error("frame `{frame}`: non-finite embedding value")]
    NonFiniteEmbedding { frame: FrameId },
    #[error("frame `{frame}`: {reason}")]
    Geometry { frame: FrameId, reason: String },
    #[error("frame `{frame}` has duplicate instance index {instance}")]
    DuplicateInstance { frame: FrameId, instance: u32 },
    #[error("frame `{0}` selected for labeling is already labeled")]
    AlreadyLabeled(FrameId),
}

/// Labeled and unlabeled frames of one annotation round.
///
/// Immutable once built; every transition (`filter_by_confidence`,
/// `restrict`, `with_labeled`) returns a new pool.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePool {
    frames: BTreeMap<FrameId, Vec<InstanceRecord>>,
    labeled: BTreeSet<FrameId>,
    class_count: usize,
    embedding_dim: usize,
    round_index: usize,
}

impl FramePool {
    /// Validates every record invariant. The embedding dimension is taken
    /// from the first record; a pool without records reports dimension 2.
    pub fn new(
        frames: BTreeMap<FrameId, Vec<InstanceRecord>>,
        labeled: BTreeSet<FrameId>,
        class_count: usize,
        round_index: usize,
    ) -> Result<Self, PoolError> {
        if class_count == 0 {
            return Err(PoolError::NoClasses);
        }
        if let Some(missing) = labeled.iter().find(|id| !frames.contains_key(*id)) {
            return Err(PoolError::UnknownLabeledFrame(missing.clone()));
        }
        let embedding_dim = frames
            .values()
            .flat_map(|v| v.first())
            .map(|r| r.embedding.len())
            .next()
            .unwrap_or(2);
        if embedding_dim < 2 {
            return Err(PoolError::EmbeddingTooSmall(embedding_dim));
        }
        for (key, records) in &frames {
            let mut seen = BTreeSet::new();
            for r in records {
                validate_record(r, key, class_count, embedding_dim)?;
                if !seen.insert(r.instance) {
                    return Err(PoolError::DuplicateInstance {
                        frame: key.clone(),
                        instance: r.instance,
                    });
                }
            }
        }
        Ok(Self {
            frames,
            labeled,
            class_count,
            embedding_dim,
            round_index,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn round_index(&self) -> usize {
        self.round_index
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn instance_count(&self) -> usize {
        self.frames.values().map(Vec::len).sum()
    }

    pub fn frames(&self) -> &BTreeMap<FrameId, Vec<InstanceRecord>> {
        &self.frames
    }

    pub fn frame(&self, id: &FrameId) -> Option<&[InstanceRecord]> {
        self.frames.get(id).map(Vec::as_slice)
    }

    pub fn labeled(&self) -> &BTreeSet<FrameId> {
        &self.labeled
    }

    pub fn is_labeled(&self, id: &FrameId) -> bool {
        self.labeled.contains(id)
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = &FrameId> + '_ {
        self.frames.keys().filter(|id| !self.labeled.contains(*id))
    }

    pub fn unlabeled_count(&self) -> usize {
        self.frames.len() - self.labeled.len()
    }

    /// All instances in canonical order: frames ascending, then slot.
    pub fn instances(&self) -> impl Iterator<Item = (InstanceKey, &InstanceRecord)> + '_ {
        self.frames.iter().flat_map(|(id, records)| {
            records.iter().enumerate().map(move |(slot, r)| {
                (
                    InstanceKey {
                        frame_id: id.clone(),
                        slot,
                    },
                    r,
                )
            })
        })
    }

    /// Drops instances below `threshold`. Frames that lose every instance
    /// stay in the pool, empty.
    pub fn filter_by_confidence(&self, threshold: f64) -> FramePool {
        let frames = self
            .frames
            .iter()
            .map(|(id, records)| {
                let kept = records
                    .iter()
                    .filter(|r| r.confidence >= threshold)
                    .cloned()
                    .collect();
                (id.clone(), kept)
            })
            .collect();
        FramePool {
            frames,
            ..self.clone_meta()
        }
    }

    /// Sub-pool holding only the given frames (unknown ids are ignored).
    pub fn restrict<'a>(&self, keep: impl IntoIterator<Item = &'a FrameId>) -> FramePool {
        let keep: BTreeSet<&FrameId> = keep.into_iter().collect();
        let frames: BTreeMap<_, _> = self
            .frames
            .iter()
            .filter(|(id, _)| keep.contains(id))
            .map(|(id, r)| (id.clone(), r.clone()))
            .collect();
        let labeled = self
            .labeled
            .iter()
            .filter(|id| frames.contains_key(*id))
            .cloned()
            .collect();
        FramePool {
            frames,
            labeled,
            ..self.clone_meta()
        }
    }

    /// Next-round pool with `selected` moved to the labeled set.
    pub fn with_labeled<'a>(
        &self,
        selected: impl IntoIterator<Item = &'a FrameId>,
    ) -> Result<FramePool, PoolError> {
        let mut labeled = self.labeled.clone();
        for id in selected {
            if !self.frames.contains_key(id) {
                return Err(PoolError::UnknownLabeledFrame(id.clone()));
            }
            if !labeled.insert(id.clone()) {
                return Err(PoolError::AlreadyLabeled(id.clone()));
            }
        }
        Ok(FramePool {
            frames: self.frames.clone(),
            labeled,
            round_index: self.round_index + 1,
            ..self.clone_meta()
        })
    }

    fn clone_meta(&self) -> FramePool {
        FramePool {
            frames: BTreeMap::new(),
            labeled: self.labeled.clone(),
            class_count: self.class_count,
            embedding_dim: self.embedding_dim,
            round_index: self.round_index,
        }
    }
}

fn validate_record(
    r: &InstanceRecord,
    key: &FrameId,
    class_count: usize,
    embedding_dim: usize,
) -> Result<(), PoolError> {
    let frame = || key.clone();
    if &r.frame_id != key {
        return Err(PoolError::MisfiledRecord {
            frame: r.frame_id.clone(),
            key: frame(),
        });
    }
    if r.class_id >= class_count {
        return Err(PoolError::UnknownClass {
            frame: frame(),
            class_id: r.class_id,
            class_count,
        });
    }
    if !(0.0..=1.0).contains(&r.confidence) {
        return Err(PoolError::Confidence {
            frame: frame(),
            confidence: r.confidence,
        });
    }
    if r.embedding.len() != embedding_dim {
        return Err(PoolError::EmbeddingDim {
            frame: frame(),
            expected: embedding_dim,
            found: r.embedding.len(),
        });
    }
    if r.embedding.iter().any(|v| !v.is_finite()) {
        return Err(PoolError::NonFiniteEmbedding { frame: frame() });
    }
    r.geometry
        .validate()
        .map_err(|reason| PoolError::Geometry { frame: frame(), reason })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn geom(l: f64) -> GeometricFeatures {
        GeometricFeatures {
            length: l,
            width: 1.0,
            height: 1.5,
            volume: l * 1.5,
            rotation: 0.1,
            point_density: 40.0,
        }
    }

    pub(crate) fn record(frame: &str, instance: u32, class_id: usize, confidence: f64) -> InstanceRecord {
        InstanceRecord {
            frame_id: frame.into(),
            instance,
            class_id,
            confidence,
            embedding: vec![instance as f64, class_id as f64, confidence],
            geometry: geom(2.0 + instance as f64),
        }
    }

    pub(crate) fn pool_of(records: Vec<InstanceRecord>, labeled: &[&str], classes: usize) -> FramePool {
        let mut frames: BTreeMap<FrameId, Vec<InstanceRecord>> = BTreeMap::new();
        for r in records {
            frames.entry(r.frame_id.clone()).or_default().push(r);
        }
        let labeled = labeled.iter().map(|s| FrameId::from(*s)).collect();
        FramePool::new(frames, labeled, classes, 0).unwrap()
    }

    #[test]
    fn geometry_bounds() {
        assert!(geom(2.0).validate().is_ok());
        let mut g = geom(2.0);
        g.rotation = 3.5;
        assert!(g.validate().is_err());
        let mut g = geom(2.0);
        g.volume = 0.0;
        assert!(g.validate().is_err());
        let mut g = geom(2.0);
        g.point_density = -1.0;
        assert!(g.validate().is_err());
    }

    #[test]
    fn filter_keeps_frames() {
        let pool = pool_of(
            vec![record("a", 0, 0, 0.2), record("a", 1, 0, 0.5), record("b", 0, 1, 0.9)],
            &[],
            2,
        );
        assert_eq!(pool.filter_by_confidence(0.0), pool);

        let kept = pool.filter_by_confidence(0.5);
        let confs: Vec<f64> = kept.instances().map(|(_, r)| r.confidence).collect();
        assert_eq!(confs, vec![0.5, 0.9]);

        let none = pool.filter_by_confidence(1.0);
        assert_eq!(none.frame_count(), 2);
        assert_eq!(none.instance_count(), 0);
    }

    #[test]
    fn labeling_moves_frames() {
        let pool = pool_of(vec![record("a", 0, 0, 0.5), record("b", 0, 0, 0.5)], &["a"], 1);
        assert_eq!(pool.unlabeled().collect::<Vec<_>>(), vec![&FrameId::from("b")]);
        let next = pool.with_labeled([&FrameId::from("b")]).unwrap();
        assert_eq!(next.unlabeled_count(), 0);
        assert_eq!(next.round_index(), 1);
        assert_eq!(
            pool.with_labeled([&FrameId::from("a")]),
            Err(PoolError::AlreadyLabeled("a".into()))
        );
    }

    #[test]
    fn rejects_bad_records() {
        let mut frames = BTreeMap::new();
        frames.insert(FrameId::from("a"), vec![record("a", 0, 3, 0.5)]);
        assert!(matches!(
            FramePool::new(frames, BTreeSet::new(), 2, 0),
            Err(PoolError::UnknownClass { .. })
        ));
        let mut frames = BTreeMap::new();
        frames.insert(FrameId::from("a"), vec![record("a", 0, 0, 0.5), record("a", 0, 0, 0.6)]);
        assert!(matches!(
            FramePool::new(frames, BTreeSet::new(), 2, 0),
            Err(PoolError::DuplicateInstance { .. })
        ));
    }
}
