//! Frame-level active-learning acquisition for multi-instance 3D detections.
//!
//! Unlabeled frames are scored by how much their instances close the gap
//! between the labeled and unlabeled feature distributions (distribution
//! discrepancy), how heterogeneous their per-class features are relative to
//! the labeled set (feature heterogeneity), and how evenly their detection
//! confidence spreads across classes (confidence balance). Every indicator is
//! quantile-normalized before aggregation, and the top frames are cut by a
//! frame or box budget.
//!
//! The round pipeline lives in [`select`]; the stages it composes are usable
//! on their own:
//!
//! - [`records`], [`io`], [`fusion`]: ingestion, pool bookkeeping, and the
//!   8-D fused feature space.
//! - [`reduce`]: exact t-SNE of the raw embeddings to two dimensions.
//! - [`density`]: per-class Gaussian mixtures with k-means++ seeding.
//! - [`scoring`]: the quantile map and the frame-level indicators.

pub mod density;
pub mod fusion;
pub mod io;
pub mod records;
pub mod reduce;
pub mod rng;
pub mod scoring;
pub mod select;

pub use density::{GmmConfig, GmmModel};
pub use fusion::{FusedFeature, Standardizer};
pub use records::{FrameId, FramePool, GeometricFeatures, InstanceKey, InstanceRecord};
pub use reduce::TsneConfig;
pub use scoring::{FrameScore, QuantileMap};
pub use select::{BudgetMode, RoundConfig, SelectionManifest};

/// Dimension of the fused feature vector: two reduced embedding coordinates
/// followed by six geometric features.
pub const FEATURE_DIM: usize = 8;

/// Version string stamped into every manifest and output header.
pub const ENGINE_VERSION: &str = concat!("ddfh-core/", env!("CARGO_PKG_VERSION"));
