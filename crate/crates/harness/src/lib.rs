//! Synthetic pools, round simulation, evaluation metrics, and naive
//! reference implementations used to cross-check `ddfh-core`.

pub mod metrics;
pub mod oracle;
pub mod simulate;
pub mod synth;

pub use metrics::{class_divergence, label_entropy, symmetric_kl, MetricError};
pub use simulate::{run_rounds, run_rounds_cached, select_round, RoundMetrics, SimError, SimulationRun, Strategy};
pub use synth::{synth_generate, SynthConfig, SynthError};
