//! Config files (TOML) and flag overrides.
//!
//! Top-level keys mirror the round settings; `[tsne]` and `[gmm]` tune the
//! reduction and the density fits; `[simulate]` and `[simulate.synth]` drive
//! the `simulate` subcommand. Unknown keys are errors.
//!
//! ```toml
//! budget_mode = "frames"
//! budget = 20
//! candidate_stride = 1
//! confidence_threshold = 0.1
//! seed = 7
//! class_count = 3
//!
//! [tsne]
//! perplexity = 100.0
//!
//! [gmm]
//! components = 10
//! ```

use std::path::Path;

use ddfh_core::{BudgetMode, GmmConfig, RoundConfig, TsneConfig};
use ddfh_harness::{Strategy, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub budget_mode: Option<BudgetMode>,
    pub budget: Option<usize>,
    pub candidate_stride: Option<usize>,
    pub confidence_threshold: Option<f64>,
    pub seed: Option<u64>,
    /// Number of classes; inferred from the instance file when absent.
    pub class_count: Option<usize>,
    pub tsne: Option<TsneConfig>,
    pub gmm: Option<GmmConfig>,
    pub simulate: Option<SimulateSection>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub rounds: usize,
    pub strategies: Vec<Strategy>,
    /// Each seed drives both pool generation and the rounds.
    pub seeds: Vec<u64>,
    pub synth: SynthConfig,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            rounds: 5,
            strategies: Strategy::ALL.to_vec(),
            seeds: vec![0],
            synth: SynthConfig::default(),
        }
    }
}

/// Flags that override config-file values.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub budget: Option<usize>,
    pub budget_mode: Option<BudgetMode>,
    pub stride: Option<usize>,
    pub threshold: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Effective round settings: defaults, then the file, then flags.
    pub fn round_config(&self, flags: &Overrides) -> Result<RoundConfig, CliError> {
        let d = RoundConfig::default();
        let config = RoundConfig {
            budget_mode: flags.budget_mode.or(self.budget_mode).unwrap_or(d.budget_mode),
            budget: flags.budget.or(self.budget).unwrap_or(d.budget),
            candidate_stride: flags.stride.or(self.candidate_stride).unwrap_or(d.candidate_stride),
            confidence_threshold: flags
                .threshold
                .or(self.confidence_threshold)
                .unwrap_or(d.confidence_threshold),
            seed: flags.seed.or(self.seed).unwrap_or(d.seed),
            tsne: self.tsne.clone().unwrap_or(d.tsne),
            gmm: self.gmm.clone().unwrap_or(d.gmm),
        };
        config.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<FileConfig, toml::de::Error> {
        toml::from_str(text)
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse("budgett = 3").is_err());
        assert!(parse("[tsne]\nperplexity = 30.0\nseed = 4").is_err());
        assert!(parse("[gmm]\ncomponents = 3\nfoo = 1").is_err());
    }

    #[test]
    fn flags_override_file() {
        let file = parse("budget = 3\nseed = 9\nbudget_mode = \"boxes\"\n[tsne]\nperplexity = 30.0").unwrap();
        let cfg = file
            .round_config(&Overrides {
                budget: Some(5),
                ..Overrides::default()
            })
            .unwrap();
        assert_eq!(cfg.budget, 5);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.budget_mode, BudgetMode::Boxes);
        assert_eq!(cfg.tsne.perplexity, 30.0);
        assert_eq!(cfg.tsne.iterations, TsneConfig::default().iterations);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let file = parse("budget = 0").unwrap();
        assert!(matches!(file.round_config(&Overrides::default()), Err(CliError::Config(_))));
    }

    #[test]
    fn simulate_section_defaults() {
        let file = parse("[simulate]\nrounds = 2\nstrategies = [\"random\"]\n[simulate.synth]\nframes = 50").unwrap();
        let sim = file.simulate.unwrap();
        assert_eq!(sim.rounds, 2);
        assert_eq!(sim.strategies, vec![Strategy::Random]);
        assert_eq!(sim.synth.frames, 50);
        assert_eq!(sim.seeds, vec![0]);
    }
}
