//! Output writers. CSV files open with a `# <engine> config=<hash>` comment
//! line; JSON files carry `engine_version` and `config_hash` fields.

use std::fmt::Write as _;
use std::path::Path;

use ddfh_core::rng::fnv1a_bytes;
use ddfh_core::select::PoolScores;
use ddfh_core::{BudgetMode, FrameScore, FramePool, RoundConfig, ENGINE_VERSION};
use ddfh_harness::SimulationRun;
use serde::Serialize;

use crate::config::SimulateSection;
use crate::CliError;

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::data("output", format!("{}: {e}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::internal("output", e))?;
    text.push('\n');
    write_text(path, &text)
}

fn header(hash: &str) -> String {
    format!("# {ENGINE_VERSION} config={hash}\n")
}

fn csv_body<F>(path: &Path, hash: &str, fill: F) -> Result<(), CliError>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>,
{
    let mut buf = header(hash).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        fill(&mut w).map_err(|e| io_error(path, e))?;
        w.flush().map_err(|e| io_error(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| io_error(path, e))
}

/// Any payload plus the version stamp.
#[derive(Serialize)]
pub struct Stamped<'a, T: Serialize> {
    engine_version: &'static str,
    config_hash: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

impl<'a, T: Serialize> Stamped<'a, T> {
    pub fn new(config_hash: &'a str, body: &'a T) -> Self {
        Self {
            engine_version: ENGINE_VERSION,
            config_hash,
            body,
        }
    }
}

/// Per-class diagnostics of a scored round.
#[derive(Serialize)]
pub struct ScoreSidecar<'a> {
    engine_version: &'static str,
    config_hash: &'a str,
    diagnostics: &'a ddfh_core::select::RoundDiagnostics,
    frames: &'a [FrameScore],
}

impl<'a> ScoreSidecar<'a> {
    pub fn new(config_hash: &'a str, scored: &'a PoolScores) -> Self {
        Self {
            engine_version: ENGINE_VERSION,
            config_hash,
            diagnostics: &scored.diagnostics,
            frames: &scored.scores,
        }
    }
}

/// One row per instance, in pool order.
pub fn write_coords(path: &Path, hash: &str, pool: &FramePool, reduced: &[[f64; 2]]) -> Result<(), CliError> {
    csv_body(path, hash, |w| {
        w.write_record(["frame_id", "instance", "x", "y"])?;
        for ((key, r), y) in pool.instances().zip(reduced) {
            w.write_record([
                key.frame_id.as_str().to_owned(),
                r.instance.to_string(),
                y[0].to_string(),
                y[1].to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn write_scores(path: &Path, hash: &str, scores: &[FrameScore]) -> Result<(), CliError> {
    csv_body(path, hash, |w| {
        w.write_record(["frame_id", "i_dd", "i_fh", "i_cb", "i_total"])?;
        for s in scores {
            w.write_record([
                s.frame_id.as_str().to_owned(),
                s.i_dd.to_string(),
                s.i_fh.to_string(),
                s.i_cb.to_string(),
                s.i_total.to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn simulation_digest(config: &RoundConfig, sim: &SimulateSection) -> String {
    let json = serde_json::to_string(&(config, config.seed, sim)).expect("config serializes");
    format!("{:016x}", fnv1a_bytes(json.as_bytes()))
}

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

/// `round,strategy,seed,count_entropy,conf_entropy,divergence_c0..,spent`.
/// Round 0 holds the divergence before any selection.
pub struct MetricsTable {
    text: String,
    classes: usize,
}

impl MetricsTable {
    pub fn new(hash: &str, classes: usize) -> Self {
        let mut text = header(hash);
        text.push_str("round,strategy,seed,count_entropy,conf_entropy");
        for c in 0..classes {
            let _ = write!(text, ",divergence_c{c}");
        }
        text.push_str(",spent\n");
        Self { text, classes }
    }

    fn row(&mut self, round: usize, run: &SimulationRun, entropies: Option<(f64, f64)>, divergence: &[f64], spent: usize) {
        let (count, conf) = entropies.map_or((String::new(), String::new()), |(a, b)| (num(a), num(b)));
        let _ = write!(self.text, "{round},{},{},{count},{conf}", run.strategy, run.seed);
        for c in 0..self.classes {
            let _ = write!(self.text, ",{}", num(divergence.get(c).copied().unwrap_or(f64::NAN)));
        }
        let _ = writeln!(self.text, ",{spent}");
    }

    /// `spent` counts frames or detections according to the budget mode.
    pub fn push_run(&mut self, run: &SimulationRun, mode: BudgetMode) {
        self.row(0, run, None, &run.initial_divergence, 0);
        for m in &run.rounds {
            let spent = match mode {
                BudgetMode::Frames => m.spent_frames,
                BudgetMode::Boxes => m.spent_instances,
            };
            self.row(m.round_index, run, Some((m.count_entropy, m.conf_entropy)), &m.divergence, spent);
        }
    }

    pub fn finish(self) -> String {
        self.text
    }
}
