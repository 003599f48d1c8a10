//! Command-line front end, config files, outcome persistence and sweeps.
//!
//! Config files are flat `key = value` lists whose keys are the
//! [`RunConfig`] field names, for example
//!
//! ```text
//! n = 2000
//! epsilon = 0.9
//! k0 = 12
//! finishing_mode = "argmax"
//! ```

pub mod cli;
pub mod sweep;

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matcher::{Flag, MatchOutcome, RunConfig, Status, StopReason};
use crate::model::CorrelatedPair;

/// Parsed config file plus the keys it set explicitly.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub keys: Vec<String>,
}

pub fn parse_config(text: &str, origin: &str) -> Result<LoadedConfig> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::param(format!("config {origin}: {e}")))?;
    if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table() || v.is_array()) {
        return Err(Error::param(format!("config {origin}: key {k} must hold a plain value")));
    }
    let keys = table.keys().cloned().collect();
    let config = table.try_into().map_err(|e| Error::param(format!("config {origin}: {e}")))?;
    Ok(LoadedConfig { config, keys })
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, &path.display().to_string())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))
}

fn na<T: ToString>(x: Option<T>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

/// One row per vertex: `vertex,assigned,score,correct`. Seeds appear with
/// their seed partner and no score.
pub fn write_outcome_csv(path: &Path, outcome: &MatchOutcome, pair: &CorrelatedPair) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv_writer(path)?;
    w.write_record(["vertex", "assigned", "score", "correct"]).map_err(io)?;
    for (v, a) in outcome.mapping.iter().enumerate() {
        w.write_record([
            v.to_string(),
            na(*a),
            na(outcome.scores[v]),
            (*a == Some(pair.pi()[v])).to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// JSON-friendly digest of one run.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub status: Status,
    pub stop: StopReason,
    pub failure: Option<String>,
    pub k_history: Vec<usize>,
    pub eps_history: Vec<f64>,
    pub flags: Vec<Flag>,
    pub threshold: Option<f64>,
    pub overlap: Option<f64>,
    pub candidate_id: Option<usize>,
    pub fraction_correct: f64,
    pub exact: bool,
    /// Only filled when timing was requested, so summaries stay reproducible.
    pub wall_time_s: Option<f64>,
}

impl RunSummary {
    pub fn new(cfg: &RunConfig, outcome: &MatchOutcome, pair: &CorrelatedPair, wall_time_s: Option<f64>) -> Self {
        let eval = crate::oracle::evaluate(outcome, pair);
        RunSummary {
            config: cfg.clone(),
            status: outcome.status,
            stop: outcome.stop,
            failure: outcome.failure.as_ref().map(|f| f.message.clone()),
            k_history: outcome.trace.k_history(),
            eps_history: outcome.trace.eps_history(),
            flags: outcome.trace.flags.clone(),
            threshold: outcome.threshold,
            overlap: outcome.overlap,
            candidate_id: outcome.candidate_id,
            fraction_correct: eval.fraction_correct,
            exact: eval.exact,
            wall_time_s,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("summary serialises");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::FinishingMode;

    #[test]
    fn config_file_keys_match_fields() {
        let text = "n = 300\nepsilon = 0.5\nk0 = 8\nvarkappa = 3.0\nfinishing_mode = \"first-hit\"\nseed = 9\n";
        let c = parse_config(text, "test").unwrap();
        assert_eq!(c.config.n, 300);
        assert_eq!(c.config.varkappa, Some(3.0));
        assert_eq!(c.config.finishing_mode, FinishingMode::FirstHit);
        assert_eq!(c.config.theta, 1.0);
        assert!(c.keys.contains(&"seed".to_string()));
    }

    #[test]
    fn malformed_configs_are_parameter_errors() {
        for text in ["n = ", "bogus_key = 1", "epsilon = \"high\"", "[section]\nn = 3", "k0 = [1, 2]"] {
            let e = parse_config(text, "t").unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text}: {e}");
        }
    }
}
