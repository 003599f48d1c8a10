//! Grids of seeded runs with per-trial and summary CSVs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{csv_writer, na, write_outcome_csv};
use crate::diagnostics::score_separation;
use crate::error::{Error, Result};
use crate::matcher::{seeded_match, RunConfig, SeedMode, Status};
use crate::model::generate_pair;
use crate::oracle::evaluate;
use crate::rng::child_seed;

pub const SUMMARY_HEADER: [&str; 12] = [
    "n",
    "epsilon",
    "theta",
    "k0",
    "varkappa",
    "trials",
    "recovery_mean",
    "recovery_sd",
    "exact_rate",
    "auc_mean",
    "time_mean_s",
    "flags",
];

pub const TRIALS_HEADER: [&str; 15] = [
    "cell", "trial", "seed", "n", "epsilon", "theta", "k0", "varkappa", "status", "recovery", "exact", "auc", "time_s",
    "flags", "message",
];

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub n: Vec<usize>,
    pub epsilon: Vec<f64>,
    pub theta: Vec<f64>,
    pub k0: Vec<usize>,
    /// `None` entries use the config default `k0 / 2`.
    pub varkappa: Vec<Option<f64>>,
    pub trials: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; `None` uses every core.
    pub threads: Option<usize>,
    pub record_time: bool,
    /// Write `vertex,assigned,score,correct` files for every trial.
    pub per_trial_csv: bool,
    /// Everything not swept over.
    pub base: RunConfig,
}

impl SweepSpec {
    pub fn new(out_dir: impl Into<PathBuf>, seed: u64) -> Self {
        let base = RunConfig::default();
        SweepSpec {
            n: vec![base.n],
            epsilon: vec![base.epsilon],
            theta: vec![base.theta],
            k0: vec![base.k0],
            varkappa: vec![None],
            trials: 1,
            seed,
            out_dir: out_dir.into(),
            threads: None,
            record_time: false,
            per_trial_csv: true,
            base,
        }
    }

    /// Run configs of every cell, in output order.
    pub fn cells(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &n in &self.n {
            for &epsilon in &self.epsilon {
                for &theta in &self.theta {
                    for &k0 in &self.k0 {
                        for &varkappa in &self.varkappa {
                            out.push(RunConfig {
                                n,
                                epsilon,
                                theta,
                                k0,
                                varkappa,
                                seed_mode: SeedMode::OracleSeeded,
                                ..self.base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.n.is_empty() || self.epsilon.is_empty() || self.theta.is_empty() || self.k0.is_empty() || self.varkappa.is_empty() {
            return Err(Error::param("every sweep grid needs at least one value"));
        }
        if self.trials == 0 {
            return Err(Error::param("trials must be at least 1"));
        }
        if self.trials > u32::MAX as usize {
            return Err(Error::param("too many trials"));
        }
        for cfg in self.cells() {
            if cfg.n < 2 {
                return Err(Error::param(format!("n must be at least 2, got {}", cfg.n)));
            }
            cfg.validate(cfg.n)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub cell: usize,
    pub trial: usize,
    pub seed: u64,
    pub status: Status,
    pub recovery: f64,
    pub exact: bool,
    pub auc: Option<f64>,
    pub time_s: Option<f64>,
    pub flags: usize,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub n: usize,
    pub epsilon: f64,
    pub theta: f64,
    pub k0: usize,
    pub varkappa: f64,
    pub trials: usize,
    pub recovery_mean: f64,
    pub recovery_sd: f64,
    pub exact_rate: f64,
    pub auc_mean: Option<f64>,
    pub time_mean_s: Option<f64>,
    pub flags: usize,
}

impl CellResult {
    /// Aggregates the trials of one cell. Failed trials count as inexact.
    pub fn aggregate(cfg: &RunConfig, trials: &[TrialRecord]) -> Self {
        let t = trials.len() as f64;
        let rec: Vec<f64> = trials.iter().map(|r| r.recovery).collect();
        let mean = rec.iter().sum::<f64>() / t;
        let sd = if trials.len() > 1 {
            (rec.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (t - 1.0)).sqrt()
        } else {
            0.0
        };
        let mean_of = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        CellResult {
            n: cfg.n,
            epsilon: cfg.epsilon,
            theta: cfg.theta,
            k0: cfg.k0,
            varkappa: cfg.varkappa(),
            trials: trials.len(),
            recovery_mean: mean,
            recovery_sd: sd,
            exact_rate: trials.iter().filter(|r| r.exact).count() as f64 / t,
            auc_mean: mean_of(trials.iter().filter_map(|r| r.auc).collect()),
            time_mean_s: mean_of(trials.iter().filter_map(|r| r.time_s).collect()),
            flags: trials.iter().map(|r| r.flags).sum(),
        }
    }

    fn record(&self) -> [String; 12] {
        [
            self.n.to_string(),
            self.epsilon.to_string(),
            self.theta.to_string(),
            self.k0.to_string(),
            self.varkappa.to_string(),
            self.trials.to_string(),
            self.recovery_mean.to_string(),
            self.recovery_sd.to_string(),
            self.exact_rate.to_string(),
            na(self.auc_mean),
            na(self.time_mean_s),
            self.flags.to_string(),
        ]
    }
}

pub fn trial_csv_name(cell: usize, trial: usize) -> String {
    format!("trial_c{cell}_t{trial}.csv")
}

fn run_trial(spec: &SweepSpec, cfg: &RunConfig, cell: usize, trial: usize) -> Result<TrialRecord> {
    let seed = child_seed(spec.seed, cell as u32, trial as u32);
    let cfg = RunConfig { seed, ..cfg.clone() };
    let pair = generate_pair(cfg.n, cfg.epsilon, seed)?;
    let start = Instant::now();
    let result = seeded_match(&pair, &cfg);
    let elapsed = start.elapsed().as_secs_f64();
    let time_s = spec.record_time.then_some(elapsed);
    let record = match result {
        Ok(out) => {
            let eval = evaluate(&out, &pair);
            if spec.per_trial_csv {
                write_outcome_csv(&spec.out_dir.join(trial_csv_name(cell, trial)), &out, &pair)?;
            }
            TrialRecord {
                cell,
                trial,
                seed,
                status: out.status,
                recovery: eval.fraction_correct,
                exact: eval.exact,
                auc: score_separation(&out.trace, &pair, &cfg).map(|s| s.auc),
                time_s,
                flags: out.trace.flags.len(),
                message: out.failure.map(|f| f.message),
            }
        }
        Err(e) => TrialRecord {
            cell,
            trial,
            seed,
            status: Status::Failed,
            recovery: 0.0,
            exact: false,
            auc: None,
            time_s,
            flags: 0,
            message: Some(e.to_string()),
        },
    };
    Ok(record)
}

/// Runs every (cell, trial), writes `trials.csv`, `summary.csv` and the
/// per-trial files into `spec.out_dir`, and returns the cell summaries.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<CellResult>> {
    spec.validate()?;
    let dir = &spec.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cells = spec.cells();
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..spec.trials).map(move |t| (c, t))).collect();
    let run = || -> Result<Vec<TrialRecord>> {
        jobs.par_iter()
            .map(|&(c, t)| run_trial(spec, &cells[c], c, t))
            .collect()
    };
    let records = match spec.threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::param(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };

    write_trials(&dir.join("trials.csv"), &cells, &records)?;
    let results: Vec<CellResult> = cells
        .iter()
        .enumerate()
        .map(|(c, cfg)| {
            let rows: Vec<TrialRecord> = records.iter().filter(|r| r.cell == c).cloned().collect();
            CellResult::aggregate(cfg, &rows)
        })
        .collect();
    write_summary(&dir.join("summary.csv"), &results)?;
    Ok(results)
}

fn write_trials(path: &Path, cells: &[RunConfig], records: &[TrialRecord]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv_writer(path)?;
    w.write_record(TRIALS_HEADER).map_err(io)?;
    for r in records {
        let cfg = &cells[r.cell];
        w.write_record([
            r.cell.to_string(),
            r.trial.to_string(),
            r.seed.to_string(),
            cfg.n.to_string(),
            cfg.epsilon.to_string(),
            cfg.theta.to_string(),
            cfg.k0.to_string(),
            cfg.varkappa().to_string(),
            r.status.to_string(),
            r.recovery.to_string(),
            r.exact.to_string(),
            na(r.auc),
            na(r.time_s),
            r.flags.to_string(),
            r.message.clone().unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summary(path: &Path, results: &[CellResult]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv_writer(path)?;
    w.write_record(SUMMARY_HEADER).map_err(io)?;
    for r in results {
        w.write_record(r.record()).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
