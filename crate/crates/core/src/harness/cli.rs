use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use super::sweep::{run_sweep, SweepSpec};
use super::{csv_writer, load_config, write_outcome_csv, RunSummary};
use crate::diagnostics::{
    admissibility_report, concentration_report, score_separation, summary_text, write_concentration_csv,
};
use crate::error::{Error, Result};
use crate::gaussquad::{phi, ModelConstants, TailParams};
use crate::io::{load_pair, save_directed, save_pair};
use crate::matcher::{match_pair, overlap_total, FinishingMode, RunConfig, SeedMode};
use crate::model::{generate_pair, preprocess, CorrelatedPair};
use crate::oracle::{brute_force_map, MAX_BRUTE_FORCE_N};
use crate::rng::child_seed;

#[derive(Debug, Parser)]
#[command(name = "wigmatch", version, about = "Matching of correlated Gaussian Wigner matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a correlated pair and save it.
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "pair")]
        out: PathBuf,
        /// Also save the preprocessed directed pair.
        #[arg(long)]
        directed: bool,
    },
    /// Match a saved or freshly generated pair.
    Match {
        #[arg(long, conflicts_with = "seedless")]
        seeded: bool,
        #[arg(long)]
        seedless: bool,
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Per-vertex CSV.
        #[arg(long, default_value = "outcome.csv")]
        out: PathBuf,
        /// Run summary as JSON.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Put the wall time into the summary.
        #[arg(long)]
        record_time: bool,
    },
    /// Brute-force baseline on tiny pairs.
    Oracle {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "oracle.csv")]
        out: PathBuf,
    },
    /// Match, then check concentration and admissibility against the truth.
    Diagnose {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "diagnostics")]
        out: PathBuf,
    },
    /// Grid of seeded runs.
    Sweep {
        #[arg(long = "n-grid", value_delimiter = ',', required = true)]
        n_grid: Vec<usize>,
        #[arg(long = "epsilon-grid", value_delimiter = ',', required = true)]
        epsilon_grid: Vec<f64>,
        #[arg(long = "theta-grid", value_delimiter = ',')]
        theta_grid: Vec<f64>,
        #[arg(long = "k0-grid", value_delimiter = ',')]
        k0_grid: Vec<usize>,
        #[arg(long = "varkappa-grid", value_delimiter = ',')]
        varkappa_grid: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        record_time: bool,
        /// Skip the per-vertex CSV of every trial.
        #[arg(long)]
        no_trial_files: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print alpha, iota and phi for a threshold.
    Constants {
        #[arg(long, default_value_t = 1.0)]
        theta: f64,
        /// Correlations at which to print phi.
        #[arg(long, value_delimiter = ',')]
        epsilon: Vec<f64>,
    },
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Directory written by `generate`; without it a pair is sampled from
    /// n, epsilon and seed.
    #[arg(long)]
    input: Option<PathBuf>,
}

/// Overrides for every config-file key.
#[derive(Debug, Args, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    k0: Option<usize>,
    #[arg(long)]
    varkappa: Option<f64>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    sigma_threshold: Option<f64>,
    #[arg(long)]
    match_threshold_factor: Option<f64>,
    #[arg(long)]
    resample_budget: Option<usize>,
    #[arg(long, value_parser = parse_finishing)]
    finishing_mode: Option<FinishingMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eta_tol: Option<f64>,
    #[arg(long)]
    quad_tol: Option<f64>,
    #[arg(long)]
    rank_tol: Option<f64>,
    #[arg(long)]
    psi0_literal: bool,
    #[arg(long)]
    noise_target: Option<f64>,
    #[arg(long)]
    enumeration_budget: Option<usize>,
}

fn parse_finishing(s: &str) -> std::result::Result<FinishingMode, String> {
    match s {
        "argmax" => Ok(FinishingMode::Argmax),
        "first-hit" => Ok(FinishingMode::FirstHit),
        _ => Err(format!("expected argmax or first-hit, got {s}")),
    }
}

impl ConfigArgs {
    /// File values, then flags. Returns whether a seed was given anywhere.
    fn resolve(&self) -> Result<(RunConfig, bool)> {
        let (mut c, mut has_seed) = match &self.config {
            Some(path) => {
                let loaded = load_config(path)?;
                let has = loaded.keys.iter().any(|k| k == "seed");
                (loaded.config, has)
            }
            None => (RunConfig::default(), false),
        };
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { c.$f = v; })*};
        }
        set!(n, epsilon, theta, k0, k_max, t_max, match_threshold_factor, resample_budget, finishing_mode, eta_tol, quad_tol, rank_tol, enumeration_budget);
        if self.varkappa.is_some() {
            c.varkappa = self.varkappa;
        }
        if self.sigma_threshold.is_some() {
            c.sigma_threshold = self.sigma_threshold;
        }
        if self.noise_target.is_some() {
            c.noise_target = self.noise_target;
        }
        if self.psi0_literal {
            c.psi0_literal = true;
        }
        if let Some(s) = self.seed {
            c.seed = s;
            has_seed = true;
        }
        Ok((c, has_seed))
    }
}

fn obtain_pair(input: &InputArgs, cfg: &mut RunConfig, has_seed: bool) -> Result<CorrelatedPair> {
    match &input.input {
        Some(dir) => {
            let pair = load_pair(dir)?;
            cfg.n = pair.n();
            cfg.epsilon = pair.epsilon();
            Ok(pair)
        }
        None => {
            if !has_seed {
                return Err(Error::param("--seed is required when a pair is generated"));
            }
            generate_pair(cfg.n, cfg.epsilon, cfg.seed)
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Generate {
            n,
            epsilon,
            seed,
            out,
            directed,
        } => {
            let pair = generate_pair(n, epsilon, seed)?;
            save_pair(&out, &pair)?;
            if directed {
                save_directed(&out, &preprocess(&pair, seed), seed)?;
            }
            println!("wrote pair n={n} epsilon={epsilon} seed={seed} to {}", out.display());
            Ok(0)
        }
        Command::Match {
            seedless,
            input,
            config,
            out,
            summary,
            record_time,
            ..
        } => {
            let (mut cfg, has_seed) = config.resolve()?;
            if seedless {
                cfg.seed_mode = SeedMode::Seedless;
            } else {
                cfg.seed_mode = SeedMode::OracleSeeded;
            }
            let pair = obtain_pair(&input, &mut cfg, has_seed)?;
            let start = Instant::now();
            let outcome = match_pair(&pair, &cfg)?;
            let elapsed = start.elapsed().as_secs_f64();
            write_outcome_csv(&out, &outcome, &pair)?;
            let s = RunSummary::new(&cfg, &outcome, &pair, record_time.then_some(elapsed));
            if let Some(path) = summary {
                s.write_json(&path)?;
            }
            println!(
                "status={} fraction_correct={} K={:?} stop={:?}",
                outcome.status, s.fraction_correct, s.k_history, outcome.stop
            );
            match &outcome.failure {
                Some(f) => {
                    eprintln!("error: {}", f.message);
                    Ok(f.exit_code)
                }
                None => Ok(0),
            }
        }
        Command::Oracle {
            n,
            epsilon,
            trials,
            seed,
            out,
        } => oracle_csv(n, epsilon, trials, seed, &out).map(|_| 0),
        Command::Diagnose { input, config, out } => {
            let (mut cfg, has_seed) = config.resolve()?;
            let pair = obtain_pair(&input, &mut cfg, has_seed)?;
            let outcome = match_pair(&pair, &cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let adm = admissibility_report(&outcome.trace, &pair, &cfg)?;
            adm.write_csv(&out.join("admissibility.csv"))?;
            let conc = concentration_report(&outcome.trace, &pair);
            write_concentration_csv(&out.join("concentration.csv"), &conc)?;
            let sep = score_separation(&outcome.trace, &pair, &cfg);
            write_separation_csv(&out.join("separation.csv"), sep.as_ref())?;
            print!("{}", summary_text(&adm, &conc, sep.as_ref()));
            if let Some(f) = &outcome.failure {
                println!("run stopped early: {}", f.message);
            }
            Ok(0)
        }
        Command::Sweep {
            n_grid,
            epsilon_grid,
            theta_grid,
            k0_grid,
            varkappa_grid,
            trials,
            out,
            threads,
            record_time,
            no_trial_files,
            config,
        } => {
            let (base, has_seed) = config.resolve()?;
            if !has_seed {
                return Err(Error::param("--seed is required for a sweep"));
            }
            let or = |v: Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v };
            let spec = SweepSpec {
                n: n_grid,
                epsilon: epsilon_grid,
                theta: or(theta_grid, base.theta),
                k0: if k0_grid.is_empty() { vec![base.k0] } else { k0_grid },
                varkappa: if varkappa_grid.is_empty() {
                    vec![base.varkappa]
                } else {
                    varkappa_grid.into_iter().map(Some).collect()
                },
                trials,
                seed: base.seed,
                out_dir: out.clone(),
                threads,
                record_time,
                per_trial_csv: !no_trial_files,
                base,
            };
            let results = run_sweep(&spec)?;
            for r in &results {
                println!(
                    "n={} epsilon={} k0={} recovery_mean={:.4} exact_rate={:.3}",
                    r.n, r.epsilon, r.k0, r.recovery_mean, r.exact_rate
                );
            }
            println!("wrote {}", out.join("summary.csv").display());
            Ok(0)
        }
        Command::Constants { theta, epsilon } => {
            let params = TailParams::new(theta)?;
            let c = ModelConstants::compute(&params)?;
            println!("theta={theta}");
            println!("alpha={:.12}", c.alpha);
            println!("iota={:.12}", c.iota);
            println!("phi(0)={:.12}", c.phi0);
            for u in epsilon {
                println!("phi({u})={:.12}", phi(u, &params)?);
            }
            Ok(0)
        }
    }
}

fn oracle_csv(n: usize, epsilon: f64, trials: usize, seed: u64, out: &Path) -> Result<()> {
    if n > MAX_BRUTE_FORCE_N {
        return Err(Error::param(format!("brute force is limited to n <= {MAX_BRUTE_FORCE_N}, got {n}")));
    }
    if trials == 0 || trials > u32::MAX as usize {
        return Err(Error::param("trials must be between 1 and 2^32 - 1"));
    }
    let rows: Vec<(bool, f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let pair = generate_pair(n, epsilon, child_seed(seed, 0, t as u32))?;
            let best = brute_force_map(&pair)?;
            Ok((
                best == pair.pi(),
                overlap_total(pair.g(), pair.gs(), &best),
                overlap_total(pair.g(), pair.gs(), pair.pi()),
            ))
        })
        .collect::<Result<_>>()?;
    let io = |e: csv::Error| Error::io(out, e.into());
    let mut w = csv_writer(out)?;
    w.write_record(["trial", "oracle_correct", "oracle_overlap", "truth_overlap"])
        .map_err(io)?;
    for (t, (ok, o, tr)) in rows.iter().enumerate() {
        w.write_record([t.to_string(), ok.to_string(), o.to_string(), tr.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(out, e))
}

fn write_separation_csv(path: &Path, sep: Option<&crate::diagnostics::SeparationReport>) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv_writer(path)?;
    w.write_record([
        "step",
        "matched_mean",
        "matched_sd",
        "unmatched_mean",
        "unmatched_sd",
        "auc",
        "threshold",
        "pass_fraction",
    ])
    .map_err(io)?;
    if let Some(s) = sep {
        w.write_record([
            s.step.to_string(),
            s.matched_mean.to_string(),
            s.matched_sd.to_string(),
            s.unmatched_mean.to_string(),
            s.unmatched_sd.to_string(),
            s.auc.to_string(),
            s.threshold_used.to_string(),
            s.pass_fraction_at_threshold.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("wigmatch").chain(args.iter().copied()))
            .unwrap()
            .command
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "n = 300\nk0 = 8\nt_max = 3\n").unwrap();
        let Command::Match { config, .. } =
            parse(&["match", "--config", path.to_str().unwrap(), "--k0", "10", "--seed", "4"])
        else {
            panic!()
        };
        let (c, has_seed) = config.resolve().unwrap();
        assert_eq!((c.n, c.k0, c.t_max, c.seed), (300, 10, 3, 4));
        assert!(has_seed);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["wigmatch", "match", "--bogus"]), 2);
        assert_eq!(run(["wigmatch", "match", "--seeded", "--seedless", "--seed", "1"]), 2);
        assert_eq!(run(["wigmatch", "match", "--n", "100"]), 2);
        assert_eq!(run(["wigmatch", "oracle", "--n", "12", "--epsilon", "0.5", "--seed", "1"]), 2);
        assert_eq!(run(["wigmatch", "constants", "--theta=-1"]), 2);
    }

    #[test]
    fn missing_input_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nothing");
        assert_eq!(run(["wigmatch", "match", "--input", missing.to_str().unwrap()]), 4);
    }
}
