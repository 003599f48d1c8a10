//! The iterative matching engine.
//!
//! A run starts from `k0` seed pairs, grows paired vertex sets
//! `(Gamma_k, Pi_k)` step by step and finally pairs every remaining vertex by
//! the accumulated degree statistics. The engine only sees an
//! [`ObservedPair`](crate::model::ObservedPair) and a list of seed pairs; the
//! latent matching enters only through the seeds chosen by
//! [`seeded_match`].

mod finish;
mod step;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use finish::{first_hit, finish, greedy_argmax, overlap, score};
pub(crate) use finish::overlap_total;
pub use step::{
    check_sampling, degrees, eta_count, init_sets, intersection_matrix, iterate_once, next_k, normalized_degrees,
    SamplingCondition, SamplingReport,
};

use crate::error::{Error, Result};
use crate::gaussquad::{ModelConstants, PhiCache, TailParams};
use crate::model::{inject_noise, preprocess, CorrelatedPair, DirectedPair, ObservedPair};
use crate::spectral::{BandTier, EtaSet, SpectralBands};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinishingMode {
    FirstHit,
    #[default]
    Argmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedMode {
    #[default]
    OracleSeeded,
    Seedless,
}

/// Parameters of one match run. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n: usize,
    pub epsilon: f64,
    pub theta: f64,
    pub k0: usize,
    /// Defaults to `k0 / 2`.
    pub varkappa: Option<f64>,
    pub k_max: usize,
    pub t_max: usize,
    /// Threshold on `|<sigma_k, D_v>|`; defaults to `theta`.
    pub sigma_threshold: Option<f64>,
    pub match_threshold_factor: f64,
    pub resample_budget: usize,
    pub finishing_mode: FinishingMode,
    pub seed: u64,
    pub seed_mode: SeedMode,
    pub eta_tol: f64,
    pub quad_tol: f64,
    pub rank_tol: f64,
    /// Use the undirected correlation in `Psi^(0)` instead of the directed one.
    pub psi0_literal: bool,
    /// Lower the directed correlation to this value before matching.
    pub noise_target: Option<f64>,
    /// Largest number of seed sequences tried in seedless mode.
    pub enumeration_budget: usize,
    #[serde(skip)]
    pub bands: SpectralBands,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n: 500,
            epsilon: 0.9,
            theta: 1.0,
            k0: 12,
            varkappa: None,
            k_max: 256,
            t_max: 6,
            sigma_threshold: None,
            match_threshold_factor: 0.01,
            resample_budget: 100,
            finishing_mode: FinishingMode::Argmax,
            seed: 0,
            seed_mode: SeedMode::OracleSeeded,
            eta_tol: 1e-8,
            quad_tol: 1e-10,
            rank_tol: 1e-8,
            psi0_literal: false,
            noise_target: None,
            enumeration_budget: 100_000,
            bands: SpectralBands::default(),
        }
    }
}

impl RunConfig {
    pub fn varkappa(&self) -> f64 {
        self.varkappa.unwrap_or(self.k0 as f64 / 2.0)
    }

    pub fn sigma_threshold(&self) -> f64 {
        self.sigma_threshold.unwrap_or(self.theta)
    }

    pub fn tail_params(&self) -> Result<TailParams> {
        TailParams::new(self.theta)?.with_tol(self.quad_tol)
    }

    /// Checks every parameter against a graph on `n` vertices.
    pub fn validate(&self, n: usize) -> Result<()> {
        let positive = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::param(format!("{name} must be positive and finite, got {x}")))
            }
        };
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::param(format!("epsilon must lie in [0, 1], got {}", self.epsilon)));
        }
        positive("theta", self.theta)?;
        positive("varkappa", self.varkappa())?;
        positive("sigma_threshold", self.sigma_threshold())?;
        positive("match_threshold_factor", self.match_threshold_factor)?;
        positive("eta_tol", self.eta_tol)?;
        positive("quad_tol", self.quad_tol)?;
        positive("rank_tol", self.rank_tol)?;
        if self.k0 == 0 {
            return Err(Error::param("k0 must be at least 1"));
        }
        if 4 * self.k0 > n {
            return Err(Error::param(format!("k0={} exceeds n/4 for n={n}", self.k0)));
        }
        if self.k_max < self.k0 {
            return Err(Error::param(format!("k_max={} is below k0={}", self.k_max, self.k0)));
        }
        if self.resample_budget == 0 {
            return Err(Error::param("resample_budget must be at least 1"));
        }
        if let Some(r) = self.noise_target {
            positive("noise_target", r)?;
        }
        self.bands.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Gamma,
    Pi,
}

/// `K` vertex subsets of the non-seed vertices of one side, stored as a
/// 0/1 indicator matrix with one column per set.
#[derive(Debug, Clone, PartialEq)]
pub struct SetFamily {
    pub indicator: DMatrix<f64>,
}

impl SetFamily {
    pub fn from_fn(vertices: usize, sets: usize, mut member: impl FnMut(usize, usize) -> bool) -> Self {
        SetFamily {
            indicator: DMatrix::from_fn(vertices, sets, |i, k| if member(i, k) { 1.0 } else { 0.0 }),
        }
    }

    /// Number of sets.
    pub fn len(&self) -> usize {
        self.indicator.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.indicator.ncols() == 0
    }

    /// Number of vertices the sets live in.
    pub fn vertices(&self) -> usize {
        self.indicator.nrows()
    }

    pub fn contains(&self, vertex: usize, set: usize) -> bool {
        self.indicator[(vertex, set)] != 0.0
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.indicator.column_iter().map(|c| c.iter().filter(|&&x| x != 0.0).count()).collect()
    }

    /// Vertex positions (within the non-seed list) belonging to set `k`.
    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.vertices()).filter(|&i| self.contains(i, k)).collect()
    }
}

/// Everything produced at one step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub eps: f64,
    pub gamma: SetFamily,
    pub pi_sets: SetFamily,
    pub phi: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub eta: Option<EtaSet>,
    pub v_dim: Option<usize>,
    /// Linear constraints from earlier steps: `2 sum_{s<t} K_s`.
    pub history_constraints: usize,
    pub betas: Option<DMatrix<f64>>,
    pub beta_hats: Option<DMatrix<f64>>,
    pub beta_draws: usize,
    /// `(D_Gamma H^T, D_Pi H^T)`: degrees projected on the `eta` vectors.
    pub projections: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl StepRecord {
    fn new(t: usize, eps: f64, gamma: SetFamily, pi_sets: SetFamily, phi: DMatrix<f64>, psi: DMatrix<f64>) -> Self {
        StepRecord {
            t,
            eps,
            gamma,
            pi_sets,
            phi,
            psi,
            eta: None,
            v_dim: None,
            history_constraints: 0,
            betas: None,
            beta_hats: None,
            beta_draws: 0,
            projections: None,
        }
    }

    pub fn k(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlagKind {
    PhiBand(BandTier),
    PsiBand(BandTier),
    EtaCountReduced { requested: usize, available: usize },
    EtaPsiOutOfBand { index: usize },
    EtaNormOutOfWindow { index: usize },
    BetaResampled { draws: usize },
    KCapped { uncapped: usize },
    GrowthExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flag {
    pub step: usize,
    pub kind: FlagKind,
}

/// State of a run; `steps[t]` holds step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationState {
    pub consts: ModelConstants,
    pub epsilon_effective: f64,
    pub seeds: Vec<(usize, usize)>,
    /// Non-seed vertices of each side in increasing order; set indicators
    /// and degree rows are indexed by position in these lists.
    pub rows_g: Vec<usize>,
    pub rows_h: Vec<usize>,
    pub steps: Vec<StepRecord>,
    pub flags: Vec<Flag>,
    /// Separates the random streams of seedless candidates.
    pub stream_id: u64,
}

impl IterationState {
    pub fn t(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn k(&self) -> usize {
        self.current().k()
    }

    pub fn current(&self) -> &StepRecord {
        self.steps.last().expect("state has step 0")
    }

    pub fn k_history(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.k()).collect()
    }

    pub fn eps_history(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.eps).collect()
    }

    /// Latest step whose degrees were projected on `eta` vectors.
    pub fn last_projected(&self) -> Option<&StepRecord> {
        self.steps.iter().rev().find(|s| s.projections.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Success,
    Partial,
    Failed,
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Status::Success => "success",
            Status::Partial => "partial",
            Status::Failed => "failed",
        })
    }
}

/// Why the iteration loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    StepLimit,
    KLimit,
    GrowthExhausted,
    Error,
}

/// An algorithm failure (as opposed to a bad parameter).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub step: usize,
    pub message: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    /// Partner of every vertex, seeds included; all `None` on failure.
    pub mapping: Vec<Option<usize>>,
    /// Matching statistic of each assigned non-seed vertex.
    pub scores: Vec<Option<f64>>,
    /// Vertices whose assigned score is under the threshold (argmax mode).
    pub below_threshold: Vec<bool>,
    pub status: Status,
    /// Matching threshold; `None` when the run failed before finishing.
    pub threshold: Option<f64>,
    pub candidate_id: Option<usize>,
    pub overlap: Option<f64>,
    pub stop: StopReason,
    pub failure: Option<Failure>,
    pub trace: IterationState,
}

impl MatchOutcome {
    fn failed(trace: IterationState, err: Error, stop: StopReason) -> Self {
        let step = match &err {
            Error::Step { step, .. } => *step,
            _ => trace.t(),
        };
        let n = trace.rows_g.len() + trace.seeds.len();
        MatchOutcome {
            mapping: vec![None; n],
            scores: vec![None; n],
            below_threshold: vec![false; n],
            status: Status::Failed,
            threshold: None,
            candidate_id: None,
            overlap: None,
            stop: if stop == StopReason::Error { stop } else { StopReason::Error },
            failure: Some(Failure {
                step,
                message: err.to_string(),
                exit_code: err.exit_code(),
            }),
            trace,
        }
    }

    pub fn is_total(&self) -> bool {
        self.mapping.iter().all(Option::is_some)
    }
}

/// Runs init, the iteration loop and finishing for one seed list.
pub fn run_with_seeds(
    obs: &ObservedPair<'_>,
    seeds: &[(usize, usize)],
    cfg: &RunConfig,
    stream_id: u64,
) -> Result<MatchOutcome> {
    cfg.validate(obs.n)?;
    let params = cfg.tail_params()?;
    let consts = ModelConstants::compute(&params)?;
    let mut cache = PhiCache::new(params);
    let mut state = init_sets(obs, seeds, cfg, consts, &mut cache)?;
    state.stream_id = stream_id;
    let stop = loop {
        let (t, k) = (state.t(), state.k());
        if t >= cfg.t_max {
            break StopReason::StepLimit;
        }
        if k >= cfg.k_max {
            break StopReason::KLimit;
        }
        if next_k(k, cfg).0 <= k {
            state.flags.push(Flag {
                step: t,
                kind: FlagKind::GrowthExhausted,
            });
            break StopReason::GrowthExhausted;
        }
        if let Err(e) = iterate_once(obs, &mut state, cfg, &mut cache) {
            return Ok(MatchOutcome::failed(state, e, StopReason::Error));
        }
    };
    Ok(finish(obs, state, cfg, stop))
}

/// Preprocessing shared by both modes, with optional noise injection.
pub fn prepare(pair: &CorrelatedPair, cfg: &RunConfig) -> Result<DirectedPair> {
    let dp = preprocess(pair, cfg.seed);
    match cfg.noise_target {
        Some(target) => inject_noise(&dp, target, cfg.seed),
        None => Ok(dp),
    }
}

/// Matching with the first `k0` vertices as seeds, paired by the latent
/// matching.
pub fn seeded_match(pair: &CorrelatedPair, cfg: &RunConfig) -> Result<MatchOutcome> {
    cfg.validate(pair.n())?;
    let dp = prepare(pair, cfg)?;
    let seeds: Vec<(usize, usize)> = (0..cfg.k0).map(|j| (j, pair.pi()[j])).collect();
    let mut out = run_with_seeds(&dp.observed(), &seeds, cfg, 0)?;
    if out.is_total() {
        out.overlap = Some(overlap(pair.g(), pair.gs(), &out.mapping)?);
    }
    Ok(out)
}

fn falling_factorial(n: usize, k: usize) -> Option<usize> {
    (0..k).try_fold(1usize, |acc, i| acc.checked_mul(n - i))
}

/// Ordered sequences of `k` distinct elements of `0..n` in lexicographic order.
pub fn seed_sequences(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    let mut used = vec![false; n];
    fn rec(n: usize, k: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for v in 0..n {
            if !used[v] {
                used[v] = true;
                cur.push(v);
                rec(n, k, cur, used, out);
                cur.pop();
                used[v] = false;
            }
        }
    }
    rec(n, k, &mut cur, &mut used, &mut out);
    out
}

/// Tries every ordered `k0`-sequence of the second graph against the first
/// `k0` vertices of the first graph and keeps the successful candidate with
/// the largest overlap (smallest candidate index on ties).
pub fn seedless_match(pair: &CorrelatedPair, cfg: &RunConfig) -> Result<MatchOutcome> {
    let n = pair.n();
    cfg.validate(n)?;
    match falling_factorial(n, cfg.k0) {
        Some(c) if c <= cfg.enumeration_budget => {}
        _ => {
            return Err(Error::param(format!(
                "seedless enumeration of n={n}, k0={} exceeds the budget of {} candidates; use seeded mode",
                cfg.k0, cfg.enumeration_budget
            )))
        }
    }
    let dp = prepare(pair, cfg)?;
    let obs = dp.observed();
    let candidates = seed_sequences(n, cfg.k0);
    let outcomes: Vec<MatchOutcome> = candidates
        .par_iter()
        .enumerate()
        .map(|(id, seq)| {
            let seeds: Vec<(usize, usize)> = seq.iter().enumerate().map(|(j, &w)| (j, w)).collect();
            let mut out = run_with_seeds(&obs, &seeds, cfg, id as u64)?;
            out.candidate_id = Some(id);
            if out.status == Status::Success {
                out.overlap = Some(overlap(pair.g(), pair.gs(), &out.mapping)?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let best = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| o.status == Status::Success)
        .fold(None::<(usize, f64)>, |best, (i, o)| {
            let v = o.overlap.expect("successful candidates carry an overlap");
            match best {
                Some((_, b)) if b >= v => best,
                _ => Some((i, v)),
            }
        });
    let mut outcomes = outcomes;
    Ok(match best {
        Some((i, _)) => outcomes.swap_remove(i),
        None => {
            // Report the first candidate's trace with a failed status.
            let mut first = outcomes.swap_remove(0);
            first.status = Status::Failed;
            first.mapping = vec![None; n];
            first.overlap = None;
            first
        }
    })
}

/// Dispatches on `cfg.seed_mode`.
pub fn match_pair(pair: &CorrelatedPair, cfg: &RunConfig) -> Result<MatchOutcome> {
    match cfg.seed_mode {
        SeedMode::OracleSeeded => seeded_match(pair, cfg),
        SeedMode::Seedless => seedless_match(pair, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_pair;

    #[test]
    fn config_defaults_and_validation() {
        let c = RunConfig::default();
        assert_eq!(c.varkappa(), 6.0);
        assert_eq!(c.sigma_threshold(), 1.0);
        assert!(c.validate(500).is_ok());
        assert!(matches!(c.validate(40), Err(Error::Parameter(_))));
        let bad = RunConfig {
            theta: -1.0,
            ..RunConfig::default()
        };
        assert!(bad.validate(500).is_err());
    }

    #[test]
    fn config_parses_from_flat_keys() {
        let c: RunConfig = toml::from_str("k0 = 8\nfinishing_mode = \"first-hit\"\nseed_mode = \"seedless\"\n").unwrap();
        assert_eq!(c.k0, 8);
        assert_eq!(c.finishing_mode, FinishingMode::FirstHit);
        assert_eq!(c.seed_mode, SeedMode::Seedless);
        assert!(toml::from_str::<RunConfig>("kappa = 3\n").is_err());
    }

    #[test]
    fn seed_sequence_enumeration() {
        assert_eq!(seed_sequences(8, 2).len(), 56);
        assert_eq!(seed_sequences(3, 2)[..3], [vec![0, 1], vec![0, 2], vec![1, 0]]);
        assert_eq!(falling_factorial(10, 3), Some(720));
    }

    #[test]
    fn seeded_rejects_large_k0() {
        let pair = generate_pair(40, 0.9, 1).unwrap();
        let cfg = RunConfig {
            k0: 20,
            ..RunConfig::default()
        };
        assert!(matches!(seeded_match(&pair, &cfg), Err(Error::Parameter(_))));
    }

    #[test]
    fn seedless_budget_is_enforced() {
        let pair = generate_pair(40, 0.9, 1).unwrap();
        let cfg = RunConfig {
            k0: 4,
            ..RunConfig::default()
        };
        assert!(matches!(seedless_match(&pair, &cfg), Err(Error::Parameter(_))));
    }

    #[test]
    fn seeded_run_is_deterministic() {
        let pair = generate_pair(200, 0.9, 11).unwrap();
        let cfg = RunConfig {
            seed: 11,
            t_max: 1,
            ..RunConfig::default()
        };
        let a = seeded_match(&pair, &cfg).unwrap();
        let b = seeded_match(&pair, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_steps_finish_from_initial_sets() {
        let pair = generate_pair(200, 0.9, 12).unwrap();
        let cfg = RunConfig {
            seed: 12,
            t_max: 0,
            ..RunConfig::default()
        };
        let out = seeded_match(&pair, &cfg).unwrap();
        assert_ne!(out.status, Status::Failed);
        assert!(out.is_total());
        let mut seen: Vec<usize> = out.mapping.iter().map(|m| m.unwrap()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..200).collect::<Vec<_>>());
        for j in 0..12 {
            assert_eq!(out.mapping[j], Some(pair.pi()[j]));
        }
        assert_eq!(out.stop, StopReason::StepLimit);
    }

    #[test]
    fn one_step_records_k_and_eps() {
        let pair = generate_pair(400, 0.9, 13).unwrap();
        let cfg = RunConfig {
            seed: 13,
            t_max: 1,
            ..RunConfig::default()
        };
        let out = seeded_match(&pair, &cfg).unwrap();
        let ks = out.trace.k_history();
        assert_eq!(ks[..2], [12, 24]);
        let s0 = &out.trace.steps[0];
        let eta = s0.eta.as_ref().unwrap();
        let c = out.trace.consts;
        let psi_mean = eta.psi_diag().iter().sum::<f64>() / eta.len() as f64;
        let expected = c.iota / c.spread() * (0.45 * psi_mean).powi(2);
        assert!((out.trace.steps[1].eps - expected).abs() < 1e-15);
        assert_eq!(s0.history_constraints, 0);
    }
}
