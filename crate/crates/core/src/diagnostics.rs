//! Truth-aware checks of a finished or failed run: the admissibility
//! conditions (i)-(xi), concentration of the intersection matrices around
//! `Phi` and `Psi`, and separation of matched from unmatched scores.
//!
//! Counts are normalized by the number `m` of non-seed vertices. The paper's
//! tolerances `Delta_s` exceed one at any feasible size, so pass/fail uses a
//! five-sigma binomial band `5 sqrt(p (1 - p) / m)` around each target `p`;
//! `Delta_s` is reported alongside.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussquad::PhiCache;
use crate::matcher::{intersection_matrix, IterationState, RunConfig, SetFamily};
use crate::model::CorrelatedPair;
use crate::rng::{stream, Stream};

pub const CONDITIONS: [&str; 11] = ["i", "ii", "iii", "iv", "v", "vi", "vii", "viii", "ix", "x", "xi"];

/// Outcome of one condition at one step. For conditions over many pairs,
/// `max_dev` and `surrogate_tol` belong to the pair closest to failing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub step: usize,
    pub condition: String,
    pub applicable: bool,
    pub max_dev: f64,
    pub surrogate_tol: f64,
    pub paper_delta_log10: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub checks: Vec<ConditionCheck>,
}

impl AdmissibilityReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| !c.applicable || c.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,condition,max_dev,surrogate_tol,paper_delta,pass\n");
        for c in &self.checks {
            if c.applicable {
                let _ = writeln!(
                    s,
                    "{},{},{:.6e},{:.6e},{},{}",
                    c.step,
                    c.condition,
                    c.max_dev,
                    c.surrogate_tol,
                    format_pow10(c.paper_delta_log10),
                    c.pass
                );
            } else {
                let _ = writeln!(s, "{},{},NA,NA,NA,NA", c.step, c.condition);
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn summary(&self) -> String {
        let applicable: Vec<&ConditionCheck> = self.checks.iter().filter(|c| c.applicable).collect();
        let failed: Vec<String> = applicable
            .iter()
            .filter(|c| !c.pass)
            .map(|c| format!("({}) at step {}", c.condition, c.step))
            .collect();
        let mut s = format!(
            "admissibility: {} of {} applicable checks within the 5-sigma surrogate",
            applicable.len() - failed.len(),
            applicable.len()
        );
        if !failed.is_empty() {
            let _ = write!(s, "; outside: {}", failed.join(", "));
        }
        s
    }
}

/// `10^x` written as `<mantissa>e<exponent>` so huge values stay readable.
fn format_pow10(x: f64) -> String {
    if !x.is_finite() {
        return "NA".into();
    }
    let e = x.floor();
    format!("{:.3}e{}", 10f64.powf(x - e), e as i64)
}

/// Truth-dependent view of the sets of a run.
struct TruthView<'a> {
    trace: &'a IterationState,
    /// For each non-seed position on the first side, the position of its
    /// true partner among the second side's non-seed vertices.
    partner: Vec<Option<usize>>,
    m: f64,
}

impl<'a> TruthView<'a> {
    fn new(trace: &'a IterationState, pair: &CorrelatedPair) -> Self {
        let mut pos_h = vec![None; pair.n()];
        for (i, &w) in trace.rows_h.iter().enumerate() {
            pos_h[w] = Some(i);
        }
        let partner = trace.rows_g.iter().map(|&v| pos_h[pair.pi()[v]]).collect();
        TruthView {
            trace,
            partner,
            m: trace.rows_g.len() as f64,
        }
    }

    /// Second-side sets pulled back along the truth: row `i` is the row of
    /// the partner of `i` (zero when the partner is a seed).
    fn pulled_back(&self, sets: &SetFamily) -> DMatrix<f64> {
        DMatrix::from_fn(self.partner.len(), sets.len(), |i, k| {
            self.partner[i].map_or(0.0, |p| sets.indicator[(p, k)])
        })
    }

    /// `|Gamma^(s)_k ∩ Gamma^(r)_l| / m` and the analogues, as matrices.
    fn gamma_gamma(&self, s: usize, r: usize) -> DMatrix<f64> {
        let st = &self.trace.steps;
        st[s].gamma.indicator.transpose() * &st[r].gamma.indicator / self.m
    }

    fn pi_pi(&self, s: usize, r: usize) -> DMatrix<f64> {
        let st = &self.trace.steps;
        st[s].pi_sets.indicator.transpose() * &st[r].pi_sets.indicator / self.m
    }

    fn cross(&self, s: usize, r: usize) -> DMatrix<f64> {
        let st = &self.trace.steps;
        st[s].gamma.indicator.transpose() * self.pulled_back(&st[r].pi_sets) / self.m
    }

    /// `P_{Gamma,Pi}^{(s,r)}`.
    fn p_matrix(&self, s: usize, r: usize) -> DMatrix<f64> {
        let alpha = self.trace.consts.alpha;
        let st = &self.trace.steps;
        let cg = st[s].gamma.indicator.add_scalar(-alpha);
        let mut cp = self.pulled_back(&st[r].pi_sets).add_scalar(-alpha);
        for (i, p) in self.partner.iter().enumerate() {
            if p.is_none() {
                cp.row_mut(i).fill(0.0);
            }
        }
        cg.transpose() * cp / (self.trace.consts.spread() * self.m)
    }
}

fn binomial_tol(p: f64, m: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    5.0 * (p * (1.0 - p) / m).sqrt()
}

/// Worst pair by `dev / tol` over the entries selected by `include`.
fn worst(
    observed: &DMatrix<f64>,
    mut target: impl FnMut(usize, usize) -> Result<f64>,
    include: impl Fn(usize, usize) -> bool,
    m: f64,
) -> Result<Option<(f64, f64)>> {
    let mut out: Option<(f64, f64, f64)> = None;
    for k in 0..observed.nrows() {
        for l in 0..observed.ncols() {
            if !include(k, l) {
                continue;
            }
            let p = target(k, l)?;
            let dev = (observed[(k, l)] - p).abs();
            let tol = binomial_tol(p, m);
            let ratio = if tol > 0.0 {
                dev / tol
            } else if dev > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            if out.is_none_or(|(r, _, _)| ratio > r) {
                out = Some((ratio, dev, tol));
            }
        }
    }
    Ok(out.map(|(_, d, t)| (d, t)))
}

/// `log10` of `n^{-0.1} (log n)^{10 s} prod_{i <= s} K_i^{100}`.
pub fn paper_delta_log10(n: usize, s: usize, ks: &[usize]) -> f64 {
    let n = n as f64;
    let ln = -0.1 * n.ln() + 10.0 * s as f64 * n.ln().ln() + 100.0 * ks[..=s].iter().map(|&k| (k as f64).ln()).sum::<f64>();
    ln / std::f64::consts::LN_10
}

/// Evaluates conditions (i)-(xi) at every step of `trace`.
pub fn admissibility_report(trace: &IterationState, pair: &CorrelatedPair, cfg: &RunConfig) -> Result<AdmissibilityReport> {
    let view = TruthView::new(trace, pair);
    let m = view.m;
    let alpha = trace.consts.alpha;
    let a2 = alpha * alpha;
    let mut cache = PhiCache::new(cfg.tail_params()?);
    let ks = trace.k_history();
    let n = pair.n();
    let eps_eff = trace.epsilon_effective;
    let corr0 = if cfg.psi0_literal { pair.epsilon() } else { eps_eff };
    let phi_corr0 = cache.get(corr0)?;
    let mut checks = Vec::new();

    for s in 0..trace.steps.len() {
        let delta_s = paper_delta_log10(n, s, &ks);
        let delta_0 = -0.1 * (n as f64).log10();
        let prev = if s >= 1 { Some(&trace.steps[s - 1]) } else { None };
        let betas = prev.and_then(|p| p.betas.as_ref().zip(p.beta_hats.as_ref()));
        for (idx, name) in CONDITIONS.iter().enumerate() {
            let mut result: Option<(f64, f64)> = None;
            let mut applicable = m > 0.0;
            let mut delta = delta_s;
            if applicable {
                match idx {
                    0 | 1 => {
                        let sets = if idx == 0 { &trace.steps[s].gamma } else { &trace.steps[s].pi_sets };
                        let sizes = DMatrix::from_iterator(1, sets.len(), sets.sizes().into_iter().map(|c| c as f64 / m));
                        result = worst(&sizes, |_, _| Ok(alpha), |_, _| true, m)?;
                    }
                    2 | 4 => match betas {
                        Some((b, _)) => {
                            let j = b.ncols() as f64;
                            let gram = b * b.transpose() / j;
                            let obs = if idx == 2 { view.gamma_gamma(s, s) } else { view.pi_pi(s, s) };
                            result = worst(&obs, |k, l| cache.get(gram[(k, l)]), |k, l| k < l, m)?;
                        }
                        None => applicable = false,
                    },
                    3 | 5 => {
                        applicable = s == 0;
                        delta = delta_0;
                        if applicable {
                            let obs = if idx == 3 { view.gamma_gamma(0, 0) } else { view.pi_pi(0, 0) };
                            result = worst(&obs, |_, _| Ok(a2), |k, l| k < l, m)?;
                        }
                    }
                    6 => match betas {
                        Some((_, bh)) => {
                            let j = bh.ncols() as f64;
                            let gram = bh * bh.transpose() / j;
                            let obs = view.cross(s, s);
                            result = worst(&obs, |k, l| cache.get(eps_eff * gram[(k, l)]), |_, _| true, m)?;
                        }
                        None => applicable = false,
                    },
                    7 => {
                        applicable = s == 0;
                        delta = delta_0;
                        if applicable {
                            let obs = view.cross(0, 0);
                            let diag = worst(&obs, |_, _| Ok(phi_corr0), |k, l| k == l, m)?;
                            let off = worst(&obs, |_, _| Ok(a2), |k, l| k != l, m)?;
                            result = [diag, off].into_iter().flatten().max_by(|a, b| {
                                (a.0 / a.1).total_cmp(&(b.0 / b.1))
                            });
                        }
                    }
                    8 | 9 => {
                        applicable = s >= 1;
                        for r in 0..s {
                            let obs = if idx == 8 { view.gamma_gamma(s, r) } else { view.pi_pi(s, r) };
                            result = pick(result, worst(&obs, |_, _| Ok(a2), |_, _| true, m)?);
                        }
                    }
                    _ => {
                        applicable = s >= 1;
                        for r in 0..s {
                            for (a, b) in [(s, r), (r, s)] {
                                result = pick(result, worst(&view.cross(a, b), |_, _| Ok(a2), |_, _| true, m)?);
                            }
                        }
                    }
                }
            }
            let (max_dev, tol) = result.unwrap_or((f64::NAN, f64::NAN));
            let applicable = applicable && result.is_some();
            checks.push(ConditionCheck {
                step: s,
                condition: (*name).to_string(),
                applicable,
                max_dev,
                surrogate_tol: tol,
                paper_delta_log10: delta,
                pass: applicable && max_dev <= tol,
            });
        }
    }
    Ok(AdmissibilityReport { checks })
}

fn pick(a: Option<(f64, f64)>, b: Option<(f64, f64)>) -> Option<(f64, f64)> {
    match (a, b) {
        (Some(x), Some(y)) => Some(if y.0 / y.1 > x.0 / x.1 { y } else { x }),
        (x, None) => x,
        (None, y) => y,
    }
}

/// Largest entrywise deviations of the intersection matrices at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationStep {
    pub step: usize,
    pub m_gamma_dev: f64,
    pub m_pi_dev: f64,
    pub p_psi_dev: f64,
    /// Largest `|M^(s,r)|` or `|P^(s,r)|` over `r != s`; `None` at step 0.
    pub cross_step_dev: Option<f64>,
}

pub fn concentration_report(trace: &IterationState, pair: &CorrelatedPair) -> Vec<ConcentrationStep> {
    let view = TruthView::new(trace, pair);
    let alpha = trace.consts.alpha;
    let steps = &trace.steps;
    (0..steps.len())
        .map(|s| {
            let st = &steps[s];
            let m_gamma = intersection_matrix(&st.gamma, &st.gamma, alpha);
            let m_pi = intersection_matrix(&st.pi_sets, &st.pi_sets, alpha);
            let p = view.p_matrix(s, s);
            let cross = (0..s)
                .flat_map(|r| {
                    [
                        intersection_matrix(&st.gamma, &steps[r].gamma, alpha).amax(),
                        intersection_matrix(&st.pi_sets, &steps[r].pi_sets, alpha).amax(),
                        view.p_matrix(s, r).amax(),
                        view.p_matrix(r, s).amax(),
                    ]
                })
                .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.max(x))));
            ConcentrationStep {
                step: s,
                m_gamma_dev: (m_gamma - &st.phi).amax(),
                m_pi_dev: (m_pi - &st.phi).amax(),
                p_psi_dev: (p - &st.psi).amax(),
                cross_step_dev: cross,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    /// Step whose `eta` vectors produced the scores.
    pub step: usize,
    pub matched_mean: f64,
    pub matched_sd: f64,
    pub unmatched_mean: f64,
    pub unmatched_sd: f64,
    pub auc: f64,
    pub threshold_used: f64,
    pub pass_fraction_at_threshold: f64,
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 {
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Probability that a matched score beats an unmatched one, ties counting
/// one half, via the rank-sum statistic.
pub fn auc(matched: &[f64], unmatched: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = matched
        .iter()
        .map(|&x| (x, true))
        .chain(unmatched.iter().map(|&x| (x, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|e| e.1).count() as f64 * avg_rank;
        i = j + 1;
    }
    let (nm, nu) = (matched.len() as f64, unmatched.len() as f64);
    (rank_sum - nm * (nm + 1.0) / 2.0) / (nm * nu)
}

/// Matched versus unmatched scores at the latest step with `eta` vectors.
/// The unmatched sample has `min(10 m, m^2 - m)` uniformly drawn pairs.
pub fn score_separation(trace: &IterationState, pair: &CorrelatedPair, cfg: &RunConfig) -> Option<SeparationReport> {
    let step = trace.last_projected()?;
    let (x, y) = step.projections.as_ref()?;
    let view = TruthView::new(trace, pair);
    let m = x.nrows();
    let matched: Vec<f64> = (0..m)
        .filter_map(|i| view.partner[i].map(|p| x.row(i).dot(&y.row(p))))
        .collect();
    if matched.is_empty() || m < 2 {
        return None;
    }
    let size = (10 * m).min(m * m - m);
    let mut rng = stream(cfg.seed, Stream::UnmatchedSample, trace.stream_id);
    let total = m * m;
    let mut unmatched = Vec::with_capacity(size);
    while unmatched.len() < size {
        for code in index::sample(&mut rng, total, (size - unmatched.len()).min(total)) {
            let (i, w) = (code / m, code % m);
            if view.partner[i] != Some(w) && unmatched.len() < size {
                unmatched.push(x.row(i).dot(&y.row(w)));
            }
        }
    }
    let threshold = cfg.match_threshold_factor * step.k() as f64 * step.eps;
    let (mm, ms) = mean_sd(&matched);
    let (um, us) = mean_sd(&unmatched);
    Some(SeparationReport {
        step: step.t,
        matched_mean: mm,
        matched_sd: ms,
        unmatched_mean: um,
        unmatched_sd: us,
        auc: auc(&matched, &unmatched),
        threshold_used: threshold,
        pass_fraction_at_threshold: matched.iter().filter(|&&s| s >= threshold).count() as f64 / matched.len() as f64,
    })
}

/// Human-readable digest of all three reports.
pub fn summary_text(
    adm: &AdmissibilityReport,
    conc: &[ConcentrationStep],
    sep: Option<&SeparationReport>,
) -> String {
    let mut s = adm.summary();
    s.push('\n');
    for c in conc {
        let _ = write!(
            s,
            "step {}: max|M_Gamma - Phi| = {:.4}, max|M_Pi - Phi| = {:.4}, max|P - Psi| = {:.4}",
            c.step, c.m_gamma_dev, c.m_pi_dev, c.p_psi_dev
        );
        if let Some(x) = c.cross_step_dev {
            let _ = write!(s, ", cross-step max = {x:.4}");
        }
        s.push('\n');
    }
    match sep {
        Some(r) => {
            let _ = writeln!(
                s,
                "scores at step {}: matched {:.4} +/- {:.4}, unmatched {:.4} +/- {:.4}, AUC {:.4}, {:.3} of matched at or above {:.4e}",
                r.step,
                r.matched_mean,
                r.matched_sd,
                r.unmatched_mean,
                r.unmatched_sd,
                r.auc,
                r.pass_fraction_at_threshold,
                r.threshold_used
            );
        }
        None => s.push_str("scores: no step produced eta vectors\n"),
    }
    s
}

/// Writes `concentration.csv` rows.
pub fn write_concentration_csv(path: &Path, conc: &[ConcentrationStep]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut s = String::from("step,m_gamma_dev,m_pi_dev,p_psi_dev,cross_step_dev\n");
    for c in conc {
        let cross = c.cross_step_dev.map_or("NA".to_string(), |x| format!("{x:.6e}"));
        let _ = writeln!(
            s,
            "{},{:.6e},{:.6e},{:.6e},{}",
            c.step, c.m_gamma_dev, c.m_pi_dev, c.p_psi_dev, cross
        );
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}
