//! Initial sets, normalized degrees, the sampling check and one iteration step.

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Flag, FlagKind, IterationState, RunConfig, SetFamily, Side, StepRecord};
use crate::error::{Error, Result};
use crate::gaussquad::{ModelConstants, PhiCache};
use crate::model::ObservedPair;
use crate::rng::{stream, Stream};
use crate::spectral::{band_select_with_fallback, constrained_subspace, select_eta, sym_eig, BandTier, EtaProblem, EtaSet};

/// Builds step 0 from `k0` seed pairs `(u_j, u'_j)`.
pub fn init_sets(
    obs: &ObservedPair<'_>,
    seeds: &[(usize, usize)],
    cfg: &RunConfig,
    consts: ModelConstants,
    cache: &mut PhiCache,
) -> Result<IterationState> {
    let n = obs.n;
    if seeds.len() != cfg.k0 {
        return Err(Error::param(format!("expected {} seed pairs, got {}", cfg.k0, seeds.len())));
    }
    let mut used_g = vec![false; n];
    let mut used_h = vec![false; n];
    for &(u, uh) in seeds {
        if u >= n || uh >= n {
            return Err(Error::param(format!("seed pair ({u}, {uh}) is out of range for n={n}")));
        }
        if std::mem::replace(&mut used_g[u], true) || std::mem::replace(&mut used_h[uh], true) {
            return Err(Error::param(format!("seed vertex repeated in pair ({u}, {uh})")));
        }
    }
    let rows_g: Vec<usize> = (0..n).filter(|&v| !used_g[v]).collect();
    let rows_h: Vec<usize> = (0..n).filter(|&v| !used_h[v]).collect();
    let theta = cfg.theta;
    let gamma = SetFamily::from_fn(rows_g.len(), seeds.len(), |i, k| {
        obs.gh[(rows_g[i], seeds[k].0)].abs() >= theta
    });
    let pi_sets = SetFamily::from_fn(rows_h.len(), seeds.len(), |i, k| {
        obs.gsh[(rows_h[i], seeds[k].1)].abs() >= theta
    });

    let corr = if cfg.psi0_literal { obs.epsilon } else { obs.epsilon_effective };
    let eps0 = (cache.get(corr)? - consts.phi0) / consts.spread();
    let psi_diag = (cache.get(corr)? - consts.alpha * consts.alpha) / consts.spread();
    let k = seeds.len();
    Ok(IterationState {
        consts,
        epsilon_effective: obs.epsilon_effective,
        seeds: seeds.to_vec(),
        rows_g,
        rows_h,
        steps: vec![StepRecord::new(
            0,
            eps0,
            gamma,
            pi_sets,
            DMatrix::identity(k, k),
            DMatrix::identity(k, k) * psi_diag,
        )],
        flags: Vec::new(),
        stream_id: 0,
    })
}

/// `D(v, k) = ((alpha - alpha^2) m)^{-1/2} sum_u (1{u in S_k} - alpha) M[v, u]`
/// over the non-seed vertices `rows`, with `m = rows.len()`.
pub fn normalized_degrees(matrix: &DMatrix<f64>, rows: &[usize], sets: &SetFamily, alpha: f64) -> DMatrix<f64> {
    let n = matrix.nrows();
    let m = rows.len();
    let k = sets.len();
    if m == 0 || k == 0 {
        return DMatrix::zeros(m, k);
    }
    // Seed columns keep weight zero so the product runs over V \ A only.
    let mut weights = DMatrix::zeros(n, k);
    for (i, &u) in rows.iter().enumerate() {
        for c in 0..k {
            weights[(u, c)] = sets.indicator[(i, c)] - alpha;
        }
    }
    let full = matrix * weights;
    let scale = 1.0 / ((alpha - alpha * alpha) * m as f64).sqrt();
    DMatrix::from_fn(m, k, |i, c| full[(rows[i], c)] * scale)
}

/// Normalized degrees of the current step on one side.
pub fn degrees(obs: &ObservedPair<'_>, state: &IterationState, side: Side) -> DMatrix<f64> {
    let step = state.current();
    let alpha = state.consts.alpha;
    match side {
        Side::Gamma => normalized_degrees(obs.gh, &state.rows_g, &step.gamma, alpha),
        Side::Pi => normalized_degrees(obs.gsh, &state.rows_h, &step.pi_sets, alpha),
    }
}

/// `M^{(t,s)}` between two set families of the same side.
pub fn intersection_matrix(a: &SetFamily, b: &SetFamily, alpha: f64) -> DMatrix<f64> {
    let m = a.vertices();
    let ca = a.indicator.add_scalar(-alpha);
    let cb = b.indicator.add_scalar(-alpha);
    ca.transpose() * cb / ((alpha - alpha * alpha) * m as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingCondition {
    PairwiseBeta,
    PairwiseBetaHat,
    FourthPowerBeta,
    FourthPowerBetaHat,
}

impl std::fmt::Display for SamplingCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SamplingCondition::PairwiseBeta => "pairwise beta inner product",
            SamplingCondition::PairwiseBetaHat => "pairwise beta-hat inner product",
            SamplingCondition::FourthPowerBeta => "fourth-power sum over beta pairs",
            SamplingCondition::FourthPowerBetaHat => "fourth-power sum over beta-hat pairs",
        };
        f.write_str(s)
    }
}

/// Observed statistics and caps of the four sampling conditions, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingReport {
    pub values: [f64; 4],
    pub caps: [f64; 4],
    pub first_violation: Option<SamplingCondition>,
}

impl SamplingReport {
    pub fn passed(&self) -> bool {
        self.first_violation.is_none()
    }
}

/// Evaluates the four conditions on a draw. Rows of `betas` are the
/// `beta_k`; inner products are averaged over the `J` columns. The pairwise
/// caps bound the magnitude of each inner product.
pub fn check_sampling(
    betas: &DMatrix<f64>,
    beta_hats: &DMatrix<f64>,
    k_t: usize,
    k_next: usize,
    eps_t: f64,
) -> SamplingReport {
    let j = betas.ncols().max(1) as f64;
    let base = 24.0 * (k_t.max(1) as f64).ln().sqrt() / (k_t.max(1) as f64).sqrt();
    let ratio = (k_next as f64 / k_t.max(1) as f64).powi(2);
    let caps = [base, eps_t * base, 1e4 * ratio, 1e5 * eps_t.powi(4) * ratio];

    let stats = |b: &DMatrix<f64>| {
        let gram = b * b.transpose() / j;
        let (mut max_abs, mut fourth) = (0.0f64, 0.0);
        for k in 0..gram.nrows() {
            for l in k + 1..gram.ncols() {
                let x = gram[(k, l)];
                max_abs = max_abs.max(x.abs());
                fourth += 2.0 * x.powi(4);
            }
        }
        (max_abs, fourth)
    };
    let (p1, f1) = stats(betas);
    let (p2, f2) = stats(beta_hats);
    let values = [p1, p2, f1, f2];
    let order = [
        SamplingCondition::PairwiseBeta,
        SamplingCondition::PairwiseBetaHat,
        SamplingCondition::FourthPowerBeta,
        SamplingCondition::FourthPowerBetaHat,
    ];
    let first_violation = (0..4).find(|&i| values[i] > caps[i]).map(|i| order[i]);
    SamplingReport {
        values,
        caps,
        first_violation,
    }
}

/// `K_{t+1}` and whether the `k_max` cap was applied.
pub fn next_k(k_t: usize, cfg: &RunConfig) -> (usize, bool) {
    let raw = ((k_t as f64).powi(2) / cfg.varkappa()).floor();
    let raw = if raw.is_finite() && raw < usize::MAX as f64 { raw as usize } else { usize::MAX };
    if raw > cfg.k_max {
        (cfg.k_max, true)
    } else {
        (raw, false)
    }
}

/// Number of test directions used at a step with `K_t = k` sets.
pub fn eta_count(k: usize) -> usize {
    (k / 12).max(1)
}

fn stream_index(state: &IterationState, t: usize) -> u64 {
    (state.stream_id << 16) | t as u64
}

/// Chooses the test directions of step `t` and records them, the subspace
/// dimension and any band or count flags in `state`.
pub(crate) fn choose_etas(state: &mut IterationState, t: usize, cfg: &RunConfig) -> Result<EtaSet> {
    let alpha = state.consts.alpha;
    let step = &state.steps[t];
    let k = step.k();
    let eps_t = step.eps;
    let bands = &cfg.bands;
    let count = bands.target_count(k);

    let phi_eig = sym_eig(&step.phi)?;
    let psi_eig = sym_eig(&step.psi)?;
    let phi_sel = band_select_with_fallback(
        &phi_eig,
        (bands.phi_lo, bands.phi_hi),
        bands.fallback_phi,
        count,
        cfg.rank_tol,
    );
    let psi_sel = band_select_with_fallback(
        &psi_eig,
        (bands.psi_lo_mult * eps_t, bands.psi_hi_mult * eps_t),
        (bands.fallback_psi_mult.0 * eps_t, bands.fallback_psi_mult.1 * eps_t),
        count,
        cfg.rank_tol,
    );

    // Band flags are kept even when the intersection below collapses.
    for (tier, kind) in [(phi_sel.tier, FlagKind::PhiBand as fn(BandTier) -> FlagKind), (psi_sel.tier, FlagKind::PsiBand)] {
        if tier != BandTier::Strict {
            state.flags.push(Flag { step: t, kind: kind(tier) });
        }
    }
    let step = &state.steps[t];

    let mut history = Vec::with_capacity(2 * t);
    for s in 0..t {
        history.push(intersection_matrix(&step.gamma, &state.steps[s].gamma, alpha));
        history.push(intersection_matrix(&step.pi_sets, &state.steps[s].pi_sets, alpha));
    }
    let history_refs: Vec<&DMatrix<f64>> = history.iter().collect();
    let v_basis = constrained_subspace(&phi_sel.basis, &psi_sel.basis, &history_refs, cfg.rank_tol)?;

    let requested = eta_count(k);
    let j = requested.min(v_basis.ncols());
    let m_gamma = intersection_matrix(&step.gamma, &step.gamma, alpha);
    let m_pi = intersection_matrix(&step.pi_sets, &step.pi_sets, alpha);
    let problem = EtaProblem {
        v_basis: &v_basis,
        m_gamma: &m_gamma,
        m_pi: &m_pi,
        psi: &step.psi,
        phi: &step.phi,
        eps_t,
        count: j,
        eta_tol: cfg.eta_tol,
        rank_tol: cfg.rank_tol,
    };
    let mut rng = stream(cfg.seed, Stream::Eta, stream_index(state, t));
    let eta = select_eta(&problem, &mut rng)?;

    let mut flags = Vec::new();
    if j < requested {
        flags.push(FlagKind::EtaCountReduced {
            requested,
            available: v_basis.ncols(),
        });
    }
    for (index, f) in eta.flags.iter().enumerate() {
        if f.psi_out_of_band {
            flags.push(FlagKind::EtaPsiOutOfBand { index });
        }
        if f.norm_out_of_window {
            flags.push(FlagKind::EtaNormOutOfWindow { index });
        }
    }
    let history_constraints = (0..t).map(|s| 2 * state.steps[s].k()).sum();
    state.flags.extend(flags.into_iter().map(|kind| Flag { step: t, kind }));
    let record = &mut state.steps[t];
    record.v_dim = Some(v_basis.ncols());
    record.history_constraints = history_constraints;
    record.eta = Some(eta.clone());
    Ok(eta)
}

/// Advances `state` from step `t` to `t + 1`.
pub fn iterate_once(
    obs: &ObservedPair<'_>,
    state: &mut IterationState,
    cfg: &RunConfig,
    cache: &mut PhiCache,
) -> Result<()> {
    let t = state.t();
    advance(obs, state, cfg, cache).map_err(|e| e.at_step(t))
}

fn advance(obs: &ObservedPair<'_>, state: &mut IterationState, cfg: &RunConfig, cache: &mut PhiCache) -> Result<()> {
    let t = state.t();
    let k_t = state.k();
    let (k_next, capped) = next_k(k_t, cfg);
    if k_next <= k_t {
        return Err(Error::param(format!(
            "K stops growing at K_t={k_t} with varkappa={}",
            cfg.varkappa()
        )));
    }
    let consts = state.consts;
    let spread = consts.spread();
    let eps_eff = state.epsilon_effective;
    let eps_t = state.current().eps;

    let d_g = degrees(obs, state, Side::Gamma);
    let d_h = degrees(obs, state, Side::Pi);
    let eta = choose_etas(state, t, cfg)?;
    let j = eta.len();
    let psi_diag = eta.psi_diag();
    let mean_psi = psi_diag.iter().sum::<f64>() / j as f64;
    let eps_next = consts.iota / spread * (eps_eff * mean_psi).powi(2);

    // Values of psi at rounding level (e.g. when eps_t = 0) count as zero.
    let weights: Vec<f64> = psi_diag
        .iter()
        .map(|&p| if p > cfg.rank_tol { p.sqrt() } else { 0.0 })
        .collect();
    let mut rng = stream(cfg.seed, Stream::Beta, stream_index(state, t));
    let mut draws = 0;
    let (betas, beta_hats) = loop {
        draws += 1;
        let betas = DMatrix::from_fn(k_next, j, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
        let beta_hats = DMatrix::from_fn(k_next, j, |r, c| betas[(r, c)] * weights[c]);
        let report = check_sampling(&betas, &beta_hats, k_t, k_next, eps_t);
        match report.first_violation {
            None => break (betas, beta_hats),
            Some(cond) if draws >= cfg.resample_budget => {
                return Err(Error::ResampleExhausted {
                    budget: cfg.resample_budget,
                    condition: cond.to_string(),
                })
            }
            Some(_) => {}
        }
    };

    let sigma = &betas * &eta.etas / (j as f64).sqrt();
    let gram_beta = &betas * betas.transpose() / j as f64;
    let gram_hat = &beta_hats * beta_hats.transpose() / j as f64;
    let a2 = consts.alpha * consts.alpha;
    let mut phi_next = DMatrix::zeros(k_next, k_next);
    let mut psi_next = DMatrix::zeros(k_next, k_next);
    for r in 0..k_next {
        for c in r..k_next {
            let p = (cache.get(gram_beta[(r, c)])? - a2) / spread;
            let q = (cache.get(eps_eff * gram_hat[(r, c)])? - a2) / spread;
            phi_next[(r, c)] = p;
            phi_next[(c, r)] = p;
            psi_next[(r, c)] = q;
            psi_next[(c, r)] = q;
        }
    }

    let thr = cfg.sigma_threshold();
    let s_g = &d_g * sigma.transpose();
    let s_h = &d_h * sigma.transpose();
    let gamma = SetFamily::from_fn(s_g.nrows(), k_next, |i, k| s_g[(i, k)].abs() >= thr);
    let pi_sets = SetFamily::from_fn(s_h.nrows(), k_next, |i, k| s_h[(i, k)].abs() >= thr);

    if draws > 1 {
        state.flags.push(Flag {
            step: t,
            kind: FlagKind::BetaResampled { draws },
        });
    }
    if capped {
        state.flags.push(Flag {
            step: t,
            kind: FlagKind::KCapped {
                uncapped: ((k_t as f64).powi(2) / cfg.varkappa()).floor() as usize,
            },
        });
    }
    let record = &mut state.steps[t];
    record.projections = Some((&d_g * eta.etas.transpose(), &d_h * eta.etas.transpose()));
    record.betas = Some(betas);
    record.beta_hats = Some(beta_hats);
    record.beta_draws = draws;
    state
        .steps
        .push(StepRecord::new(t + 1, eps_next, gamma, pi_sets, phi_next, psi_next));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussquad::TailParams;
    use crate::model::{generate_pair, preprocess, DirectedPair};

    fn consts(theta: f64) -> (ModelConstants, PhiCache) {
        let p = TailParams::new(theta).unwrap();
        (ModelConstants::compute(&p).unwrap(), PhiCache::new(p))
    }

    fn cfg(n: usize, k0: usize) -> RunConfig {
        RunConfig {
            n,
            epsilon: 0.8,
            k0,
            ..RunConfig::default()
        }
    }

    fn toy_pair(n: usize) -> DirectedPair {
        let gh = DMatrix::zeros(n, n);
        DirectedPair::from_parts(0.8, 0.4, gh.clone(), gh, (0..n).collect()).unwrap()
    }

    #[test]
    fn initial_sets_threshold_absolute_values() {
        let mut dp_gh = DMatrix::zeros(6, 6);
        // Column of seed u_1 = 0 over the non-seed vertices 2..6.
        for (v, x) in [(2, 1.5), (3, -0.2), (4, 0.9), (5, -1.1)] {
            dp_gh[(v, 0)] = x;
        }
        let dp = DirectedPair::from_parts(0.8, 0.4, dp_gh.clone(), dp_gh, (0..6).collect()).unwrap();
        let (c, mut cache) = consts(1.0);
        let st = init_sets(&dp.observed(), &[(0, 0), (1, 1)], &cfg(6, 2), c, &mut cache).unwrap();
        assert_eq!(st.rows_g, vec![2, 3, 4, 5]);
        assert_eq!(st.current().gamma.members(0), vec![0, 3]);
        assert_eq!(st.current().phi, DMatrix::identity(2, 2));
        let eps0 = st.current().eps;
        assert!((st.current().psi[(0, 0)] - eps0).abs() < 1e-15);
        assert!(eps0 > 0.0);
    }

    #[test]
    fn initial_sets_reject_duplicate_seeds() {
        let dp = toy_pair(8);
        let (c, mut cache) = consts(1.0);
        let err = init_sets(&dp.observed(), &[(0, 3), (1, 3)], &cfg(8, 2), c, &mut cache);
        assert!(matches!(err, Err(Error::Parameter(_))));
    }

    #[test]
    fn sign_flip_keeps_initial_sets() {
        let pair = generate_pair(60, 0.5, 3).unwrap();
        let dp = preprocess(&pair, 3);
        let flipped = DirectedPair::from_parts(0.5, 0.25, -dp.gh(), -dp.gsh(), dp.pi().to_vec()).unwrap();
        let seeds: Vec<(usize, usize)> = (0..4).map(|j| (j, dp.pi()[j])).collect();
        let (c, mut cache) = consts(1.0);
        let a = init_sets(&dp.observed(), &seeds, &cfg(60, 4), c, &mut cache).unwrap();
        let b = init_sets(&flipped.observed(), &seeds, &cfg(60, 4), c, &mut cache).unwrap();
        assert_eq!(a.current().gamma, b.current().gamma);
        assert_eq!(a.current().pi_sets, b.current().pi_sets);
    }

    #[test]
    fn degrees_by_hand() {
        // n = 5 with seed 0; one set {u = 2} over non-seed vertices 1..5.
        let mut gh = DMatrix::zeros(5, 5);
        for r in 0..5 {
            for c in 0..5 {
                if r != c {
                    gh[(r, c)] = (r * 5 + c) as f64 * 0.1;
                }
            }
        }
        let rows = vec![1, 2, 3, 4];
        let sets = SetFamily::from_fn(4, 1, |i, _| i == 1);
        let alpha = 0.3;
        let d = normalized_degrees(&gh, &rows, &sets, alpha);
        let scale = 1.0 / ((alpha - alpha * alpha) * 4.0f64).sqrt();
        for (i, &v) in rows.iter().enumerate() {
            let expected: f64 = rows
                .iter()
                .map(|&u| (if u == 2 { 1.0 } else { 0.0 } - alpha) * gh[(v, u)])
                .sum::<f64>()
                * scale;
            assert!((d[(i, 0)] - expected).abs() < 1e-12);
        }
        // All indicators zero: D = -alpha * scale * row sum over non-seeds.
        let empty = SetFamily::from_fn(4, 1, |_, _| false);
        let d = normalized_degrees(&gh, &rows, &empty, alpha);
        let row_sum: f64 = rows.iter().map(|&u| gh[(3, u)]).sum();
        assert!((d[(2, 0)] + alpha * scale * row_sum).abs() < 1e-12);
    }

    #[test]
    fn sampling_examples() {
        let one = DMatrix::from_element(1, 10, 1.0);
        assert!(check_sampling(&one, &one, 120, 1, 0.1).passed());

        let same = DMatrix::from_element(2, 10, 1.0);
        let r = check_sampling(&same, &(same.clone() * 0.0), 120, 2, 0.1);
        assert!((r.caps[0] - 24.0 * 120f64.ln().sqrt() / 120f64.sqrt()).abs() < 1e-12);
        assert!(r.caps[0] > 4.7 && r.caps[0] < 4.9);
        assert!(r.passed());

        let same = DMatrix::from_element(2, 833, 1.0);
        let r = check_sampling(&same, &(same.clone() * 0.0), 10_000, 2, 0.1);
        assert_eq!(r.first_violation, Some(SamplingCondition::PairwiseBeta));
    }

    #[test]
    fn k_recursion_and_cap() {
        let c = RunConfig {
            k0: 12,
            ..RunConfig::default()
        };
        assert_eq!(next_k(12, &c), (24, false));
        assert_eq!(next_k(24, &c), (96, false));
        assert_eq!(next_k(96, &c), (256, true));
        assert_eq!(eta_count(12), 1);
        assert_eq!(eta_count(96), 8);
        assert_eq!(eta_count(5), 1);
    }

    #[test]
    fn intersection_matrix_counts() {
        let a = SetFamily::from_fn(10, 2, |i, k| if k == 0 { i < 3 } else { i >= 7 });
        let alpha = 0.3;
        let m = intersection_matrix(&a, &a, alpha);
        let expected = |ni: f64, nj: f64, nij: f64| (nij - alpha * ni - alpha * nj + alpha * alpha * 10.0) / ((alpha - alpha * alpha) * 10.0);
        assert!((m[(0, 0)] - expected(3.0, 3.0, 3.0)).abs() < 1e-12);
        assert!((m[(0, 1)] - expected(3.0, 3.0, 0.0)).abs() < 1e-12);
    }
}
