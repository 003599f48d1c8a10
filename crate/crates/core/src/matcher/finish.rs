//! Matching statistic, assignment and the overlap objective.

use std::cmp::Ordering;
use std::collections::binary_heap::{BinaryHeap, PeekMut};

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::step::{choose_etas, degrees};
use super::{FinishingMode, IterationState, MatchOutcome, RunConfig, Side, Status, StopReason};
use crate::error::{Error, Result};
use crate::model::ObservedPair;

/// Scores `sum_k <eta_k, D_v> <eta_k, D'_w>` as `x y^T` for projected
/// degrees `x = D H^T`, `y = D' H^T`.
pub fn score(x: &DMatrix<f64>, y: &DMatrix<f64>, v: usize, w: usize) -> f64 {
    x.row(v).dot(&y.row(w))
}

/// Builds the matching at the current step of `state`.
pub fn finish(obs: &ObservedPair<'_>, mut state: IterationState, cfg: &RunConfig, stop: StopReason) -> MatchOutcome {
    let t = state.t();
    let eta = match choose_etas(&mut state, t, cfg) {
        Ok(e) => e,
        Err(e) => return MatchOutcome::failed(state, e.at_step(t), stop),
    };
    let d_g = degrees(obs, &state, Side::Gamma);
    let d_h = degrees(obs, &state, Side::Pi);
    let x = &d_g * eta.etas.transpose();
    let y = &d_h * eta.etas.transpose();
    let threshold = cfg.match_threshold_factor * state.k() as f64 * state.current().eps;
    state.steps[t].projections = Some((x.clone(), y.clone()));

    let n = obs.n;
    let mut mapping = vec![None; n];
    let mut scores = vec![None; n];
    let mut below = vec![false; n];
    for &(u, uh) in &state.seeds {
        mapping[u] = Some(uh);
    }
    let status = match cfg.finishing_mode {
        FinishingMode::FirstHit => match first_hit(&x, &y, threshold) {
            Some(assigned) => {
                for (i, (c, s)) in assigned.into_iter().enumerate() {
                    mapping[state.rows_g[i]] = Some(state.rows_h[c]);
                    scores[state.rows_g[i]] = Some(s);
                }
                Status::Success
            }
            None => {
                mapping = vec![None; n];
                Status::Failed
            }
        },
        FinishingMode::Argmax => {
            let assigned = greedy_argmax(&x, &y);
            let mut any_below = false;
            for (i, (c, s)) in assigned.into_iter().enumerate() {
                let v = state.rows_g[i];
                mapping[v] = Some(state.rows_h[c]);
                scores[v] = Some(s);
                if s < threshold {
                    below[v] = true;
                    any_below = true;
                }
            }
            if any_below {
                Status::Partial
            } else {
                Status::Success
            }
        }
    };
    MatchOutcome {
        mapping,
        scores,
        below_threshold: below,
        status,
        threshold: Some(threshold),
        candidate_id: None,
        overlap: None,
        stop,
        failure: None,
        trace: state,
    }
}

/// Scans candidates in index order and takes the first unused one at or
/// above `threshold`; `None` as soon as a vertex finds no partner.
pub fn first_hit(x: &DMatrix<f64>, y: &DMatrix<f64>, threshold: f64) -> Option<Vec<(usize, f64)>> {
    let m = x.nrows();
    let mut taken = vec![false; y.nrows()];
    let mut out = Vec::with_capacity(m);
    for v in 0..m {
        let hit = (0..y.nrows()).find_map(|w| {
            let s = score(x, y, v, w);
            (!taken[w] && s >= threshold).then_some((w, s))
        })?;
        taken[hit.0] = true;
        out.push(hit);
    }
    Some(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Head {
    score: f64,
    v: usize,
    w: usize,
}

impl Eq for Head {}

impl Ord for Head {
    // Highest score first; ties go to the smaller row, then column.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(other.v.cmp(&self.v))
            .then(other.w.cmp(&self.w))
    }
}

impl PartialOrd for Head {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const SHORTLIST: usize = 64;

/// Best `keep` columns of row `v` among those not yet taken, sorted by
/// descending score then index.
fn sorted_row(x: &DMatrix<f64>, y: &DMatrix<f64>, v: usize, keep: usize, taken: &[bool]) -> Vec<(usize, f64)> {
    let mut row: Vec<(usize, f64)> = (0..y.nrows())
        .filter(|&w| !taken[w])
        .map(|w| (w, score(x, y, v, w)))
        .collect();
    let by_score = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if keep < row.len() {
        row.select_nth_unstable_by(keep, by_score);
        row.truncate(keep);
    }
    row.sort_by(by_score);
    row
}

/// Global greedy assignment: repeatedly fixes the highest-scoring pair whose
/// row and column are both free. Each row keeps a short candidate list,
/// rebuilt from the free columns at double the length when exhausted, so a
/// row is rebuilt `O(log n)` times; since columns are never
/// released, an untaken column outside the list never outranks one inside.
pub fn greedy_argmax(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Vec<(usize, f64)> {
    let m = x.nrows();
    let cols = y.nrows();
    assert!(cols >= m, "fewer candidates than vertices");
    let keep = SHORTLIST.min(cols);
    let mut taken = vec![false; cols];
    let mut lists: Vec<Vec<(usize, f64)>> = (0..m).into_par_iter().map(|v| sorted_row(x, y, v, keep, &taken)).collect();
    let mut pos = vec![0usize; m];
    let mut keeps = vec![keep; m];
    let mut out = vec![(usize::MAX, f64::NAN); m];
    let mut heap: BinaryHeap<Head> = (0..m)
        .map(|v| Head {
            score: lists[v][0].1,
            v,
            w: lists[v][0].0,
        })
        .collect();
    while let Some(mut top) = heap.peek_mut() {
        let Head { score: s, v, w } = *top;
        if !taken[w] {
            taken[w] = true;
            out[v] = (w, s);
            PeekMut::pop(top);
            continue;
        }
        // Stale head: replace it in place with the row's next free column.
        pos[v] += 1;
        loop {
            if pos[v] == lists[v].len() {
                keeps[v] = (2 * keeps[v]).min(cols);
                lists[v] = sorted_row(x, y, v, keeps[v], &taken);
                pos[v] = 0;
            }
            if !taken[lists[v][pos[v]].0] {
                break;
            }
            pos[v] += 1;
        }
        let (w, s) = lists[v][pos[v]];
        *top = Head { score: s, v, w };
    }
    out
}

/// `sum_{u < v} g[u, v] gs[map(u), map(v)]` for a total mapping.
pub fn overlap(g: &DMatrix<f64>, gs: &DMatrix<f64>, mapping: &[Option<usize>]) -> Result<f64> {
    let n = g.nrows();
    if mapping.len() != n {
        return Err(Error::param("mapping length differs from the matrix size"));
    }
    let total: Vec<usize> = mapping
        .iter()
        .map(|m| m.ok_or_else(|| Error::param("overlap needs a total mapping")))
        .collect::<Result<_>>()?;
    Ok(overlap_total(g, gs, &total))
}

pub(crate) fn overlap_total(g: &DMatrix<f64>, gs: &DMatrix<f64>, map: &[usize]) -> f64 {
    let n = map.len();
    let mut sum = 0.0;
    for u in 0..n {
        for v in u + 1..n {
            sum += g[(u, v)] * gs[(map[u], map[v])];
        }
    }
    sum
}
