//! Exhaustive maximum-overlap matching for tiny graphs and evaluation of
//! outcomes against the latent matching.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::{overlap, MatchOutcome};
use crate::model::CorrelatedPair;

pub const MAX_BRUTE_FORCE_N: usize = 10;

/// Rearranges `p` into the next permutation in lexicographic order;
/// `false` once `p` is the last one.
fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = p.windows(2).rposition(|w| w[0] < w[1]) else {
        return false;
    };
    let j = p.iter().rposition(|&x| x > p[i]).expect("a larger element exists");
    p.swap(i, j);
    p[i + 1..].reverse();
    true
}

fn overlap_of(g: &nalgebra::DMatrix<f64>, gs: &nalgebra::DMatrix<f64>, p: &[usize]) -> f64 {
    crate::matcher::overlap_total(g, gs, p)
}

/// Permutation maximizing the overlap; among exact ties the
/// lexicographically smallest wins.
pub fn brute_force_map(pair: &CorrelatedPair) -> Result<Vec<usize>> {
    let n = pair.n();
    if n > MAX_BRUTE_FORCE_N {
        return Err(Error::param(format!(
            "brute force is limited to n <= {MAX_BRUTE_FORCE_N}, got {n}"
        )));
    }
    let (g, gs) = (pair.g(), pair.gs());
    let best = (0..n)
        .into_par_iter()
        .map(|first| {
            let mut p: Vec<usize> = std::iter::once(first).chain((0..n).filter(|&x| x != first)).collect();
            let mut best = (overlap_of(g, gs, &p), p.clone());
            while next_permutation(&mut p[1..]) {
                let o = overlap_of(g, gs, &p);
                if o > best.0 {
                    best = (o, p.clone());
                }
            }
            best
        })
        .collect::<Vec<_>>()
        .into_iter()
        .reduce(|a, b| if b.0 > a.0 { b } else { a })
        .expect("n >= 1");
    Ok(best.1)
}

/// Comparison of an outcome with the latent matching on the non-seed vertices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub exact: bool,
    pub fraction_correct: f64,
    /// `overlap(truth) - overlap(mapping)`; `None` for non-total mappings.
    pub overlap_gap: Option<f64>,
}

/// Evaluates `mapping` on the vertices listed in `domain`.
pub fn evaluate_mapping(mapping: &[Option<usize>], domain: &[usize], pair: &CorrelatedPair) -> EvalReport {
    let pi = pair.pi();
    let correct = domain.iter().filter(|&&v| mapping[v] == Some(pi[v])).count();
    let fraction_correct = if domain.is_empty() {
        0.0
    } else {
        correct as f64 / domain.len() as f64
    };
    let truth: Vec<Option<usize>> = pi.iter().map(|&p| Some(p)).collect();
    let overlap_gap = overlap(pair.g(), pair.gs(), mapping)
        .ok()
        .map(|o| overlap(pair.g(), pair.gs(), &truth).expect("truth is total") - o);
    EvalReport {
        exact: !domain.is_empty() && correct == domain.len(),
        fraction_correct,
        overlap_gap,
    }
}

pub fn evaluate(outcome: &MatchOutcome, pair: &CorrelatedPair) -> EvalReport {
    evaluate_mapping(&outcome.mapping, &outcome.trace.rows_g, pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_pair;
    use nalgebra::DMatrix;

    fn all_permutations(n: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut p: Vec<usize> = (0..n).collect();
        loop {
            out.push(p.clone());
            if !next_permutation(&mut p) {
                return out;
            }
        }
    }

    #[test]
    fn permutation_enumeration_is_lexicographic_and_complete() {
        let perms = all_permutations(4);
        assert_eq!(perms.len(), 24);
        assert!(perms.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn two_vertices_compare_both_permutations() {
        let pair = generate_pair(2, 0.3, 5).unwrap();
        let id = overlap_of(pair.g(), pair.gs(), &[0, 1]);
        let sw = overlap_of(pair.g(), pair.gs(), &[1, 0]);
        let expected = if sw > id { vec![1, 0] } else { vec![0, 1] };
        assert_eq!(brute_force_map(&pair).unwrap(), expected);
    }

    #[test]
    fn brute_force_dominates_every_permutation() {
        for seed in 0..3 {
            let pair = generate_pair(7, 0.5, seed).unwrap();
            let best = brute_force_map(&pair).unwrap();
            let b = overlap_of(pair.g(), pair.gs(), &best);
            for p in all_permutations(7) {
                let o = overlap_of(pair.g(), pair.gs(), &p);
                assert!(o <= b);
                if o == b {
                    assert!(best <= p);
                }
            }
        }
    }

    #[test]
    fn ties_go_to_the_smallest_permutation() {
        let zero = DMatrix::zeros(4, 4);
        let pair = CorrelatedPair::from_parts(0.0, zero.clone(), zero, vec![3, 2, 1, 0], 0).unwrap();
        assert_eq!(brute_force_map(&pair).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn full_correlation_recovers_truth() {
        for seed in 0..50 {
            let pair = generate_pair(6, 1.0, seed).unwrap();
            assert_eq!(brute_force_map(&pair).unwrap(), pair.pi());
        }
    }

    #[test]
    fn size_cap() {
        let pair = generate_pair(12, 0.5, 1).unwrap();
        assert!(matches!(brute_force_map(&pair), Err(Error::Parameter(_))));
    }

    #[test]
    fn evaluation_examples() {
        let pair = generate_pair(4, 0.7, 9).unwrap();
        let pi = pair.pi().to_vec();
        let all: Vec<usize> = (0..4).collect();
        let truth: Vec<Option<usize>> = pi.iter().map(|&p| Some(p)).collect();
        let r = evaluate_mapping(&truth, &all, &pair);
        assert!(r.exact);
        assert_eq!(r.fraction_correct, 1.0);
        assert_eq!(r.overlap_gap, Some(0.0));

        let r = evaluate_mapping(&[None; 4], &all, &pair);
        assert_eq!(r.fraction_correct, 0.0);
        assert!(!r.exact && r.overlap_gap.is_none());

        let half = vec![Some(pi[0]), Some(pi[1]), Some(pi[3]), Some(pi[2])];
        let r = evaluate_mapping(&half, &all, &pair);
        assert_eq!(r.fraction_correct, 0.5);
    }

    #[test]
    fn evaluation_is_invariant_under_common_relabeling() {
        let n = 6;
        let pair = generate_pair(n, 0.6, 3).unwrap();
        let sigma = [2, 5, 0, 4, 1, 3];
        let mut inv = [0; 6];
        for (i, &s) in sigma.iter().enumerate() {
            inv[s] = i;
        }
        let relabel = |m: &DMatrix<f64>| DMatrix::from_fn(n, n, |r, c| m[(inv[r], inv[c])]);
        let pi2: Vec<usize> = (0..n).map(|v| sigma[pair.pi()[inv[v]]]).collect();
        let pair2 = CorrelatedPair::from_parts(0.6, relabel(pair.g()), relabel(pair.gs()), pi2, 3).unwrap();
        let mapping: Vec<Option<usize>> = (0..n).map(|v| Some((pair.pi()[v] + (v % 2)) % n)).collect();
        let mapping2: Vec<Option<usize>> = (0..n).map(|v| mapping[inv[v]].map(|w| sigma[w])).collect();
        let domain: Vec<usize> = (0..n).collect();
        let a = evaluate_mapping(&mapping, &domain, &pair);
        let b = evaluate_mapping(&mapping2, &domain, &pair2);
        assert_eq!(a.fraction_correct, b.fraction_correct);
        assert!((a.overlap_gap.unwrap() - b.overlap_gap.unwrap()).abs() < 1e-12);
    }
}
