//! Correlated Gaussian Wigner pairs and the directed split used by the matcher.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Two symmetric matrices whose entries are correlated through a hidden
/// vertex bijection `pi`: `(g[u,v], gs[pi(u),pi(v)])` is a standard bivariate
/// normal pair with correlation `epsilon`, independent across unordered pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelatedPair {
    n: usize,
    epsilon: f64,
    g: DMatrix<f64>,
    gs: DMatrix<f64>,
    pi: Vec<usize>,
    seed: u64,
}

impl CorrelatedPair {
    /// Assembles a pair from stored parts, checking every invariant.
    pub fn from_parts(
        epsilon: f64,
        g: DMatrix<f64>,
        gs: DMatrix<f64>,
        pi: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        let n = g.nrows();
        check_epsilon(epsilon)?;
        for (name, m) in [("g", &g), ("gs", &gs)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::param(format!("{name} must be {n}x{n}")));
            }
            check_symmetric_zero_diag(name, m)?;
        }
        check_permutation(&pi, n)?;
        Ok(CorrelatedPair {
            n,
            epsilon,
            g,
            gs,
            pi,
            seed,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }
    pub fn gs(&self) -> &DMatrix<f64> {
        &self.gs
    }
    /// The latent matching. Only seeded-mode seed construction, the oracle
    /// and diagnostics read this.
    pub fn pi(&self) -> &[usize] {
        &self.pi
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// The preprocessed pair: each symmetric matrix split into a directed matrix
/// with independent standard normal off-diagonal entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedPair {
    n: usize,
    epsilon: f64,
    epsilon_effective: f64,
    gh: DMatrix<f64>,
    gsh: DMatrix<f64>,
    pi: Vec<usize>,
    excluded: Vec<usize>,
}

impl DirectedPair {
    pub fn from_parts(
        epsilon: f64,
        epsilon_effective: f64,
        gh: DMatrix<f64>,
        gsh: DMatrix<f64>,
        pi: Vec<usize>,
    ) -> Result<Self> {
        let n = gh.nrows();
        check_epsilon(epsilon)?;
        check_epsilon(epsilon_effective)?;
        if gh.shape() != (n, n) || gsh.shape() != (n, n) {
            return Err(Error::param("directed matrices must be square and equal-sized"));
        }
        check_permutation(&pi, n)?;
        Ok(DirectedPair {
            n,
            epsilon,
            epsilon_effective,
            gh,
            gsh,
            pi,
            excluded: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    /// Correlation of the symmetric pair this was derived from.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    /// Correlation between `gh[u,v]` and `gsh[pi(u),pi(v)]`.
    pub fn epsilon_effective(&self) -> f64 {
        self.epsilon_effective
    }
    pub fn gh(&self) -> &DMatrix<f64> {
        &self.gh
    }
    pub fn gsh(&self) -> &DMatrix<f64> {
        &self.gsh
    }
    pub fn pi(&self) -> &[usize] {
        &self.pi
    }
    /// Seed vertices removed from the iteration, in seed order.
    pub fn excluded(&self) -> &[usize] {
        &self.excluded
    }

    pub fn with_excluded(mut self, excluded: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; self.n];
        for &v in &excluded {
            if v >= self.n || std::mem::replace(&mut seen[v], true) {
                return Err(Error::param(format!("excluded vertex {v} invalid or repeated")));
            }
        }
        self.excluded = excluded;
        Ok(self)
    }

    /// The part of the pair an algorithm may look at: no latent matching.
    pub fn observed(&self) -> ObservedPair<'_> {
        ObservedPair {
            n: self.n,
            epsilon: self.epsilon,
            epsilon_effective: self.epsilon_effective,
            gh: &self.gh,
            gsh: &self.gsh,
        }
    }
}

/// Borrowed view of a [`DirectedPair`] without the latent matching.
#[derive(Debug, Clone, Copy)]
pub struct ObservedPair<'a> {
    pub n: usize,
    pub epsilon: f64,
    pub epsilon_effective: f64,
    pub gh: &'a DMatrix<f64>,
    pub gsh: &'a DMatrix<f64>,
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::param(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    Ok(())
}

fn check_permutation(pi: &[usize], n: usize) -> Result<()> {
    if pi.len() != n {
        return Err(Error::param(format!("permutation has length {}, expected {n}", pi.len())));
    }
    let mut seen = vec![false; n];
    for &p in pi {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::param("latent matching is not a bijection"));
        }
    }
    Ok(())
}

fn check_symmetric_zero_diag(name: &str, m: &DMatrix<f64>) -> Result<()> {
    let n = m.nrows();
    for u in 0..n {
        if m[(u, u)] != 0.0 {
            return Err(Error::param(format!("{name} has a non-zero diagonal at {u}")));
        }
        for v in u + 1..n {
            if m[(u, v)] != m[(v, u)] {
                return Err(Error::param(format!("{name} is not symmetric at ({u},{v})")));
            }
        }
    }
    Ok(())
}

/// Samples a correlated pair with a uniformly random latent matching.
pub fn generate_pair(n: usize, epsilon: f64, seed: u64) -> Result<CorrelatedPair> {
    if n < 2 {
        return Err(Error::param(format!("need at least 2 vertices, got {n}")));
    }
    check_epsilon(epsilon)?;

    let mut pi: Vec<usize> = (0..n).collect();
    pi.shuffle(&mut rng::stream(seed, Stream::Permutation, 0));

    let mut entries = rng::stream(seed, Stream::PairEntries, 0);
    let noise_weight = (1.0 - epsilon * epsilon).sqrt();
    let mut g = DMatrix::zeros(n, n);
    let mut gs = DMatrix::zeros(n, n);
    for u in 0..n {
        for v in u + 1..n {
            let x: f64 = entries.sample(StandardNormal);
            let z: f64 = entries.sample(StandardNormal);
            let y = epsilon * x + noise_weight * z;
            g[(u, v)] = x;
            g[(v, u)] = x;
            let (pu, pv) = (pi[u], pi[v]);
            gs[(pu, pv)] = y;
            gs[(pv, pu)] = y;
        }
    }
    Ok(CorrelatedPair {
        n,
        epsilon,
        g,
        gs,
        pi,
        seed,
    })
}

/// Splits a symmetric matrix with fresh noise: for `u < v`,
/// `out[u,v] = (m[u,v] + t)/sqrt2` and `out[v,u] = (m[u,v] - t)/sqrt2`.
fn split_directed(m: &DMatrix<f64>, rng: &mut rng::Rng) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for u in 0..n {
        for v in u + 1..n {
            let t: f64 = rng.sample(StandardNormal);
            let x = m[(u, v)];
            out[(u, v)] = (x + t) * FRAC_1_SQRT_2;
            out[(v, u)] = (x - t) * FRAC_1_SQRT_2;
        }
    }
    out
}

/// Turns each symmetric matrix into a directed one with independent entries,
/// halving the cross correlation.
pub fn preprocess(pair: &CorrelatedPair, seed: u64) -> DirectedPair {
    let gh = split_directed(&pair.g, &mut rng::stream(seed, Stream::PreprocessG, 0));
    let gsh = split_directed(&pair.gs, &mut rng::stream(seed, Stream::PreprocessGs, 0));
    DirectedPair {
        n: pair.n,
        epsilon: pair.epsilon,
        epsilon_effective: pair.epsilon / 2.0,
        gh,
        gsh,
        pi: pair.pi.clone(),
        excluded: Vec::new(),
    }
}

/// Mixing weight `w` with `w^2 * current = target`.
pub fn mixing_weight(current: f64, target: f64) -> Result<f64> {
    if !(target > 0.0 && target <= current) {
        return Err(Error::param(format!(
            "target correlation {target} must lie in (0, {current}]"
        )));
    }
    Ok((target / current).sqrt())
}

/// Lowers the effective correlation to `target_corr` by mixing every
/// off-diagonal entry of both matrices with fresh standard normal noise.
/// Variances stay at one.
pub fn inject_noise(pair: &DirectedPair, target_corr: f64, seed: u64) -> Result<DirectedPair> {
    let w = mixing_weight(pair.epsilon_effective, target_corr)?;
    if w == 1.0 {
        return Ok(pair.clone());
    }
    let fresh = (1.0 - w * w).sqrt();
    let mix = |m: &DMatrix<f64>, stream: Stream| {
        let mut rng = rng::stream(seed, stream, 0);
        let n = m.nrows();
        let mut out = DMatrix::zeros(n, n);
        for u in 0..n {
            for v in 0..n {
                if u != v {
                    let z: f64 = rng.sample(StandardNormal);
                    out[(u, v)] = w * m[(u, v)] + fresh * z;
                }
            }
        }
        out
    };
    Ok(DirectedPair {
        gh: mix(&pair.gh, Stream::InjectG),
        gsh: mix(&pair.gsh, Stream::InjectGs),
        epsilon_effective: target_corr,
        ..pair.clone()
    })
}
