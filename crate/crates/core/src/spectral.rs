//! Eigen-decomposition, band selection, constrained subspaces and the choice
//! of test directions `eta`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Eigenvalue windows used to pick the well-conditioned part of `Phi` and
/// `Psi`. The `Psi` windows are multiples of the current signal level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralBands {
    pub phi_lo: f64,
    pub phi_hi: f64,
    pub psi_lo_mult: f64,
    pub psi_hi_mult: f64,
    pub target_fraction: f64,
    pub fallback_phi: (f64, f64),
    pub fallback_psi_mult: (f64, f64),
}

impl Default for SpectralBands {
    fn default() -> Self {
        SpectralBands {
            phi_lo: 0.9,
            phi_hi: 1.1,
            psi_lo_mult: 0.9,
            psi_hi_mult: 1.1,
            target_fraction: 0.75,
            fallback_phi: (0.5, 1.5),
            fallback_psi_mult: (0.3, 3.0),
        }
    }
}

impl SpectralBands {
    pub fn validate(&self) -> Result<()> {
        let ok = self.phi_lo < self.phi_hi
            && self.psi_lo_mult < self.psi_hi_mult
            && self.fallback_phi.0 < self.fallback_phi.1
            && self.fallback_psi_mult.0 < self.fallback_psi_mult.1
            && self.target_fraction > 0.0
            && self.target_fraction <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("inconsistent spectral bands: {self:?}")))
        }
    }

    /// Number of eigenvectors requested from a `k x k` matrix.
    pub fn target_count(&self, k: usize) -> usize {
        ((self.target_fraction * k as f64).floor() as usize).clamp(1, k.max(1))
    }
}

/// Eigenpairs sorted by descending eigenvalue; eigenvectors are columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn sym_eig(s: &DMatrix<f64>) -> Result<Eigen> {
    if s.nrows() != s.ncols() {
        return Err(Error::param("eigendecomposition needs a square matrix"));
    }
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric {
            message: "matrix has non-finite entries".into(),
            estimate: f64::NAN,
        });
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..s.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(s.nrows(), s.nrows(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(Eigen { values, vectors })
}

/// Which window produced a band selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BandTier {
    Strict,
    Widened,
    Nearest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandSelection {
    pub basis: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// Eigenvalues inside the window before truncation.
    pub found: usize,
    pub tier: BandTier,
}

/// Eigenvectors with eigenvalue in `[lo, hi]`, keeping at most `max_count`
/// of those nearest the band centre.
pub fn band_select(eig: &Eigen, lo: f64, hi: f64, max_count: usize) -> BandSelection {
    let inside: Vec<usize> = (0..eig.values.len())
        .filter(|&i| eig.values[i] >= lo && eig.values[i] <= hi)
        .collect();
    let found = inside.len();
    let picked = nearest_to(eig, inside, 0.5 * (lo + hi), max_count);
    selection(eig, &picked, found, BandTier::Strict)
}

/// Strict window, then the widened one, then the positive eigenvalues
/// nearest the strict centre. `Phi` must be positive on the returned span
/// for the normalisation of `eta` to exist, so the last tier skips
/// numerically non-positive eigenvalues.
pub fn band_select_with_fallback(
    eig: &Eigen,
    strict: (f64, f64),
    widened: (f64, f64),
    count: usize,
    rank_tol: f64,
) -> BandSelection {
    let first = band_select(eig, strict.0, strict.1, count);
    if first.found >= count {
        return first;
    }
    let mut second = band_select(eig, widened.0, widened.1, count);
    if second.found >= count {
        second.tier = BandTier::Widened;
        return second;
    }
    let scale = eig.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let positive: Vec<usize> = (0..eig.values.len())
        .filter(|&i| eig.values[i] > rank_tol * scale)
        .collect();
    let picked = nearest_to(eig, positive, 0.5 * (strict.0 + strict.1), count);
    selection(eig, &picked, first.found, BandTier::Nearest)
}

fn nearest_to(eig: &Eigen, mut idx: Vec<usize>, centre: f64, max_count: usize) -> Vec<usize> {
    idx.sort_by(|&a, &b| {
        (eig.values[a] - centre)
            .abs()
            .total_cmp(&(eig.values[b] - centre).abs())
            .then(a.cmp(&b))
    });
    idx.truncate(max_count);
    idx.sort_unstable();
    idx
}

fn selection(eig: &Eigen, picked: &[usize], found: usize, tier: BandTier) -> BandSelection {
    let k = eig.vectors.nrows();
    let basis = DMatrix::from_fn(k, picked.len(), |r, c| eig.vectors[(r, picked[c])]);
    BandSelection {
        basis,
        eigenvalues: picked.iter().map(|&i| eig.values[i]).collect(),
        found,
        tier,
    }
}

/// Orthonormal basis (columns) of `{z : a z = 0}`: right singular vectors
/// whose singular value is at most `rank_tol * max(sigma_max, floor)`.
pub fn nullspace(a: &DMatrix<f64>, rank_tol: f64, floor: f64) -> DMatrix<f64> {
    let cols = a.ncols();
    if cols == 0 {
        return DMatrix::zeros(0, 0);
    }
    if a.nrows() == 0 {
        return DMatrix::identity(cols, cols);
    }
    // Pad so the decomposition returns a full set of right singular vectors.
    let padded = if a.nrows() < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (a.nrows(), cols)).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let sigma_max = svd.singular_values.iter().fold(0.0f64, |m, s| m.max(*s));
    let threshold = rank_tol * sigma_max.max(floor);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= threshold)
        .collect();
    DMatrix::from_fn(cols, keep.len(), |r, c| v_t[(keep[c], r)])
}

/// Orthonormal basis of `span(a) ∩ span(b) ∩ {x : x M = 0 for every M}`.
///
/// The intersection is built block by block (span first, then each
/// constraint) so that a collapse to dimension zero names its cause.
pub fn constrained_subspace(
    span_a: &DMatrix<f64>,
    span_b: &DMatrix<f64>,
    constraints: &[&DMatrix<f64>],
    rank_tol: f64,
) -> Result<DMatrix<f64>> {
    let k = span_a.nrows();
    if span_b.nrows() != k {
        return Err(Error::param("span bases live in different dimensions"));
    }
    // Component of span_a outside span_b must vanish.
    let outside = span_a - span_b * (span_b.transpose() * span_a);
    let z = nullspace(&outside, rank_tol, 1.0);
    let mut basis = span_a * z;
    if basis.ncols() == 0 {
        return Err(Error::EmptySubspace {
            family: "intersection of the Phi and Psi eigenbands".into(),
        });
    }
    for (i, m) in constraints.iter().enumerate() {
        if m.nrows() != k {
            return Err(Error::param(format!(
                "constraint {i} has {} rows, expected {k}",
                m.nrows()
            )));
        }
        let block = m.transpose() * &basis;
        let z = nullspace(&block, rank_tol, 0.0);
        basis = &basis * z;
        if basis.ncols() == 0 {
            return Err(Error::EmptySubspace {
                family: format!("history constraint {i} ({}x{})", m.nrows(), m.ncols()),
            });
        }
    }
    Ok(basis)
}

/// Per-vector warnings raised while choosing `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EtaFlags {
    pub psi_out_of_band: bool,
    pub norm_out_of_window: bool,
}

/// Test directions of one step. Row `i` of `etas` is `eta_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaSet {
    pub etas: DMatrix<f64>,
    pub gram_phi: DMatrix<f64>,
    pub gram_psi: DMatrix<f64>,
    pub gram_m_gamma: DMatrix<f64>,
    pub gram_m_pi: DMatrix<f64>,
    pub flags: Vec<EtaFlags>,
    /// Pairwise linear constraints imposed on each vector: `3 (i - 1)`.
    pub pairwise_constraints: Vec<usize>,
    pub redraws: usize,
}

impl EtaSet {
    pub fn len(&self) -> usize {
        self.etas.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.etas.nrows() == 0
    }

    /// `eta_i Psi eta_i^*` for each vector.
    pub fn psi_diag(&self) -> Vec<f64> {
        self.gram_psi.diagonal().iter().copied().collect()
    }

    pub fn any_flag(&self) -> bool {
        self.flags.iter().any(|f| f.psi_out_of_band || f.norm_out_of_window)
    }
}

/// Inputs of [`select_eta`] for one step.
#[derive(Debug, Clone, Copy)]
pub struct EtaProblem<'a> {
    pub v_basis: &'a DMatrix<f64>,
    pub m_gamma: &'a DMatrix<f64>,
    pub m_pi: &'a DMatrix<f64>,
    pub psi: &'a DMatrix<f64>,
    pub phi: &'a DMatrix<f64>,
    pub eps_t: f64,
    pub count: usize,
    pub eta_tol: f64,
    pub rank_tol: f64,
}

const MAX_REDRAWS: usize = 50;

/// Chooses `count` vectors in `span(v_basis)`, mutually orthogonal under
/// `M_Gamma`, `M_Pi` and `Psi`, each normalised to `eta Phi eta^* = 1`.
///
/// Each vector is a seeded Gaussian direction in basis coordinates with the
/// constraints from earlier vectors projected out, then rescaled. The `Psi`
/// band and the norm window are checked and flagged, not enforced.
pub fn select_eta(p: &EtaProblem<'_>, rng: &mut Rng) -> Result<EtaSet> {
    let k = p.v_basis.nrows();
    let d = p.v_basis.ncols();
    if p.count > d {
        return Err(Error::param(format!(
            "asked for {} eta vectors from a {d}-dimensional subspace",
            p.count
        )));
    }
    for (name, m) in [("M_Gamma", p.m_gamma), ("M_Pi", p.m_pi), ("Psi", p.psi), ("Phi", p.phi)] {
        if m.shape() != (k, k) {
            return Err(Error::param(format!("{name} must be {k}x{k}")));
        }
    }

    let mut etas: Vec<DVector<f64>> = Vec::with_capacity(p.count);
    let mut redraws = 0;
    for i in 0..p.count {
        // Rows are the functionals x -> <M eta_j, x> for every earlier eta_j.
        let mut rows = DMatrix::zeros(3 * i, k);
        for (j, e) in etas.iter().enumerate() {
            for (f, m) in [p.m_gamma, p.m_pi, p.psi].into_iter().enumerate() {
                rows.row_mut(3 * j + f).copy_from(&(m * e).transpose());
            }
        }
        let allowed = nullspace(&(rows * p.v_basis), p.rank_tol, 0.0);

        let mut chosen = None;
        for _ in 0..MAX_REDRAWS {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let projected = &allowed * (allowed.transpose() * &z);
            let x = p.v_basis * &projected;
            let q = x.dot(&(p.phi * &x));
            if projected.norm() > 1e-12 * z.norm() && q > 1e-12 * x.norm_squared() {
                chosen = Some(x / q.sqrt());
                break;
            }
            redraws += 1;
        }
        match chosen {
            Some(eta) => etas.push(eta),
            None => {
                return Err(Error::EtaSelection {
                    index: i,
                    attempts: MAX_REDRAWS,
                })
            }
        }
    }

    let h = DMatrix::from_fn(etas.len(), k, |r, c| etas[r][c]);
    let gram = |m: &DMatrix<f64>| &h * m * h.transpose();
    let gram_phi = gram(p.phi);
    let gram_psi = gram(p.psi);
    let gram_m_gamma = gram(p.m_gamma);
    let gram_m_pi = gram(p.m_pi);

    for i in 0..etas.len() {
        let mut worst = (gram_phi[(i, i)] - 1.0).abs();
        for j in 0..etas.len() {
            if i != j {
                worst = worst
                    .max(gram_psi[(i, j)].abs())
                    .max(gram_m_gamma[(i, j)].abs())
                    .max(gram_m_pi[(i, j)].abs());
            }
        }
        if worst > p.eta_tol {
            return Err(Error::Numeric {
                message: format!("eta {i} violates its constraints by {worst:e}"),
                estimate: worst,
            });
        }
    }

    let flags = etas
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let psi_val = gram_psi[(i, i)];
            let norm = e.norm();
            EtaFlags {
                psi_out_of_band: !(psi_val >= 0.5 * p.eps_t && psi_val <= 2.0 * p.eps_t),
                norm_out_of_window: !(norm > 0.25 && norm < 4.0),
            }
        })
        .collect();

    Ok(EtaSet {
        etas: h,
        gram_phi,
        gram_psi,
        gram_m_gamma,
        gram_m_pi,
        flags,
        pairwise_constraints: (0..etas.len()).map(|i| 3 * i).collect(),
        redraws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn random_symmetric(k: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = stream(seed, Stream::Eta, 99);
        let a = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        (&a + a.transpose()) * 0.5
    }

    #[test]
    fn identity_and_diagonal_spectra() {
        let e = sym_eig(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        let e = sym_eig(&DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 2.0]))).unwrap();
        assert_eq!(e.values, vec![2.0, -1.0]);
        assert!((e.vectors[(1, 0)].abs() - 1.0).abs() < 1e-14);
        assert!((e.vectors[(0, 1)].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn reconstruction_and_orthonormality() {
        let s = random_symmetric(20, 1);
        let e = sym_eig(&s).unwrap();
        let lambda = DMatrix::from_diagonal(&DVector::from_vec(e.values.clone()));
        let rebuilt = &e.vectors * lambda * e.vectors.transpose();
        assert!((&s - rebuilt).norm() <= 1e-8 * s.norm().max(1.0));
        let gram = e.vectors.transpose() * &e.vectors - DMatrix::identity(20, 20);
        assert!(gram.amax() <= 1e-10);
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn eigenvalues_match_characteristic_polynomial_roots() {
        let s = random_symmetric(4, 2);
        // Faddeev-LeVerrier coefficients of det(x I - s).
        let n = 4;
        let mut coeffs = vec![1.0];
        let mut m = DMatrix::<f64>::zeros(n, n);
        let id = DMatrix::<f64>::identity(n, n);
        for k in 1..=n {
            m = &s * &m + &id * coeffs[k - 1];
            let c = -(&s * &m).trace() / k as f64;
            coeffs.push(c);
        }
        let poly = |x: f64| coeffs.iter().fold(0.0, |acc, c| acc * x + c);
        // Bracket roots on a fine grid within the Gershgorin radius, then bisect.
        let radius = (0..n)
            .map(|i| (0..n).map(|j| s[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
            + 1.0;
        let steps = 200_000;
        let mut roots = Vec::new();
        let mut prev_x = -radius;
        let mut prev = poly(prev_x);
        for i in 1..=steps {
            let x = -radius + 2.0 * radius * i as f64 / steps as f64;
            let v = poly(x);
            if prev == 0.0 || prev.signum() != v.signum() {
                let (mut a, mut b) = (prev_x, x);
                for _ in 0..200 {
                    let mid = 0.5 * (a + b);
                    if poly(a).signum() == poly(mid).signum() {
                        a = mid;
                    } else {
                        b = mid;
                    }
                }
                roots.push(0.5 * (a + b));
            }
            prev_x = x;
            prev = v;
        }
        roots.sort_by(|a, b| b.total_cmp(a));
        let e = sym_eig(&s).unwrap();
        assert_eq!(roots.len(), 4);
        for (r, v) in roots.iter().zip(&e.values) {
            assert!((r - v).abs() < 1e-9, "{r} vs {v}");
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut s = DMatrix::identity(2, 2);
        s[(0, 1)] = f64::NAN;
        assert!(matches!(sym_eig(&s), Err(Error::Numeric { .. })));
    }

    #[test]
    fn band_select_on_identity_and_diagonal() {
        let e = sym_eig(&DMatrix::identity(12, 12)).unwrap();
        let sel = band_select(&e, 0.9, 1.1, 9);
        assert_eq!(sel.basis.ncols(), 9);
        assert_eq!(sel.found, 12);
        let gram = sel.basis.transpose() * &sel.basis;
        assert!((gram - DMatrix::identity(9, 9)).amax() < 1e-12);

        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.05, 5.0]));
        let sel = band_select(&sym_eig(&d).unwrap(), 0.9, 1.1, 2);
        assert_eq!(sel.found, 2);
        let mut axes: Vec<usize> = (0..2)
            .map(|c| (0..3).find(|&r| sel.basis[(r, c)].abs() > 0.5).unwrap())
            .collect();
        axes.sort_unstable();
        assert_eq!(axes, vec![0, 1]);
    }

    #[test]
    fn band_fallback_tiers() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.4, 0.6, 1.3, 0.7]));
        let e = sym_eig(&d).unwrap();
        let sel = band_select_with_fallback(&e, (0.9, 1.1), (0.5, 1.5), 3, 1e-8);
        assert_eq!(sel.tier, BandTier::Widened);
        assert_eq!(sel.basis.ncols(), 3);

        let ones = DMatrix::from_element(4, 4, 1.0);
        let e = sym_eig(&ones).unwrap();
        let sel = band_select_with_fallback(&e, (0.9, 1.1), (0.5, 1.5), 3, 1e-8);
        assert_eq!(sel.tier, BandTier::Nearest);
        // Only the eigenvalue 4 is positive.
        assert_eq!(sel.basis.ncols(), 1);
        assert!((sel.eigenvalues[0] - 4.0).abs() < 1e-12);
    }

    fn axes(k: usize, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(k, idx.len(), |r, c| if r == idx[c] { 1.0 } else { 0.0 })
    }

    #[test]
    fn subspace_without_constraints() {
        let full = DMatrix::identity(5, 5);
        let b = constrained_subspace(&full, &full, &[], 1e-8).unwrap();
        assert_eq!(b.ncols(), 5);
        assert!((b.transpose() * &b - DMatrix::identity(5, 5)).amax() < 1e-12);

        let b = constrained_subspace(&axes(3, &[0, 1]), &axes(3, &[1, 2]), &[], 1e-8).unwrap();
        assert_eq!(b.ncols(), 1);
        assert!((b[(1, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn subspace_collapse_names_family() {
        let err = constrained_subspace(&axes(3, &[0]), &axes(3, &[1]), &[], 1e-8).unwrap_err();
        assert!(matches!(err, Error::EmptySubspace { ref family } if family.contains("eigenband")));
        let c = DMatrix::identity(3, 3);
        let full = DMatrix::identity(3, 3);
        let err = constrained_subspace(&full, &full, &[&c], 1e-8).unwrap_err();
        assert!(matches!(err, Error::EmptySubspace { ref family } if family.contains("constraint 0")));
    }

    /// Rank by Gaussian elimination with partial pivoting.
    fn rank_by_elimination(m: &DMatrix<f64>, tol: f64) -> usize {
        let mut a = m.clone();
        let (rows, cols) = a.shape();
        let mut rank = 0;
        for c in 0..cols {
            if rank == rows {
                break;
            }
            let pivot = (rank..rows).max_by(|&i, &j| a[(i, c)].abs().total_cmp(&a[(j, c)].abs())).unwrap();
            if a[(pivot, c)].abs() <= tol {
                continue;
            }
            a.swap_rows(rank, pivot);
            for r in rank + 1..rows {
                let f = a[(r, c)] / a[(rank, c)];
                for cc in c..cols {
                    a[(r, cc)] -= f * a[(rank, cc)];
                }
            }
            rank += 1;
        }
        rank
    }

    #[test]
    fn subspace_dimension_matches_rank_oracle() {
        let k = 24;
        let span_a = sym_eig(&random_symmetric(k, 3)).unwrap().vectors.columns(0, 18).into_owned();
        let span_b = sym_eig(&random_symmetric(k, 4)).unwrap().vectors.columns(0, 18).into_owned();
        let mut rng = stream(5, Stream::Eta, 0);
        let c1 = DMatrix::from_fn(k, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let c2 = DMatrix::from_fn(k, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let basis = constrained_subspace(&span_a, &span_b, &[&c1, &c2], 1e-8).unwrap();

        // x = A z: (I - B B^T) A z = 0, C1^T A z = 0, C2^T A z = 0.
        let outside = &span_a - &span_b * (span_b.transpose() * &span_a);
        let mut stacked = DMatrix::zeros(k + 8, 18);
        stacked.view_mut((0, 0), (k, 18)).copy_from(&outside);
        stacked.view_mut((k, 0), (4, 18)).copy_from(&(c1.transpose() * &span_a));
        stacked.view_mut((k + 4, 0), (4, 18)).copy_from(&(c2.transpose() * &span_a));
        let expected = 18 - rank_by_elimination(&stacked, 1e-9);
        assert_eq!(basis.ncols(), expected);
        assert_eq!(expected, 12 - 8);
        assert!((c1.transpose() * &basis).amax() < 1e-10);
        assert!((basis.transpose() * &basis - DMatrix::identity(expected, expected)).amax() < 1e-10);
    }

    fn problem<'a>(
        v: &'a DMatrix<f64>,
        mg: &'a DMatrix<f64>,
        mp: &'a DMatrix<f64>,
        psi: &'a DMatrix<f64>,
        phi: &'a DMatrix<f64>,
        eps_t: f64,
        count: usize,
    ) -> EtaProblem<'a> {
        EtaProblem {
            v_basis: v,
            m_gamma: mg,
            m_pi: mp,
            psi,
            phi,
            eps_t,
            count,
            eta_tol: 1e-8,
            rank_tol: 1e-8,
        }
    }

    #[test]
    fn eta_at_initial_step_hits_psi_exactly() {
        let k = 24;
        let eps0 = 0.12;
        let phi = DMatrix::identity(k, k);
        let psi = DMatrix::identity(k, k) * eps0;
        let v = DMatrix::identity(k, k).columns(0, 18).into_owned();
        let p = problem(&v, &phi, &phi, &psi, &phi, eps0, 2);
        let set = select_eta(&p, &mut stream(1, Stream::Eta, 0)).unwrap();
        for val in set.psi_diag() {
            assert!((val - eps0).abs() < 1e-14);
        }
        assert!(!set.any_flag());
    }

    #[test]
    fn single_eta_only_needs_normalisation() {
        let k = 6;
        let phi = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 0.5, 1.0, 1.0, 3.0]));
        let psi = DMatrix::identity(k, k) * 0.1;
        let v = DMatrix::identity(k, k);
        let p = problem(&v, &psi, &psi, &psi, &phi, 0.1, 1);
        let set = select_eta(&p, &mut stream(2, Stream::Eta, 0)).unwrap();
        assert_eq!(set.len(), 1);
        assert!((set.gram_phi[(0, 0)] - 1.0).abs() < 1e-12);
        assert_eq!(set.pairwise_constraints, vec![0]);
    }

    #[test]
    fn eta_constraints_hold_under_direct_evaluation() {
        let k = 24;
        let phi = DMatrix::identity(k, k) + random_symmetric(k, 10) * 0.02;
        let psi = DMatrix::identity(k, k) * 0.1 + random_symmetric(k, 11) * 0.005;
        let mg = phi.clone() + random_symmetric(k, 12) * 0.01;
        let mp = phi.clone() + random_symmetric(k, 13) * 0.01;
        let v = DMatrix::identity(k, k).columns(0, 16).into_owned();
        let p = problem(&v, &mg, &mp, &psi, &phi, 0.1, 2);
        let set = select_eta(&p, &mut stream(3, Stream::Eta, 0)).unwrap();
        let e0 = set.etas.row(0).transpose();
        let e1 = set.etas.row(1).transpose();
        assert!((e0.dot(&(&phi * &e0)) - 1.0).abs() <= 1e-8);
        assert!((e1.dot(&(&phi * &e1)) - 1.0).abs() <= 1e-8);
        for m in [&mg, &mp, &psi] {
            assert!(e0.dot(&(m * &e1)).abs() <= 1e-8);
        }
        assert_eq!(set.pairwise_constraints, vec![0, 3]);
    }

    #[test]
    fn eta_selection_is_deterministic() {
        let k = 12;
        let phi = DMatrix::identity(k, k);
        let psi = DMatrix::identity(k, k) * 0.2;
        let v = DMatrix::identity(k, k);
        let p = problem(&v, &phi, &phi, &psi, &phi, 0.2, 3);
        let a = select_eta(&p, &mut stream(4, Stream::Eta, 0)).unwrap();
        let b = select_eta(&p, &mut stream(4, Stream::Eta, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eta_fails_on_null_phi() {
        let k = 3;
        let zero = DMatrix::zeros(k, k);
        let v = DMatrix::identity(k, k);
        let p = problem(&v, &zero, &zero, &zero, &zero, 0.1, 1);
        assert!(matches!(
            select_eta(&p, &mut stream(5, Stream::Eta, 0)),
            Err(Error::EtaSelection { .. })
        ));
    }
}
