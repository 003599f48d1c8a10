//! Two-sided Gaussian tail functionals.
//!
//! For a threshold `theta` and a standard bivariate normal pair `(X, Y)` with
//! correlation `u`:
//!
//! * `alpha(theta) = P[|X| >= theta]`
//! * `phi(u) = P[|X| >= theta, |Y| >= theta]`
//! * `iota = phi''(0) / 2`, which is also the second Taylor coefficient of `phi`.
//!
//! `phi` is a one-dimensional integral over `x` of the normal density times the
//! conditional two-sided tail of `Y | X = x`, evaluated with adaptive
//! Gauss-Kronrod quadrature. The Taylor coefficients are assembled from
//! one-dimensional tail moments through the finite combinatorial sum that
//! expands the bivariate density in powers of `u`.

use std::collections::{BinaryHeap, HashMap};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the integration window beyond the threshold. The normal density is
/// below 1e-31 past 12 standard deviations.
const TAIL_SPAN: f64 = 12.0;
/// Wider window for polynomial-weighted moments.
const MOMENT_SPAN: f64 = 16.0;
/// Highest Taylor order supported by [`taylor_c`].
pub const MAX_TAYLOR_ORDER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailParams {
    pub theta: f64,
    pub quad_tol: f64,
    pub quad_limit: usize,
}

impl TailParams {
    pub fn new(theta: f64) -> Result<Self> {
        let p = TailParams {
            theta,
            quad_tol: 1e-10,
            quad_limit: 2000,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_tol(mut self, quad_tol: f64) -> Result<Self> {
        self.quad_tol = quad_tol;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::param(format!("theta must be positive, got {}", self.theta)));
        }
        if !(self.quad_tol > 0.0 && self.quad_tol <= 1e-6) {
            return Err(Error::param(format!(
                "quad_tol must lie in (0, 1e-6], got {}",
                self.quad_tol
            )));
        }
        if self.quad_limit == 0 {
            return Err(Error::param("quad_limit must be positive"));
        }
        Ok(())
    }
}

/// Constants shared by every step of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConstants {
    pub theta: f64,
    pub alpha: f64,
    pub iota: f64,
    pub phi0: f64,
}

impl ModelConstants {
    pub fn compute(params: &TailParams) -> Result<Self> {
        params.validate()?;
        let alpha = alpha(params.theta)?;
        let iota = iota_with(params)?;
        let phi0 = phi(0.0, params)?;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Numeric {
                message: format!("alpha({}) = {alpha:e} is not in (0, 1)", params.theta),
                estimate: 0.0,
            });
        }
        if !(iota > 0.0) {
            return Err(Error::Numeric {
                message: format!("iota({}) = {iota:e} is not positive", params.theta),
                estimate: 0.0,
            });
        }
        Ok(ModelConstants {
            theta: params.theta,
            alpha,
            iota,
            phi0,
        })
    }

    /// `alpha - alpha^2`, the variance of a set indicator.
    pub fn spread(&self) -> f64 {
        self.alpha - self.alpha * self.alpha
    }
}

/// Upper tail of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z * FRAC_1_SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `P[|X| >= theta]` for standard normal `X`.
pub fn alpha(theta: f64) -> Result<f64> {
    if !(theta >= 0.0) || !theta.is_finite() {
        return Err(Error::param(format!("theta must be non-negative, got {theta}")));
    }
    Ok(libm::erfc(theta * FRAC_1_SQRT_2))
}

/// `P[|X| >= theta, |Y| >= theta]` at correlation `u`.
pub fn phi(u: f64, params: &TailParams) -> Result<f64> {
    if !(u.abs() <= 1.0) {
        return Err(Error::param(format!("correlation must lie in [-1, 1], got {u}")));
    }
    let theta = params.theta;
    let r = u.abs();
    if r == 1.0 {
        return alpha(theta);
    }
    let s = (1.0 - r * r).sqrt();
    let integrand = |x: f64| {
        normal_pdf(x) * (normal_sf((theta - r * x) / s) + normal_sf((theta + r * x) / s))
    };
    let lo = theta;
    let hi = theta + TAIL_SPAN;
    // The conditional tail switches on around x = theta / r; give the
    // integrator that point when it falls inside the window.
    let mut cuts = vec![lo];
    if r > 0.0 {
        let knee = theta / r;
        if knee > lo && knee < hi {
            cuts.push(knee);
        }
    }
    cuts.push(hi);
    let half = integrate_pieces(&integrand, &cuts, params.quad_tol / 2.0, params.quad_limit)?;
    Ok(2.0 * half)
}

/// `(2 pi)^{-1/2} \int_{|x| >= theta} x^p e^{-x^2/2} dx`; zero for odd `p`.
pub fn tail_moment(p: u32, params: &TailParams) -> Result<f64> {
    if p % 2 == 1 {
        return Ok(0.0);
    }
    let theta = params.theta;
    let f = |x: f64| x.powi(p as i32) * normal_pdf(x);
    let half = integrate_pieces(
        &f,
        &[theta, theta + MOMENT_SPAN],
        params.quad_tol / 2.0,
        params.quad_limit,
    )?;
    Ok(2.0 * half)
}

/// `phi''(0) / 2` at threshold `theta` with default quadrature settings.
pub fn iota(theta: f64) -> Result<f64> {
    iota_with(&TailParams::new(theta)?)
}

/// Curvature of `phi` at the origin from the two tail moments `a0`, `a2`:
/// the `u^2` term of the bivariate density is
/// `(x^2 y^2 / 2 - (x^2 + y^2) / 2 + 1/2)` times the product density, which
/// integrates to `(a2 - a0)^2 / 2`.
pub fn iota_with(params: &TailParams) -> Result<f64> {
    params.validate()?;
    let a0 = tail_moment(0, params)?;
    let a2 = tail_moment(2, params)?;
    Ok(0.5 * a2 * a2 - a2 * a0 + 0.5 * a0 * a0)
}

/// Taylor coefficient `c_m` of `phi` around zero, `0 <= m <= 8`.
pub fn taylor_c(m: usize, params: &TailParams) -> Result<f64> {
    if m > MAX_TAYLOR_ORDER {
        return Err(Error::param(format!(
            "Taylor order {m} exceeds supported maximum {MAX_TAYLOR_ORDER}"
        )));
    }
    params.validate()?;
    let moments: Vec<f64> = (0..=2 * m as u32)
        .map(|p| tail_moment(p, params))
        .collect::<Result<_>>()?;

    let mut total = 0.0;
    // Terms (xy)^k (-(x^2+y^2)/2)^l with k + 2l + 2z + 2r = m.
    for k in 0..=m {
        for l in 0..=(m - k) / 2 {
            let rest = m - k - 2 * l;
            if rest % 2 == 1 {
                continue;
            }
            let zr = rest / 2;
            for z in 0..=zr {
                let r = zr - z;
                let coef = odd_even_ratio(z) * binom(k + l, k) / factorial(k + l)
                    * binom_shifted(k + l, r);
                if coef == 0.0 {
                    continue;
                }
                // \int\int (xy)^k (x^2+y^2)^l over the tail quadrants, expanded
                // binomially into products of one-dimensional moments.
                let mut poly = 0.0;
                for i in 0..=l {
                    poly += binom(l, i) * moments[k + 2 * i] * moments[k + 2 * (l - i)];
                }
                total += coef * (-0.5f64).powi(l as i32) * poly;
            }
        }
    }

    if m >= 1 {
        let bound = (m as f64 + 1.0) * 4f64.powi(m as i32);
        if total.abs() > bound {
            return Err(Error::Numeric {
                message: format!("|c_{m}| = {} exceeds (m+1)4^m = {bound}", total.abs()),
                estimate: params.quad_tol,
            });
        }
    }
    Ok(total)
}

/// `(2z-1)!! / (2z)!!`.
fn odd_even_ratio(z: usize) -> f64 {
    (1..=z).map(|i| (2 * i - 1) as f64 / (2 * i) as f64).product()
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

fn binom(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).map(|i| (n - i) as f64 / (i + 1) as f64).product()
}

/// `binom(p + r - 1, r)`, the coefficient of `u^{2r}` in `(1 - u^2)^{-p}`.
/// For `p = 0` only `r = 0` survives.
fn binom_shifted(p: usize, r: usize) -> f64 {
    if p == 0 {
        return if r == 0 { 1.0 } else { 0.0 };
    }
    binom(p + r - 1, r)
}

/// Memoised `phi` for one threshold. Entries of the step matrices repeat
/// the same arguments many times.
#[derive(Debug, Clone)]
pub struct PhiCache {
    params: TailParams,
    values: HashMap<u64, f64>,
}

impl PhiCache {
    pub fn new(params: TailParams) -> Self {
        PhiCache {
            params,
            values: HashMap::new(),
        }
    }

    pub fn params(&self) -> &TailParams {
        &self.params
    }

    pub fn get(&mut self, u: f64) -> Result<f64> {
        // phi is even; key on |u| and clamp rounding overshoot at the ends.
        let r = u.abs().min(1.0);
        if let Some(v) = self.values.get(&r.to_bits()) {
            return Ok(*v);
        }
        let v = phi(r, &self.params)?;
        self.values.insert(r.to_bits(), v);
        Ok(v)
    }
}

// ---------------------------------------------------------------------------
// Adaptive Gauss-Kronrod (7, 15)
// ---------------------------------------------------------------------------

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for i in 0..7 {
        let dx = h * XGK[i];
        let pair = f(c - dx) + f(c + dx);
        kronrod += WGK[i] * pair;
        if i % 2 == 1 {
            gauss += WG[i / 2] * pair;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

struct Piece {
    a: f64,
    b: f64,
    value: f64,
    err: f64,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.err.total_cmp(&other.err)
    }
}

/// Global adaptive integration over consecutive breakpoints, bisecting the
/// piece with the largest error estimate until the summed estimate is below
/// `tol` or `limit` pieces exist.
pub fn integrate_pieces<F: Fn(f64) -> f64>(
    f: &F,
    cuts: &[f64],
    tol: f64,
    limit: usize,
) -> Result<f64> {
    let mut heap = BinaryHeap::new();
    for w in cuts.windows(2) {
        let (value, err) = gk15(f, w[0], w[1]);
        heap.push(Piece {
            a: w[0],
            b: w[1],
            value,
            err,
        });
    }
    loop {
        let total_err: f64 = heap.iter().map(|p| p.err).sum();
        if total_err <= tol {
            break;
        }
        if heap.len() >= limit {
            return Err(Error::Numeric {
                message: format!("quadrature did not converge within {limit} subdivisions"),
                estimate: total_err,
            });
        }
        let worst = heap.pop().expect("non-empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // Interval exhausted at f64 resolution; accept what we have.
            heap.push(Piece { err: 0.0, ..worst });
            continue;
        }
        for (a, b) in [(worst.a, mid), (mid, worst.b)] {
            let (value, err) = gk15(f, a, b);
            heap.push(Piece { a, b, value, err });
        }
    }
    // Sum in a fixed order so results do not depend on heap layout.
    let mut pieces = heap.into_vec();
    pieces.sort_by(|p, q| p.a.total_cmp(&q.a));
    Ok(pieces.iter().map(|p| p.value).sum())
}
