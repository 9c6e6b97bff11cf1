//! Homodyne statistics of heralded two-mode states and the CHSH score.
//!
//! The joint distribution of the two rotated `x` quadratures is a weighted sum of bivariate
//! normals. A binned correlator is `-1 + 2 * sum_k w_k * (mass of component k on R+)`, where
//! `R+` is the union of rectangles on which both parties' bins agree. Each rectangle mass is
//! reduced to a one-dimensional integral of a Gaussian times a difference of error functions.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::herald::LcgState;
use crate::quadrature;

/// Covariance determinants at or below this are treated as singular.
pub const DETERMINANT_FLOOR: f64 = 1e-300;
pub const RECTANGLE_TOLERANCE: f64 = 1e-12;
pub const MAX_SUBDIVISIONS: usize = 10_000;
/// Integration window in standard deviations of the outer variable; the Gaussian mass beyond
/// it is below `erfc(10 / sqrt 2) ~ 1.5e-23`.
const TAIL_SIGMAS: f64 = 10.0;
const CORRELATOR_SLACK: f64 = 1e-6;
/// Largest tolerated bound on the CHSH error. Heralded states with tiny click probabilities
/// carry huge opposite-sign weights whose cancellation amplifies per-integral errors.
pub const CHSH_PRECISION: f64 = 1e-6;
/// Rounding allowance per rectangle mass on top of the quadrature error estimate.
const MASS_ROUNDING: f64 = 1e-15;
/// Tightest quadrature tolerance requested; below this the error estimate is rounding noise.
const TOLERANCE_FLOOR: f64 = 1e-15;

/// A step function `R -> {-1, +1}` given by sorted breakpoints and one value per interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBinning")]
pub struct Binning {
    breakpoints: Vec<f64>,
    values: Vec<i8>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBinning {
    breakpoints: Vec<f64>,
    values: Vec<i8>,
}

impl TryFrom<RawBinning> for Binning {
    type Error = Error;
    fn try_from(raw: RawBinning) -> Result<Self> {
        Binning::new(raw.breakpoints, raw.values)
    }
}

impl Binning {
    pub fn new(breakpoints: Vec<f64>, values: Vec<i8>) -> Result<Self> {
        if values.len() != breakpoints.len() + 1 {
            return Err(Error::InvalidParameter(format!(
                "{} breakpoints need {} values, got {}",
                breakpoints.len(),
                breakpoints.len() + 1,
                values.len()
            )));
        }
        if breakpoints.iter().any(|b| !b.is_finite()) || breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter("breakpoints must be finite and increasing".into()));
        }
        if values.iter().any(|v| *v != 1 && *v != -1) {
            return Err(Error::InvalidParameter("bin values must be +1 or -1".into()));
        }
        Ok(Self { breakpoints, values })
    }

    /// `+1` for `x > 0`, `-1` otherwise.
    pub fn sign() -> Self {
        Self { breakpoints: vec![0.0], values: vec![-1, 1] }
    }

    pub fn is_sign(&self) -> bool {
        *self == Self::sign()
    }

    pub fn eval(&self, x: f64) -> i8 {
        let idx = self.breakpoints.partition_point(|&b| b < x);
        self.values[idx]
    }

    /// `(lower, upper, value)` for every interval, with infinite outer ends.
    pub fn intervals(&self) -> Vec<(f64, f64, i8)> {
        let mut edges = Vec::with_capacity(self.breakpoints.len() + 2);
        edges.push(f64::NEG_INFINITY);
        edges.extend_from_slice(&self.breakpoints);
        edges.push(f64::INFINITY);
        edges.windows(2).zip(&self.values).map(|(w, &v)| (w[0], w[1], v)).collect()
    }
}

/// Rectangles `[u1, v1] x [u2, v2]` on which `a(x1) * b(x2) = +1`.
pub fn agreement_rectangles(alice: &Binning, bob: &Binning) -> Vec<[f64; 4]> {
    let bob_intervals = bob.intervals();
    let mut out = Vec::new();
    for (u1, v1, a) in alice.intervals() {
        for &(u2, v2, b) in &bob_intervals {
            if a == b {
                out.push([u1, v1, u2, v2]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BellMeasurement {
    /// Alice's homodyne angles for inputs 0 and 1.
    pub theta: [f64; 2],
    /// Bob's homodyne angles for inputs 0 and 1.
    pub phi: [f64; 2],
    pub alice_binning: Binning,
    pub bob_binning: Binning,
}

impl Default for BellMeasurement {
    /// Angles `{0, pi/2}` and `{-pi/4, pi/4}` with sign binning.
    fn default() -> Self {
        Self {
            theta: [0.0, FRAC_PI_2],
            phi: [-FRAC_PI_4, FRAC_PI_4],
            alice_binning: Binning::sign(),
            bob_binning: Binning::sign(),
        }
    }
}

impl BellMeasurement {
    pub fn with_angles(theta: [f64; 2], phi: [f64; 2]) -> Self {
        Self { theta, phi, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalComponent {
    pub weight: f64,
    pub mu: [f64; 2],
    /// `[[sigma_a, sigma_c], [sigma_c, sigma_b]]`
    pub sigma: [[f64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Marginal2D {
    pub components: Vec<MarginalComponent>,
}

fn require_two_modes(state: &LcgState) -> Result<()> {
    if state.n_modes() != 2 {
        return Err(Error::WrongModeCount { expected: 2, found: state.n_modes() });
    }
    Ok(())
}

/// Joint distribution of `x1` after `R(theta)` on mode 1 and `x2` after `R(phi)` on mode 2.
/// Only the first row of each phase-shifter block survives the projection, so the rotation is
/// applied as two row vectors instead of full matrices.
pub fn homodyne_marginal(state: &LcgState, theta: f64, phi: f64) -> Result<Marginal2D> {
    require_two_modes(state)?;
    let (s1, c1) = theta.sin_cos();
    let (s2, c2) = phi.sin_cos();
    let a = [c1, s1, 0.0, 0.0];
    let b = [0.0, 0.0, c2, s2];
    let quad = |u: &[f64; 4], m: &nalgebra::DMatrix<f64>, v: &[f64; 4]| {
        let mut acc = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                acc += u[i] * m[(i, j)] * v[j];
            }
        }
        acc
    };
    let components = state
        .components()
        .iter()
        .map(|c| {
            let mu = c.state.mu();
            let sigma = c.state.sigma();
            let m1 = c1 * mu[0] + s1 * mu[1];
            let m2 = c2 * mu[2] + s2 * mu[3];
            let sa = quad(&a, sigma, &a);
            let sb = quad(&b, sigma, &b);
            let sc = quad(&a, sigma, &b);
            MarginalComponent { weight: c.weight, mu: [m1, m2], sigma: [[sa, sc], [sc, sb]] }
        })
        .collect();
    Ok(Marginal2D { components })
}

/// `erf(a) - erf(b)` without cancellation when both arguments sit in the same tail.
fn erf_diff(a: f64, b: f64) -> f64 {
    if a > 1.0 && b > 1.0 {
        libm::erfc(b) - libm::erfc(a)
    } else if a < -1.0 && b < -1.0 {
        libm::erfc(-a) - libm::erfc(-b)
    } else {
        libm::erf(a) - libm::erf(b)
    }
}

/// Bivariate normal mass of `N(mu, sigma)` on `[u1, v1] x [u2, v2]`; bounds may be infinite.
///
/// Integrates `1/(2 sqrt(pi)) * exp(-y^2) * [erf(...) - erf(...)]` over
/// `y = (x2 - mu2) / sqrt(2 sigma_b)`, the conditional mass of `x1` given `x2` being the bracket.
pub fn rectangle_integral(
    mu: [f64; 2],
    sigma: [[f64; 2]; 2],
    u1: f64,
    v1: f64,
    u2: f64,
    v2: f64,
) -> Result<f64> {
    rectangle_mass(mu, sigma, [u1, v1, u2, v2], RECTANGLE_TOLERANCE).map(|(v, _)| v)
}

/// Same as `rectangle_integral` but always by quadrature, bypassing the closed-form orthant path.
pub fn rectangle_integral_numeric(
    mu: [f64; 2],
    sigma: [[f64; 2]; 2],
    u1: f64,
    v1: f64,
    u2: f64,
    v2: f64,
) -> Result<f64> {
    rectangle_quadrature(mu, sigma, [u1, v1, u2, v2], RECTANGLE_TOLERANCE).map(|(v, _)| v)
}

/// Zero-mean CDF at a corner whose coordinates are each `-inf`, `0` or `+inf`, using
/// `P(X <= 0, Y <= 0) = 1/4 + asin(rho) / (2 pi)`.
fn orthant_cdf(x: f64, y: f64, rho: f64) -> f64 {
    if x == f64::NEG_INFINITY || y == f64::NEG_INFINITY {
        return 0.0;
    }
    match (x == 0.0, y == 0.0) {
        (true, true) => 0.25 + rho.asin() / (2.0 * PI),
        (true, false) | (false, true) => 0.5,
        (false, false) => 1.0,
    }
}

/// Closed-form mass for a zero-mean component on a rectangle with corners on the axes.
fn orthant_mass(mu: [f64; 2], sigma: [[f64; 2]; 2], rect: [f64; 4]) -> Option<f64> {
    let on_axes = rect.iter().all(|&b| b == 0.0 || b.is_infinite());
    if mu != [0.0, 0.0] || !on_axes {
        return None;
    }
    let [u1, v1, u2, v2] = rect;
    let sc = 0.5 * (sigma[0][1] + sigma[1][0]);
    let rho = (sc / (sigma[0][0] * sigma[1][1]).sqrt()).clamp(-1.0, 1.0);
    let f = |x, y| orthant_cdf(x, y, rho);
    Some(f(v1, v2) - f(u1, v2) - f(v1, u2) + f(u1, u2))
}

/// Rectangle mass and a bound on its absolute error.
fn rectangle_mass(mu: [f64; 2], sigma: [[f64; 2]; 2], rect: [f64; 4], tol: f64) -> Result<(f64, f64)> {
    check_covariance(sigma)?;
    if rect[0] >= rect[1] || rect[2] >= rect[3] {
        return Ok((0.0, 0.0));
    }
    match orthant_mass(mu, sigma, rect) {
        Some(m) => Ok((m, MASS_ROUNDING)),
        None => rectangle_quadrature(mu, sigma, rect, tol),
    }
}

fn check_covariance(sigma: [[f64; 2]; 2]) -> Result<f64> {
    let sc = 0.5 * (sigma[0][1] + sigma[1][0]);
    let det = sigma[0][0] * sigma[1][1] - sc * sc;
    if !(det > DETERMINANT_FLOOR) || !(sigma[1][1] > 0.0) || !(sigma[0][0] > 0.0) {
        return Err(Error::DegenerateCovariance(format!(
            "2x2 homodyne covariance has determinant {det:e}"
        )));
    }
    Ok(det)
}

/// Quadrature route, integrated to absolute tolerance `tol`.
fn rectangle_quadrature(mu: [f64; 2], sigma: [[f64; 2]; 2], rect: [f64; 4], tol: f64) -> Result<(f64, f64)> {
    let [u1, v1, u2, v2] = rect;
    let det = check_covariance(sigma)?;
    let sb = sigma[1][1];
    let sc = 0.5 * (sigma[0][1] + sigma[1][0]);
    if u1 >= v1 || u2 >= v2 {
        return Ok((0.0, 0.0));
    }
    let window = TAIL_SIGMAS / std::f64::consts::SQRT_2;
    let scale = (2.0 * sb).sqrt();
    let lo = ((u2 - mu[1]) / scale).max(-window);
    let hi = ((v2 - mu[1]) / scale).min(window);
    if lo >= hi {
        return Ok((0.0, 0.0));
    }
    let root_det = det.sqrt();
    let upper = (sb.sqrt() * (v1 - mu[0]) / std::f64::consts::SQRT_2) / root_det;
    let lower = (sb.sqrt() * (u1 - mu[0]) / std::f64::consts::SQRT_2) / root_det;
    let slope = sc / root_det;
    let integrand = |y: f64| (-y * y).exp() * erf_diff(upper - slope * y, lower - slope * y);
    // The erf bracket is bounded by 2, so the tolerance scales with the prefactor.
    let q = quadrature::integrate(integrand, lo, hi, tol * 2.0 * PI.sqrt(), MAX_SUBDIVISIONS)?;
    let norm = 2.0 * PI.sqrt();
    Ok((q.value / norm, q.error / norm + MASS_ROUNDING))
}

/// Binned correlator before any range check, with a bound on its numerical error.
pub fn correlator_with_error(
    state: &LcgState,
    theta: f64,
    phi: f64,
    alice: &Binning,
    bob: &Binning,
) -> Result<(f64, f64)> {
    let marginal = homodyne_marginal(state, theta, phi)?;
    let rects = agreement_rectangles(alice, bob);
    // Tighten the integrals by the weight magnitude so cancellation does not eat the accuracy.
    let kappa: f64 = marginal.components.iter().map(|c| c.weight.abs()).sum();
    let tol = (RECTANGLE_TOLERANCE / kappa.max(1.0)).max(TOLERANCE_FLOOR);
    let mut agree = 0.0;
    let mut error = 0.0;
    for c in &marginal.components {
        let mut mass = 0.0;
        let mut err = 0.0;
        for r in &rects {
            let (m, e) = rectangle_mass(c.mu, c.sigma, *r, tol)?;
            mass += m;
            err += e;
        }
        agree += c.weight * mass;
        error += c.weight.abs() * err;
    }
    Ok((-1.0 + 2.0 * agree, 2.0 * error))
}

pub fn correlator_unclamped(
    state: &LcgState,
    theta: f64,
    phi: f64,
    alice: &Binning,
    bob: &Binning,
) -> Result<f64> {
    correlator_with_error(state, theta, phi, alice, bob).map(|(v, _)| v)
}

/// `<A B>` for homodyne angles `theta` (Alice) and `phi` (Bob). Values outside
/// `[-1, 1]` by more than `1e-6` are clamped with a warning.
pub fn correlator(state: &LcgState, theta: f64, phi: f64, alice: &Binning, bob: &Binning) -> Result<f64> {
    let value = correlator_unclamped(state, theta, phi, alice, bob)?;
    Ok(clamp_correlator(value))
}

fn clamp_correlator(value: f64) -> f64 {
    if value.abs() > 1.0 + CORRELATOR_SLACK {
        log::warn!("correlator {value} outside [-1, 1]; clamping (unphysical combination weights?)");
        return value.clamp(-1.0, 1.0);
    }
    value
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChshResult {
    pub score: f64,
    /// `correlators[x][y] = <A_x B_y>`
    pub correlators: [[f64; 2]; 2],
    /// Worst-case absolute error of `score` from quadrature and rounding, amplified by the
    /// combination weights.
    pub error_bound: f64,
}

/// `|<A0B0> + <A0B1> + <A1B0> - <A1B1>|`. Fails with `Unresolved` when the accumulated error
/// bound exceeds `CHSH_PRECISION`.
pub fn chsh_score(state: &LcgState, meas: &BellMeasurement) -> Result<ChshResult> {
    chsh_score_within(state, meas, CHSH_PRECISION)
}

/// As [`chsh_score`] with a caller-chosen error budget.
pub fn chsh_score_within(state: &LcgState, meas: &BellMeasurement, precision: f64) -> Result<ChshResult> {
    let mut correlators = [[0.0; 2]; 2];
    let mut bound = 0.0;
    for (x, &theta) in meas.theta.iter().enumerate() {
        for (y, &phi) in meas.phi.iter().enumerate() {
            let (v, e) = correlator_with_error(state, theta, phi, &meas.alice_binning, &meas.bob_binning)?;
            correlators[x][y] = clamp_correlator(v);
            bound += e;
        }
    }
    if !(bound <= precision) {
        return Err(Error::Unresolved { bound });
    }
    let e = &correlators;
    let score = (e[0][0] + e[0][1] + e[1][0] - e[1][1]).abs();
    Ok(ChshResult { score, correlators, error_bound: bound })
}
