//! Threshold-detector heralding on linear combinations of Gaussian states.
//!
//! A click outcome turns every Gaussian component into two components (one with a negative
//! weight), so heralded states are carried as an [`LcgState`]: real weights summing to one over
//! Gaussian states that share a mode count.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{self, apply_gate, partial_trace, vacuum_state, Gate, GaussianState};

/// Library-level floor below which a heralding event is reported as impossible.
pub const HERALD_IMPOSSIBLE_BELOW: f64 = 1e-30;

/// Beam-splitter angle of the weak tap used for single-photon-projection heralding.
pub const SINGLE_PHOTON_TAP_ANGLE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub state: GaussianState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LcgState {
    components: Vec<Component>,
}

impl LcgState {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidParameter("an LCG state needs a component".into()))?;
        let n = first.state.n_modes();
        if let Some(c) = components.iter().find(|c| c.state.n_modes() != n) {
            return Err(Error::WrongModeCount { expected: n, found: c.state.n_modes() });
        }
        let total = compensated_sum(components.iter().map(|c| c.weight));
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { components })
    }

    pub fn gaussian(state: GaussianState) -> Self {
        Self { components: vec![Component { weight: 1.0, state }] }
    }

    pub fn vacuum(n_modes: usize) -> Result<Self> {
        Ok(Self::gaussian(vacuum_state(n_modes)?))
    }

    pub fn n_modes(&self) -> usize {
        self.components[0].state.n_modes()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weight_sum(&self) -> f64 {
        compensated_sum(self.components.iter().map(|c| c.weight))
    }

    /// Applies a gate to every component.
    pub fn map_gate(&self, gate: &Gate) -> Result<Self> {
        self.map_states(|s| apply_gate(s, gate))
    }

    pub fn map_states(&self, f: impl Fn(&GaussianState) -> Result<GaussianState>) -> Result<Self> {
        let components = self
            .components
            .iter()
            .map(|c| Ok(Component { weight: c.weight, state: f(&c.state)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { components })
    }

    /// First and second moments of the whole combination: `(mean, covariance)`.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let dim = 2 * self.n_modes();
        let mut mean = DVector::zeros(dim);
        let mut second = DMatrix::zeros(dim, dim);
        for c in &self.components {
            mean += c.state.mu() * c.weight;
            second += (c.state.sigma() + c.state.mu() * c.state.mu().transpose()) * c.weight;
        }
        let cov = second - &mean * mean.transpose();
        (mean, cov)
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        let n = self.n_modes();
        if mode == 0 || mode > n {
            return Err(Error::InvalidMode { mode, n_modes: n });
        }
        if n == 1 {
            return Err(Error::LastMode);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeraldScheme {
    /// A click in one threshold detector.
    Click,
    /// Weak beam-splitter tap: click on the reflected port, no click on the transmitted one.
    SinglePhotonProjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeHerald {
    pub mode: usize,
    pub scheme: HeraldScheme,
    pub eta: f64,
}

/// Per-mode heralding for the modes after the two shared ones.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HeraldSpec {
    pub modes: Vec<ModeHerald>,
}

impl HeraldSpec {
    pub fn none() -> Self {
        Self::default()
    }

    /// The same scheme and efficiency on modes `3..=n_modes`.
    pub fn uniform(n_modes: usize, scheme: HeraldScheme, eta: f64) -> Self {
        Self { modes: (3..=n_modes).map(|mode| ModeHerald { mode, scheme, eta }).collect() }
    }

    pub fn validate(&self, n_modes: usize) -> Result<()> {
        let mut listed: Vec<usize> = self.modes.iter().map(|h| h.mode).collect();
        listed.sort_unstable();
        let expected: Vec<usize> = (3..=n_modes).collect();
        if listed != expected {
            return Err(Error::InvalidParameter(format!(
                "heralded modes must be exactly 3..={n_modes}, got {listed:?}"
            )));
        }
        for h in &self.modes {
            check_eta(h.eta)?;
        }
        Ok(())
    }

    pub fn with_eta(&self, eta: f64) -> Self {
        Self { modes: self.modes.iter().map(|h| ModeHerald { eta, ..*h }).collect() }
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidParameter(format!("detector efficiency {eta} outside [0, 1]")));
    }
    Ok(())
}

/// Neumaier summation: exact to rounding of the result even under heavy cancellation.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + carry
}

/// Divides the weights by `total`, then folds the rounding residual of the quotients into the
/// smallest weight that can hold it, so the stored weights sum to one. With weights near
/// `1 / p` for rare outcomes the residual is an ulp of the largest weight, far above 1e-16.
fn normalize(parts: &mut [Component], total: f64) {
    for c in parts.iter_mut() {
        c.weight /= total;
    }
    let residual = compensated_sum(parts.iter().map(|c| c.weight)) - 1.0;
    if residual == 0.0 {
        return;
    }
    let target = parts
        .iter_mut()
        .filter(|c| c.weight.abs() >= 1e6 * residual.abs())
        .min_by(|a, b| a.weight.abs().total_cmp(&b.weight.abs()));
    if let Some(c) = target {
        c.weight -= residual;
    }
}

/// No-click conditioning of a single Gaussian state on `mode` (1-based).
///
/// `F` only touches the measured mode, so `(Sigma^-1 + F)^-1` collapses by Woodbury to a 2x2
/// solve against `I + f Sigma_ii`, `f = 4 eta / (2 - eta)`; `Sigma` itself is never inverted.
pub fn no_click_gaussian(state: &GaussianState, mode: usize, eta: f64) -> Result<(GaussianState, f64)> {
    check_eta(eta)?;
    let n = state.n_modes();
    if mode == 0 || mode > n {
        return Err(Error::InvalidMode { mode, n_modes: n });
    }
    if eta == 0.0 {
        return Ok((partial_trace(state, mode)?, 1.0));
    }
    let sigma = state.sigma();
    if sigma.clone().cholesky().is_none() {
        return Err(Error::DegenerateCovariance("covariance is not positive definite".into()));
    }
    let f = 4.0 * eta / (2.0 - eta);
    let a = 2 * (mode - 1);
    let block = sigma.fixed_view::<2, 2>(a, a).into_owned();
    let inner = Matrix2::identity() + block * f;
    let chol = inner.cholesky().ok_or_else(|| {
        Error::DegenerateCovariance("I + f*Sigma_ii is not positive definite".into())
    })?;
    let cols = sigma.columns(a, 2).into_owned(); // 2N x 2
    let mu_i = Vector2::new(state.mu()[a], state.mu()[a + 1]);

    // (Sigma^-1 + F)^-1 = Sigma - f Sigma_{:,i} (I + f Sigma_ii)^-1 Sigma_{i,:}
    let solved_rows = chol.solve(&cols.transpose()); // 2 x 2N
    let mut cov = sigma - &cols * solved_rows * f;
    gaussian::symmetrize(&mut cov);
    let shift = chol.solve(&mu_i);
    let mean = state.mu() - &cols * shift * f;

    let det = inner.determinant();
    let exponent = f * mu_i.dot(&shift);
    let probability = 2.0 / (2.0 - eta) / det.sqrt() * (-0.5 * exponent).exp();

    let conditioned = GaussianState::new(mean, cov)?;
    Ok((partial_trace(&conditioned, mode)?, probability))
}

/// Conditions on no click in `mode`. Returns the renormalized state and `p_noclick`.
pub fn condition_no_click(state: &LcgState, mode: usize, eta: f64) -> Result<(LcgState, f64)> {
    check_eta(eta)?;
    state.check_mode(mode)?;
    let mut parts = Vec::with_capacity(state.len());
    for c in &state.components {
        let (s, p) = no_click_gaussian(&c.state, mode, eta)?;
        parts.push(Component { weight: c.weight * p, state: s });
    }
    let total = compensated_sum(parts.iter().map(|c| c.weight));
    if total < HERALD_IMPOSSIBLE_BELOW {
        return Err(Error::HeraldImpossible { probability: total });
    }
    normalize(&mut parts, total);
    Ok((LcgState { components: parts }, total))
}

/// Conditions on a click in `mode`: `rho_click = (rho_traced - p0 rho_noclick) / (1 - p0)` per
/// component. Returns the renormalized state (twice as many components) and `p_click`.
pub fn condition_click(state: &LcgState, mode: usize, eta: f64) -> Result<(LcgState, f64)> {
    check_eta(eta)?;
    state.check_mode(mode)?;
    let mut parts = Vec::with_capacity(2 * state.len());
    for c in &state.components {
        let traced = partial_trace(&c.state, mode)?;
        let (s, p0) = no_click_gaussian(&c.state, mode, eta)?;
        parts.push(Component { weight: c.weight, state: traced });
        parts.push(Component { weight: -c.weight * p0, state: s });
    }
    // Rare clicks cancel almost all of the weight; compensated summation keeps the
    // renormalized weights summing to one.
    let click = compensated_sum(parts.iter().map(|c| c.weight));
    if click < HERALD_IMPOSSIBLE_BELOW {
        return Err(Error::HeraldImpossible { probability: click });
    }
    normalize(&mut parts, click);
    Ok((LcgState { components: parts }, click))
}

/// Pure-loss channel on `mode` with transmissivity `tau`: a beam splitter with
/// `cos(theta) = sqrt(tau)` onto a vacuum ancilla that is then discarded.
pub fn apply_loss(state: &LcgState, mode: usize, transmissivity: f64) -> Result<LcgState> {
    if !(0.0..=1.0).contains(&transmissivity) {
        return Err(Error::InvalidParameter(format!("transmissivity {transmissivity} outside [0, 1]")));
    }
    let n = state.n_modes();
    if mode == 0 || mode > n {
        return Err(Error::InvalidMode { mode, n_modes: n });
    }
    let ancilla = n + 1;
    let bs = Gate::beam_splitter(mode, ancilla, transmissivity.sqrt().acos());
    state.map_states(|s| partial_trace(&apply_gate(&s.with_vacuum_modes(1), &bs)?, ancilla))
}

/// Approximate single-photon projection on `mode`: tap with `B(0.1)` onto a vacuum ancilla,
/// click on the reflected (ancilla) port, then no click on the transmitted port. Both
/// detectors share `eta`. Returns the joint probability.
pub fn herald_single_photon_projection(state: &LcgState, mode: usize, eta: f64) -> Result<(LcgState, f64)> {
    check_eta(eta)?;
    state.check_mode(mode)?;
    let ancilla = state.n_modes() + 1;
    let tap = Gate::beam_splitter(mode, ancilla, SINGLE_PHOTON_TAP_ANGLE);
    let widened = state.map_states(|s| apply_gate(&s.with_vacuum_modes(1), &tap))?;
    let (clicked, p_click) = condition_click(&widened, ancilla, eta)?;
    let (out, p_quiet) = condition_no_click(&clicked, mode, eta)?;
    Ok((out, p_click * p_quiet))
}

pub fn herald_mode(state: &LcgState, h: &ModeHerald) -> Result<(LcgState, f64)> {
    match h.scheme {
        HeraldScheme::Click => condition_click(state, h.mode, h.eta),
        HeraldScheme::SinglePhotonProjection => herald_single_photon_projection(state, h.mode, h.eta),
    }
}

#[derive(Debug, Clone)]
pub struct HeraldOutcome {
    pub state: LcgState,
    pub probability: f64,
    /// Stage probabilities in application order (highest mode first).
    pub stages: Vec<f64>,
}

/// Heralds every listed mode, highest index first, leaving the shared modes 1 and 2.
pub fn herald_all(state: &LcgState, spec: &HeraldSpec) -> Result<HeraldOutcome> {
    spec.validate(state.n_modes())?;
    let mut order = spec.modes.clone();
    order.sort_by_key(|h| std::cmp::Reverse(h.mode));
    let mut current = state.clone();
    let mut stages = Vec::with_capacity(order.len());
    for h in &order {
        let (next, p) = herald_mode(&current, h)?;
        stages.push(p);
        current = next;
    }
    let probability = stages.iter().product();
    Ok(HeraldOutcome { state: current, probability, stages })
}
