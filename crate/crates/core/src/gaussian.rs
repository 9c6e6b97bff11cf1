//! Gaussian states in the (mu, sigma) representation and the four Gaussian gates.
//!
//! Quadratures are ordered `x1, p1, x2, p2, ...` with `[x, p] = i/2`, so the vacuum
//! covariance is `I/4`. Mode indices are 1-based throughout the public API.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum eigenvalue of `sigma + i*Omega/4` still accepted as physical.
pub const VALIDITY_TOLERANCE: f64 = -1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
}

impl GaussianState {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        if sigma.nrows() != sigma.ncols() {
            return Err(Error::NonSquare { rows: sigma.nrows(), cols: sigma.ncols() });
        }
        if sigma.nrows() == 0 || !sigma.nrows().is_multiple_of(2) || mu.len() != sigma.nrows() {
            return Err(Error::InvalidParameter(format!(
                "mu of length {} does not match a {}x{} covariance over whole modes",
                mu.len(),
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        Ok(Self { mu, sigma })
    }

    pub fn n_modes(&self) -> usize {
        self.mu.len() / 2
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn into_parts(self) -> (DVector<f64>, DMatrix<f64>) {
        (self.mu, self.sigma)
    }

    /// Appends `extra` vacuum modes after the existing ones.
    pub fn with_vacuum_modes(&self, extra: usize) -> Self {
        let n = self.mu.len();
        let m = n + 2 * extra;
        let mut mu = DVector::zeros(m);
        mu.rows_mut(0, n).copy_from(&self.mu);
        let mut sigma = DMatrix::identity(m, m) * 0.25;
        sigma.view_mut((0, 0), (n, n)).copy_from(&self.sigma);
        Self { mu, sigma }
    }

    pub fn is_valid(&self) -> bool {
        check_valid(&self.sigma).unwrap_or(false)
    }
}

/// N-mode vacuum: `mu = 0`, `sigma = I/4`.
pub fn vacuum_state(n_modes: usize) -> Result<GaussianState> {
    if n_modes == 0 {
        return Err(Error::NoModes);
    }
    let dim = 2 * n_modes;
    Ok(GaussianState { mu: DVector::zeros(dim), sigma: DMatrix::identity(dim, dim) * 0.25 })
}

/// Block-diagonal symplectic form built from `[[0, 1], [-1, 0]]`.
pub fn symplectic_form(n_modes: usize) -> DMatrix<f64> {
    let dim = 2 * n_modes;
    let mut omega = DMatrix::zeros(dim, dim);
    for k in 0..n_modes {
        omega[(2 * k, 2 * k + 1)] = 1.0;
        omega[(2 * k + 1, 2 * k)] = -1.0;
    }
    omega
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateKind {
    #[serde(rename = "R")]
    PhaseShifter,
    #[serde(rename = "S1")]
    SingleModeSqueezer,
    #[serde(rename = "B")]
    BeamSplitter,
    #[serde(rename = "S2")]
    TwoModeSqueezer,
}

impl GateKind {
    pub const ALL: [GateKind; 4] = [
        GateKind::PhaseShifter,
        GateKind::SingleModeSqueezer,
        GateKind::BeamSplitter,
        GateKind::TwoModeSqueezer,
    ];

    pub fn arity(self) -> usize {
        match self {
            GateKind::PhaseShifter | GateKind::SingleModeSqueezer => 1,
            GateKind::BeamSplitter | GateKind::TwoModeSqueezer => 2,
        }
    }

    pub fn is_squeezer(self) -> bool {
        matches!(self, GateKind::SingleModeSqueezer | GateKind::TwoModeSqueezer)
    }

    pub fn is_passive(self) -> bool {
        !self.is_squeezer()
    }

    pub fn symbol(self) -> &'static str {
        match self {
            GateKind::PhaseShifter => "R",
            GateKind::SingleModeSqueezer => "S1",
            GateKind::BeamSplitter => "B",
            GateKind::TwoModeSqueezer => "S2",
        }
    }
}

impl FromStr for GateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "R" => Ok(GateKind::PhaseShifter),
            "S1" => Ok(GateKind::SingleModeSqueezer),
            "B" => Ok(GateKind::BeamSplitter),
            "S2" => Ok(GateKind::TwoModeSqueezer),
            other => Err(Error::InvalidGate(format!("unknown gate kind {other:?}"))),
        }
    }
}

/// A gate with its 1-based mode indices. Angles are in radians, squeezing is the bare `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub kind: GateKind,
    pub modes: Vec<usize>,
    pub param: f64,
}

impl Gate {
    pub fn new(kind: GateKind, modes: Vec<usize>, param: f64) -> Result<Self> {
        let gate = Self { kind, modes, param };
        gate.check_shape()?;
        Ok(gate)
    }

    pub fn phase_shifter(mode: usize, theta: f64) -> Self {
        Self { kind: GateKind::PhaseShifter, modes: vec![mode], param: theta }
    }

    pub fn single_mode_squeezer(mode: usize, r: f64) -> Self {
        Self { kind: GateKind::SingleModeSqueezer, modes: vec![mode], param: r }
    }

    pub fn beam_splitter(i: usize, j: usize, theta: f64) -> Self {
        Self { kind: GateKind::BeamSplitter, modes: vec![i, j], param: theta }
    }

    pub fn two_mode_squeezer(i: usize, j: usize, r: f64) -> Self {
        Self { kind: GateKind::TwoModeSqueezer, modes: vec![i, j], param: r }
    }

    fn check_shape(&self) -> Result<()> {
        if self.modes.len() != self.kind.arity() {
            return Err(Error::InvalidGate(format!(
                "{} acts on {} mode(s), got {:?}",
                self.kind.symbol(),
                self.kind.arity(),
                self.modes
            )));
        }
        if self.modes.len() == 2 && self.modes[0] >= self.modes[1] {
            return Err(Error::InvalidGate(format!(
                "two-mode gate needs i < j, got {:?}",
                self.modes
            )));
        }
        if self.modes.contains(&0) {
            return Err(Error::InvalidGate("mode indices are 1-based".into()));
        }
        if !self.param.is_finite() {
            return Err(Error::InvalidGate(format!("non-finite parameter {}", self.param)));
        }
        Ok(())
    }

    pub fn validate(&self, n_modes: usize) -> Result<()> {
        self.check_shape()?;
        if let Some(&mode) = self.modes.iter().find(|&&m| m > n_modes) {
            return Err(Error::InvalidMode { mode, n_modes });
        }
        Ok(())
    }

    pub fn with_param(&self, param: f64) -> Self {
        Self { param, ..self.clone() }
    }
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let modes: Vec<String> = self.modes.iter().map(|m| m.to_string()).collect();
        write!(f, "{}({})[{}]", self.kind.symbol(), self.param, modes.join(","))
    }
}

/// Parses the tabular notation `S2(0.44993)[3,4]`.
impl FromStr for Gate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidGate(format!("cannot parse gate {s:?}"));
        let open = s.find('(').ok_or_else(bad)?;
        let close = s.find(')').ok_or_else(bad)?;
        let lb = s.find('[').ok_or_else(bad)?;
        let rb = s.rfind(']').ok_or_else(bad)?;
        if !(open < close && close < lb && lb < rb) {
            return Err(bad());
        }
        let kind: GateKind = s[..open].trim().parse()?;
        let param: f64 = s[open + 1..close].trim().parse().map_err(|_| bad())?;
        let modes = s[lb + 1..rb]
            .split(',')
            .map(|m| m.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        Gate::new(kind, modes, param)
    }
}

impl Serialize for Gate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Gate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The 2N x 2N symplectic matrix of `gate`, identity outside the gate's modes.
///
/// The two-mode squeezer uses the `-sinh(r) * sigma_z` off-diagonal blocks, which is what
/// `exp(r (a_i a_j - a_i^dag a_j^dag))` induces on the quadratures.
pub fn symplectic_matrix(gate: &Gate, n_modes: usize) -> Result<DMatrix<f64>> {
    gate.validate(n_modes)?;
    let dim = 2 * n_modes;
    let mut m = DMatrix::identity(dim, dim);
    let a = 2 * (gate.modes[0] - 1);
    match gate.kind {
        GateKind::PhaseShifter => {
            let (s, c) = gate.param.sin_cos();
            m[(a, a)] = c;
            m[(a, a + 1)] = s;
            m[(a + 1, a)] = -s;
            m[(a + 1, a + 1)] = c;
        }
        GateKind::SingleModeSqueezer => {
            m[(a, a)] = (-gate.param).exp();
            m[(a + 1, a + 1)] = gate.param.exp();
        }
        GateKind::BeamSplitter => {
            let b = 2 * (gate.modes[1] - 1);
            let (s, c) = gate.param.sin_cos();
            for k in 0..2 {
                m[(a + k, a + k)] = c;
                m[(a + k, b + k)] = s;
                m[(b + k, a + k)] = -s;
                m[(b + k, b + k)] = c;
            }
        }
        GateKind::TwoModeSqueezer => {
            let b = 2 * (gate.modes[1] - 1);
            let (c, s) = (gate.param.cosh(), gate.param.sinh());
            for k in 0..2 {
                let z = if k == 0 { 1.0 } else { -1.0 };
                m[(a + k, a + k)] = c;
                m[(a + k, b + k)] = -s * z;
                m[(b + k, a + k)] = -s * z;
                m[(b + k, b + k)] = c;
            }
        }
    }
    Ok(m)
}

/// `mu -> M mu`, `sigma -> M sigma M^T`. The gates here carry no displacement.
pub fn apply_gate(state: &GaussianState, gate: &Gate) -> Result<GaussianState> {
    let m = symplectic_matrix(gate, state.n_modes())?;
    let mu = &m * &state.mu;
    let mut sigma = &m * &state.sigma * m.transpose();
    symmetrize(&mut sigma);
    Ok(GaussianState { mu, sigma })
}

pub fn apply_gates<'a>(
    state: &GaussianState,
    gates: impl IntoIterator<Item = &'a Gate>,
) -> Result<GaussianState> {
    gates.into_iter().try_fold(state.clone(), |s, g| apply_gate(&s, g))
}

/// Removes the quadrature rows/columns of `mode` (1-based).
pub fn partial_trace(state: &GaussianState, mode: usize) -> Result<GaussianState> {
    let n = state.n_modes();
    if mode == 0 || mode > n {
        return Err(Error::InvalidMode { mode, n_modes: n });
    }
    if n == 1 {
        return Err(Error::LastMode);
    }
    let a = 2 * (mode - 1);
    let mu = state.mu.clone().remove_rows(a, 2);
    let sigma = state.sigma.clone().remove_rows(a, 2).remove_columns(a, 2);
    Ok(GaussianState { mu, sigma })
}

/// True iff the smallest eigenvalue of the Hermitian matrix `sigma + i*Omega/4` is at least
/// [`VALIDITY_TOLERANCE`].
pub fn check_valid(sigma: &DMatrix<f64>) -> Result<bool> {
    let (rows, cols) = sigma.shape();
    if rows != cols {
        return Err(Error::NonSquare { rows, cols });
    }
    if rows == 0 || rows % 2 != 0 {
        return Err(Error::InvalidParameter(format!("covariance of odd dimension {rows}")));
    }
    // A + iB Hermitian <=> [[A, -B], [B, A]] real symmetric with each eigenvalue doubled.
    let b = symplectic_form(rows / 2) * 0.25;
    let mut real = DMatrix::zeros(2 * rows, 2 * rows);
    let a = (sigma + sigma.transpose()) * 0.5;
    real.view_mut((0, 0), (rows, rows)).copy_from(&a);
    real.view_mut((rows, rows), (rows, rows)).copy_from(&a);
    real.view_mut((0, rows), (rows, rows)).copy_from(&(-&b));
    real.view_mut((rows, 0), (rows, rows)).copy_from(&b);
    let eig = SymmetricEigen::new(real);
    Ok(eig.eigenvalues.min() >= VALIDITY_TOLERANCE)
}

/// Symplectic eigenvalues in ascending order (each listed once). Pure states give all `1/4`.
pub fn symplectic_eigenvalues(sigma: &DMatrix<f64>) -> Result<Vec<f64>> {
    let (rows, cols) = sigma.shape();
    if rows != cols {
        return Err(Error::NonSquare { rows, cols });
    }
    let eig = SymmetricEigen::new((sigma + sigma.transpose()) * 0.5);
    if eig.eigenvalues.min() <= 0.0 {
        return Err(Error::DegenerateCovariance("covariance is not positive definite".into()));
    }
    let root = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt))
        * eig.eigenvectors.transpose();
    let omega = symplectic_form(rows / 2);
    let k = &root * omega.transpose() * sigma * &omega * &root;
    let mut nu: Vec<f64> =
        SymmetricEigen::new((&k + k.transpose()) * 0.5).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
    nu.sort_by(f64::total_cmp);
    Ok(nu.into_iter().step_by(2).collect())
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Squeezing in decibels for a squeezing parameter `r`: `20 r / ln 10`.
pub fn squeezing_db(r: f64) -> f64 {
    20.0 * r.abs() / std::f64::consts::LN_10
}

/// Inverse of [`squeezing_db`].
pub fn squeezing_from_db(db: f64) -> f64 {
    db * std::f64::consts::LN_10 / 20.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax()
    }

    #[test]
    fn vacuum_conventions() {
        let v1 = vacuum_state(1).unwrap();
        assert_eq!(v1.mu().as_slice(), &[0.0, 0.0]);
        assert_eq!(v1.sigma(), &DMatrix::from_diagonal_element(2, 2, 0.25));
        let v2 = vacuum_state(2).unwrap();
        assert_eq!(v2.sigma(), &(DMatrix::identity(4, 4) * 0.25));
        assert_abs_diff_eq!(vacuum_state(4).unwrap().sigma().trace(), 2.0);
        assert_eq!(vacuum_state(0), Err(Error::NoModes));
    }

    #[test]
    fn table_blocks() {
        let theta: f64 = 0.3;
        let m = symplectic_matrix(&Gate::phase_shifter(2, theta), 3).unwrap();
        assert_eq!(m[(2, 2)], theta.cos());
        assert_eq!(m[(2, 3)], theta.sin());
        assert_eq!(m[(3, 2)], -theta.sin());
        assert_eq!(m[(0, 0)], 1.0);
        let r: f64 = 0.7;
        let s = symplectic_matrix(&Gate::single_mode_squeezer(1, r), 1).unwrap();
        assert_eq!(s, DMatrix::from_diagonal(&DVector::from_vec(vec![(-r).exp(), r.exp()])));
        let id = symplectic_matrix(&Gate::phase_shifter(3, 0.0), 3).unwrap();
        assert_eq!(id, DMatrix::identity(6, 6));
    }

    #[test]
    fn rejects_bad_modes() {
        assert!(matches!(
            symplectic_matrix(&Gate::beam_splitter(1, 3, 0.1), 2),
            Err(Error::InvalidMode { mode: 3, n_modes: 2 })
        ));
        assert!(Gate::new(GateKind::BeamSplitter, vec![2, 1], 0.1).is_err());
        assert!(Gate::new(GateKind::PhaseShifter, vec![1, 2], 0.1).is_err());
        assert!(Gate::new(GateKind::PhaseShifter, vec![0], 0.1).is_err());
    }

    #[test]
    fn rotation_leaves_vacuum() {
        let v = vacuum_state(2).unwrap();
        let out = apply_gate(&v, &Gate::phase_shifter(1, 0.7)).unwrap();
        assert!(max_abs_diff(out.sigma(), v.sigma()) < 1e-15);
    }

    #[test]
    fn two_mode_squeezed_vacuum() {
        let r: f64 = 0.45;
        let out = apply_gate(&vacuum_state(2).unwrap(), &Gate::two_mode_squeezer(1, 2, r)).unwrap();
        let (c, s) = ((2.0 * r).cosh() / 4.0, (2.0 * r).sinh() / 4.0);
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(4, 4, &[
            c, 0.0, -s, 0.0,
            0.0, c, 0.0, s,
            -s, 0.0, c, 0.0,
            0.0, s, 0.0, c,
        ]);
        assert!(max_abs_diff(out.sigma(), &expected) < 1e-14);
        assert!(out.is_valid());
        let reduced = partial_trace(&out, 2).unwrap();
        assert!(max_abs_diff(reduced.sigma(), &(DMatrix::identity(2, 2) * c)) < 1e-14);
    }

    #[test]
    fn beam_splitter_swaps_at_half_pi() {
        let (a, b) = (0.3, 0.9);
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![a, a, b, b]));
        let state = GaussianState::new(DVector::zeros(4), sigma).unwrap();
        let out = apply_gate(&state, &Gate::beam_splitter(1, 2, std::f64::consts::FRAC_PI_2)).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![b, b, a, a]));
        assert!(max_abs_diff(out.sigma(), &expected) < 1e-15);
    }

    #[test]
    fn partial_trace_cases() {
        let v3 = vacuum_state(3).unwrap();
        assert_eq!(partial_trace(&v3, 3).unwrap(), vacuum_state(2).unwrap());
        assert_eq!(partial_trace(&vacuum_state(2).unwrap(), 2).unwrap(), vacuum_state(1).unwrap());
        assert_eq!(partial_trace(&vacuum_state(1).unwrap(), 1), Err(Error::LastMode));
        assert!(partial_trace(&v3, 4).is_err());
    }

    #[test]
    fn validity_examples() {
        assert!(check_valid(&(DMatrix::identity(2, 2) * 0.25)).unwrap());
        assert!(!check_valid(&(DMatrix::identity(2, 2) * 0.125)).unwrap());
        let thermal = DMatrix::identity(2, 2) * (1.0f64).cosh() / 4.0;
        assert!(check_valid(&thermal).unwrap());
        assert!(matches!(check_valid(&DMatrix::zeros(2, 3)), Err(Error::NonSquare { .. })));
    }

    #[test]
    fn gate_notation_round_trip() {
        let g: Gate = "S2(0.44993)[3,4]".parse().unwrap();
        assert_eq!(g, Gate::two_mode_squeezer(3, 4, 0.44993));
        assert_eq!(g.to_string().parse::<Gate>().unwrap(), g);
        assert_eq!("R(0.47822)[4]".parse::<Gate>().unwrap(), Gate::phase_shifter(4, 0.47822));
        assert!("X(1)[1]".parse::<Gate>().is_err());
    }

    #[test]
    fn decibels() {
        assert_abs_diff_eq!(squeezing_db(0.44993), 3.908, epsilon = 1e-3);
        assert_abs_diff_eq!(squeezing_db(0.00096), 0.0083, epsilon = 1e-4);
        assert_abs_diff_eq!(squeezing_from_db(squeezing_db(0.3)), 0.3, epsilon = 1e-15);
    }
}
