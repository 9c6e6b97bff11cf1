//! Brute-force truncated-Fock-space simulator, independent of the phase-space machinery and
//! used to cross-check it on small instances.
//!
//! States are pure amplitude tensors; heralding and loss produce ensembles of pure branches.
//! Gates are exponentials of their ladder-operator generators, computed block by block over
//! the connected components of the truncated generator. Quadratures follow `x = (a + a^dag)/2`,
//! `p = (a - a^dag)/(2i)`, matching the phase-space conventions.

use nalgebra::{Complex, DMatrix, DVector};

use crate::chsh::BellMeasurement;
use crate::circuit::Circuit;
use crate::error::{Error, Result};
use crate::gaussian::{Gate, GateKind};
use crate::herald::{HeraldScheme, HERALD_IMPOSSIBLE_BELOW, SINGLE_PHOTON_TAP_ANGLE};
use crate::quadrature;

pub type C64 = Complex<f64>;

/// Largest probability mass allowed on the truncation boundary.
pub const LEAKAGE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FockState {
    /// Levels per mode (`cutoff + 1`), mode 1 most significant.
    dims: Vec<usize>,
    amps: Vec<C64>,
}

impl FockState {
    pub fn vacuum(n_modes: usize, cutoff: usize) -> Result<Self> {
        if n_modes == 0 {
            return Err(Error::NoModes);
        }
        if cutoff < 2 {
            return Err(Error::InvalidParameter(format!("Fock cutoff {cutoff} must be at least 2")));
        }
        let dims = vec![cutoff + 1; n_modes];
        let mut amps = vec![C64::new(0.0, 0.0); dims.iter().product()];
        amps[0] = C64::new(1.0, 0.0);
        Ok(Self { dims, amps })
    }

    /// Builds a state from raw amplitudes (not normalized here).
    pub fn from_amplitudes(dims: Vec<usize>, amps: Vec<C64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::NoModes);
        }
        if dims.iter().product::<usize>() != amps.len() {
            return Err(Error::InvalidParameter("amplitude count does not match the mode dimensions".into()));
        }
        Ok(Self { dims, amps })
    }

    pub fn n_modes(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    fn stride(&self, mode: usize) -> usize {
        self.dims[mode..].iter().product()
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode == 0 || mode > self.n_modes() {
            return Err(Error::InvalidMode { mode, n_modes: self.n_modes() });
        }
        Ok(())
    }

    pub fn amplitude(&self, photons: &[usize]) -> C64 {
        let idx = photons.iter().zip(&self.dims).fold(0, |acc, (n, d)| acc * d + n);
        self.amps[idx]
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Photon number of `mode` (0-based) at flat index `idx`.
    fn level(&self, idx: usize, mode: usize) -> usize {
        (idx / self.stride(mode + 1)) % self.dims[mode]
    }

    /// Probability on states with some mode at its top level.
    pub fn boundary_mass(&self) -> f64 {
        let mut mass = 0.0;
        for (idx, a) in self.amps.iter().enumerate() {
            if (0..self.n_modes()).any(|m| self.level(idx, m) + 1 == self.dims[m]) {
                mass += a.norm_sqr();
            }
        }
        mass / self.norm_sqr()
    }

    pub fn with_vacuum_mode(&self, cutoff: usize) -> Self {
        let d = cutoff + 1;
        let mut amps = vec![C64::new(0.0, 0.0); self.amps.len() * d];
        for (i, a) in self.amps.iter().enumerate() {
            amps[i * d] = *a;
        }
        let mut dims = self.dims.clone();
        dims.push(d);
        Self { dims, amps }
    }

    /// `a` (`raise == false`) or `a^dag` on a 0-based mode, truncated at the top level.
    fn ladder(&self, mode: usize, raise: bool) -> Vec<C64> {
        let stride = self.stride(mode + 1);
        let d = self.dims[mode];
        let mut out = vec![C64::new(0.0, 0.0); self.amps.len()];
        for (idx, o) in out.iter_mut().enumerate() {
            let n = (idx / stride) % d;
            if raise {
                if n >= 1 {
                    *o = self.amps[idx - stride] * (n as f64).sqrt();
                }
            } else if n + 1 < d {
                *o = self.amps[idx + stride] * ((n + 1) as f64).sqrt();
            }
        }
        out
    }

    /// `x_k |psi>` and `p_k |psi>` for every mode, in interleaved order.
    fn quadrature_images(&self) -> Vec<Vec<C64>> {
        let mut out = Vec::with_capacity(2 * self.n_modes());
        for m in 0..self.n_modes() {
            let lo = self.ladder(m, false);
            let hi = self.ladder(m, true);
            out.push(lo.iter().zip(&hi).map(|(a, b)| (a + b) * 0.5).collect());
            out.push(lo.iter().zip(&hi).map(|(a, b)| (a - b) * C64::new(0.0, -0.5)).collect());
        }
        out
    }
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Annihilation operator on `d` levels.
fn lowering(d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| if j == i + 1 { (j as f64).sqrt() } else { 0.0 })
}

fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Real anti-symmetric generator of a non-phase gate on its local modes.
fn generator(gate: &Gate, dims: &[usize]) -> DMatrix<f64> {
    let t = gate.param;
    match gate.kind {
        GateKind::SingleModeSqueezer => {
            let a = lowering(dims[0]);
            let a2 = &a * &a;
            (&a2 - a2.transpose()) * (0.5 * t)
        }
        GateKind::BeamSplitter => {
            let (ai, aj) = (lowering(dims[0]), lowering(dims[1]));
            let g = kron(&ai.transpose(), &aj) - kron(&ai, &aj.transpose());
            g * t
        }
        GateKind::TwoModeSqueezer => {
            let (ai, aj) = (lowering(dims[0]), lowering(dims[1]));
            let g = kron(&ai, &aj) - kron(&ai.transpose(), &aj.transpose());
            g * t
        }
        GateKind::PhaseShifter => unreachable!("phase shifters are applied as diagonal phases"),
    }
}

/// Connected components of the generator's sparsity graph.
fn blocks(g: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = g.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if g[(i, j)] != 0.0 || g[(j, i)] != 0.0 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a] = b;
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Applies `gate` in the truncated space. Fails if more than `tolerance` of the probability
/// ends up on the truncation boundary.
pub fn fock_apply_with(gate: &Gate, state: &FockState, tolerance: f64) -> Result<FockState> {
    gate.validate(state.n_modes())?;
    let modes: Vec<usize> = gate.modes.iter().map(|m| m - 1).collect();
    let mut out = state.clone();
    if gate.kind == GateKind::PhaseShifter {
        let m = modes[0];
        for (idx, a) in out.amps.iter_mut().enumerate() {
            let n = state.level(idx, m) as f64;
            *a *= C64::from_polar(1.0, -n * gate.param);
        }
        return Ok(out);
    }

    let dims: Vec<usize> = modes.iter().map(|&m| state.dims[m]).collect();
    let strides: Vec<usize> = modes.iter().map(|&m| state.stride(m + 1)).collect();
    let g = generator(gate, &dims);
    let local_offset = |l: usize| -> usize {
        if dims.len() == 1 {
            l * strides[0]
        } else {
            (l / dims[1]) * strides[0] + (l % dims[1]) * strides[1]
        }
    };
    let unitaries: Vec<(Vec<usize>, DMatrix<f64>)> = blocks(&g)
        .into_iter()
        .map(|idx| {
            let sub = DMatrix::from_fn(idx.len(), idx.len(), |i, j| g[(idx[i], idx[j])]);
            let offsets = idx.iter().map(|&l| local_offset(l)).collect();
            (offsets, sub.exp())
        })
        .collect();

    let bases = (0..state.amps.len()).filter(|&idx| modes.iter().all(|&m| state.level(idx, m) == 0));
    for base in bases {
        for (offsets, u) in &unitaries {
            if offsets.len() == 1 {
                out.amps[base + offsets[0]] = state.amps[base + offsets[0]] * u[(0, 0)];
                continue;
            }
            let v: Vec<C64> = offsets.iter().map(|o| state.amps[base + o]).collect();
            for (i, o) in offsets.iter().enumerate() {
                out.amps[base + o] = (0..v.len()).map(|j| v[j] * u[(i, j)]).sum();
            }
        }
    }
    let leak = out.boundary_mass();
    if leak > tolerance {
        return Err(Error::CutoffTooSmall { cutoff: *dims.iter().max().unwrap() - 1, leakage: leak });
    }
    Ok(out)
}

pub fn fock_apply(gate: &Gate, state: &FockState) -> Result<FockState> {
    fock_apply_with(gate, state, LEAKAGE_TOLERANCE)
}

/// Ensemble of normalized pure states with probabilities summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct FockMixture {
    pub branches: Vec<(f64, FockState)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Click,
    NoClick,
}

impl FockMixture {
    pub fn pure(state: FockState) -> Self {
        let n = state.norm_sqr().sqrt();
        let amps = state.amps.iter().map(|a| a / n).collect();
        Self { branches: vec![(1.0, FockState { amps, ..state })] }
    }

    pub fn n_modes(&self) -> usize {
        self.branches[0].1.n_modes()
    }

    pub fn weight_sum(&self) -> f64 {
        self.branches.iter().map(|b| b.0).sum()
    }

    pub fn map(&self, f: impl Fn(&FockState) -> Result<FockState>) -> Result<Self> {
        let branches = self.branches.iter().map(|(w, s)| Ok((*w, f(s)?))).collect::<Result<_>>()?;
        Ok(Self { branches })
    }

    pub fn boundary_mass(&self) -> f64 {
        self.branches.iter().map(|(w, s)| w * s.boundary_mass()).sum()
    }

    /// Total mean and covariance.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = 2 * self.n_modes();
        let mut mu = DVector::zeros(n);
        let mut second = DMatrix::zeros(n, n);
        for (w, s) in &self.branches {
            let q = s.quadrature_images();
            for a in 0..n {
                mu[a] += w * dot(&s.amps, &q[a]).re;
                for b in a..n {
                    let v = w * dot(&q[a], &q[b]).re;
                    second[(a, b)] += v;
                    if a != b {
                        second[(b, a)] += v;
                    }
                }
            }
        }
        let cov = second - &mu * mu.transpose();
        (mu, cov)
    }
}

/// Applies the diagonal detector operator `(1-eta)^n` (no click) or `1 - (1-eta)^n` (click)
/// on `mode`, traces the mode out, and returns the conditional ensemble and its probability.
pub fn fock_herald(mix: &FockMixture, mode: usize, outcome: Outcome, eta: f64) -> Result<(FockMixture, f64)> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidParameter(format!("detector efficiency {eta} outside [0, 1]")));
    }
    let mut branches = Vec::new();
    let mut total = 0.0;
    for (w, s) in &mix.branches {
        s.check_mode(mode)?;
        if s.n_modes() == 1 {
            return Err(Error::LastMode);
        }
        let m = mode - 1;
        let d = s.dims[m];
        let inner = s.stride(m + 1);
        let outer = s.amps.len() / (d * inner);
        let mut dims = s.dims.clone();
        dims.remove(m);
        for n in 0..d {
            let quiet = (1.0 - eta).powi(n as i32);
            let factor = match outcome {
                Outcome::NoClick => quiet,
                Outcome::Click => 1.0 - quiet,
            };
            if factor == 0.0 {
                continue;
            }
            let mut amps = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                let start = o * d * inner + n * inner;
                amps.extend_from_slice(&s.amps[start..start + inner]);
            }
            let norm: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
            let weight = w * factor * norm;
            if weight > 0.0 {
                let scale = 1.0 / norm.sqrt();
                amps.iter_mut().for_each(|a| *a *= scale);
                branches.push((weight, FockState { dims: dims.clone(), amps }));
                total += weight;
            }
        }
    }
    if !(total >= HERALD_IMPOSSIBLE_BELOW) {
        return Err(Error::HeraldImpossible { probability: total });
    }
    branches.iter_mut().for_each(|b| b.0 /= total);
    Ok((FockMixture { branches }, total))
}

/// Appends a vacuum ancilla to every branch and applies `gate`. Branches are normalized
/// individually, so truncation is judged on the weighted mass: a negligible branch may sit
/// entirely on the boundary.
fn widen_and_apply(mix: &FockMixture, gate: &Gate, cutoff: usize, tolerance: f64) -> Result<FockMixture> {
    let out = mix.map(|s| fock_apply_with(gate, &s.with_vacuum_mode(cutoff), f64::INFINITY))?;
    let leak = out.boundary_mass();
    if leak > tolerance {
        return Err(Error::CutoffTooSmall { cutoff, leakage: leak });
    }
    Ok(out)
}

/// Pure loss on `mode`: beam splitter onto a vacuum ancilla, ancilla discarded.
pub fn fock_loss(mix: &FockMixture, mode: usize, transmissivity: f64, tolerance: f64) -> Result<FockMixture> {
    let anc = mix.n_modes() + 1;
    let cutoff = mix.branches[0].1.dims[mode - 1] - 1;
    let bs = Gate::beam_splitter(mode, anc, transmissivity.sqrt().acos());
    let wide = widen_and_apply(mix, &bs, cutoff, tolerance)?;
    Ok(fock_herald(&wide, anc, Outcome::NoClick, 0.0)?.0)
}

/// Weak tap onto an ancilla, click there, no click on `mode`.
pub fn fock_single_photon_projection(
    mix: &FockMixture,
    mode: usize,
    eta: f64,
    tolerance: f64,
) -> Result<(FockMixture, f64)> {
    let anc = mix.n_modes() + 1;
    let cutoff = mix.branches[0].1.dims[mode - 1] - 1;
    let tap = Gate::beam_splitter(mode, anc, SINGLE_PHOTON_TAP_ANGLE);
    let wide = widen_and_apply(mix, &tap, cutoff, tolerance)?;
    let (clicked, p1) = fock_herald(&wide, anc, Outcome::Click, eta)?;
    let (out, p2) = fock_herald(&clicked, mode, Outcome::NoClick, eta)?;
    Ok((out, p1 * p2))
}

/// Hermite functions `h_0..h_{d-1}` at `xi` (unit-variance convention `exp(-xi^2/2)`).
fn hermite_functions(d: usize, xi: f64) -> Vec<f64> {
    let mut h = vec![0.0; d];
    h[0] = std::f64::consts::PI.powf(-0.25) * (-0.5 * xi * xi).exp();
    if d > 1 {
        h[1] = std::f64::consts::SQRT_2 * xi * h[0];
    }
    for n in 1..d.saturating_sub(1) {
        h[n + 1] = (2.0 / (n + 1) as f64).sqrt() * xi * h[n] - (n as f64 / (n + 1) as f64).sqrt() * h[n - 1];
    }
    h
}

/// Matrix of the sign of the position quadrature in the Fock basis. Position eigenfunctions
/// have definite parity, so only odd `m + n` entries survive.
pub fn sign_matrix(d: usize) -> Result<DMatrix<f64>> {
    let reach = (2.0 * d as f64 + 1.0).sqrt() + 12.0;
    let mut s = DMatrix::zeros(d, d);
    for m in 0..d {
        let diag = quadrature::integrate(|x| hermite_functions(m + 1, x)[m].powi(2), 0.0, reach, 1e-14, 10_000)?;
        if (2.0 * diag.value - 1.0).abs() > 1e-8 {
            return Err(Error::Quadrature(format!("Hermite function {m} loses {:e} outside the grid", 1.0 - 2.0 * diag.value)));
        }
        for n in (m + 1..d).step_by(2) {
            let q = quadrature::integrate(
                |x| {
                    let h = hermite_functions(n + 1, x);
                    h[m] * h[n]
                },
                0.0,
                reach,
                1e-14,
                10_000,
            )?;
            s[(m, n)] = 2.0 * q.value;
            s[(n, m)] = 2.0 * q.value;
        }
    }
    Ok(s)
}

/// `<sign(x_theta) sign(x_phi)>` of a two-mode ensemble, `x_theta = cos(theta) x + sin(theta) p`.
pub fn fock_sign_correlator(mix: &FockMixture, theta: f64, phi: f64) -> Result<f64> {
    if mix.n_modes() != 2 {
        return Err(Error::WrongModeCount { expected: 2, found: mix.n_modes() });
    }
    let dims = mix.branches[0].1.dims.clone();
    let s1 = sign_matrix(dims[0])?;
    let s2 = if dims[1] == dims[0] { s1.clone() } else { sign_matrix(dims[1])? };
    let mut total = 0.0;
    for (w, s) in &mix.branches {
        let mut rotated = fock_apply(&Gate::phase_shifter(1, theta), s)?;
        rotated = fock_apply(&Gate::phase_shifter(2, phi), &rotated)?;
        let psi = DMatrix::from_row_slice(dims[0], dims[1], &rotated.amps);
        let re = psi.map(|c| c.re);
        let im = psi.map(|c| c.im);
        let value = (re.transpose() * &s1 * &re * &s2).trace() + (im.transpose() * &s1 * &im * &s2).trace();
        total += w * value;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FockOptions {
    pub cutoff: usize,
    /// Largest cutoff tried when the boundary mass exceeds the tolerance.
    pub max_cutoff: usize,
    pub cutoff_step: usize,
    pub leakage_tolerance: f64,
}

impl Default for FockOptions {
    fn default() -> Self {
        Self { cutoff: 12, max_cutoff: 16, cutoff_step: 4, leakage_tolerance: LEAKAGE_TOLERANCE }
    }
}

#[derive(Debug, Clone)]
pub struct FockRun {
    pub state: FockMixture,
    pub probability: f64,
    pub stages: Vec<f64>,
    pub cutoff: usize,
}

fn run_at(circuit: &Circuit, bob_transmissivity: f64, cutoff: usize, tol: f64) -> Result<FockRun> {
    let mut psi = FockState::vacuum(circuit.n_modes, cutoff)?;
    for g in &circuit.gates {
        psi = fock_apply_with(g, &psi, tol)?;
    }
    let mut mix = FockMixture::pure(psi);
    let mut order = circuit.herald.modes.clone();
    order.sort_by_key(|h| std::cmp::Reverse(h.mode));
    let mut stages = Vec::new();
    for h in &order {
        let (next, p) = match h.scheme {
            HeraldScheme::Click => fock_herald(&mix, h.mode, Outcome::Click, h.eta)?,
            HeraldScheme::SinglePhotonProjection => fock_single_photon_projection(&mix, h.mode, h.eta, tol)?,
        };
        stages.push(p);
        mix = next;
    }
    if bob_transmissivity < 1.0 {
        mix = fock_loss(&mix, 2, bob_transmissivity, tol)?;
    }
    Ok(FockRun { state: mix, probability: stages.iter().product(), stages, cutoff })
}

/// Runs a circuit from the vacuum, raising the cutoff while the truncation leaks.
pub fn fock_run(circuit: &Circuit, bob_transmissivity: f64, opts: &FockOptions) -> Result<FockRun> {
    circuit.validate()?;
    let mut cutoff = opts.cutoff;
    loop {
        match run_at(circuit, bob_transmissivity, cutoff, opts.leakage_tolerance) {
            Err(Error::CutoffTooSmall { leakage, .. }) if cutoff < opts.max_cutoff => {
                log::debug!("cutoff {cutoff} leaks {leakage:e}; escalating");
                cutoff = (cutoff + opts.cutoff_step.max(1)).min(opts.max_cutoff);
            }
            other => return other,
        }
    }
}

/// The four correlators `E[x][y]` of a heralded two-mode ensemble.
pub fn fock_correlators(mix: &FockMixture, meas: &BellMeasurement) -> Result<[[f64; 2]; 2]> {
    if !(meas.alice_binning.is_sign() && meas.bob_binning.is_sign()) {
        return Err(Error::InvalidParameter("the Fock oracle only handles sign binning".into()));
    }
    let mut e = [[0.0; 2]; 2];
    for (x, &theta) in meas.theta.iter().enumerate() {
        for (y, &phi) in meas.phi.iter().enumerate() {
            e[x][y] = fock_sign_correlator(mix, theta, phi)?;
        }
    }
    Ok(e)
}
