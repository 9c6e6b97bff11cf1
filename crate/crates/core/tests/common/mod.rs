//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use hombell::fock::{fock_apply_with, fock_herald, fock_single_photon_projection, FockMixture, FockState, Outcome};
use hombell::herald::{condition_click, condition_no_click, herald_single_photon_projection};
use hombell::{Error, Gate, GateKind, LcgState, Result};
use rand::Rng;

/// Cutoffs tried by the Fock oracle, and the truncation mass it tolerates.
pub const ORACLE_CUTOFFS: [usize; 6] = [12, 16, 20, 28, 36, 44];
pub const ORACLE_LEAKAGE: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Unheralded,
    Click,
    NoClick,
    SinglePhoton,
}

/// Random gates on `n_modes` modes: angles uniform in `[0, 2 pi)`, each squeezing `|r|` drawn
/// from what is left of `budget` (so the summed squeezing stays within it).
pub fn random_gates(rng: &mut impl Rng, n_modes: usize, max_gates: usize, budget: f64) -> Vec<Gate> {
    let mut left = budget;
    let count = rng.random_range(1..=max_gates);
    (0..count)
        .map(|_| {
            let kind = GateKind::ALL[rng.random_range(0..4)];
            let modes = if kind.arity() == 1 {
                vec![rng.random_range(1..=n_modes)]
            } else {
                let i = rng.random_range(1..n_modes);
                vec![i, rng.random_range(i + 1..=n_modes)]
            };
            let param = if kind.is_squeezer() {
                let r = rng.random_range(0.0..=left);
                left -= r;
                if rng.random_bool(0.5) { r } else { -r }
            } else {
                rng.random_range(0.0..2.0 * PI)
            };
            Gate::new(kind, modes, param).unwrap()
        })
        .collect()
}

/// Gaussian pipeline: prepare, then condition the last mode according to `variant`.
pub fn gaussian_side(gates: &[Gate], n_modes: usize, variant: Variant, eta: f64) -> Result<(LcgState, f64)> {
    let mut state = LcgState::vacuum(n_modes)?;
    for g in gates {
        state = state.map_gate(g)?;
    }
    match variant {
        Variant::Unheralded => Ok((state, 1.0)),
        Variant::Click => condition_click(&state, n_modes, eta),
        Variant::NoClick => condition_no_click(&state, n_modes, eta),
        Variant::SinglePhoton => herald_single_photon_projection(&state, n_modes, eta),
    }
}

/// The same pipeline in a truncated Fock space, raising the cutoff until truncation is
/// negligible. Returns the ensemble, the probability and the cutoff used.
pub fn fock_side(gates: &[Gate], n_modes: usize, variant: Variant, eta: f64) -> Result<(FockMixture, f64, usize)> {
    let mut last = Error::CutoffTooSmall { cutoff: 0, leakage: f64::NAN };
    for cutoff in ORACLE_CUTOFFS {
        let run = || -> Result<(FockMixture, f64)> {
            let mut psi = FockState::vacuum(n_modes, cutoff)?;
            for g in gates {
                psi = fock_apply_with(g, &psi, ORACLE_LEAKAGE)?;
            }
            let mix = FockMixture::pure(psi);
            match variant {
                Variant::Unheralded => Ok((mix, 1.0)),
                Variant::Click => fock_herald(&mix, n_modes, Outcome::Click, eta),
                Variant::NoClick => fock_herald(&mix, n_modes, Outcome::NoClick, eta),
                Variant::SinglePhoton => fock_single_photon_projection(&mix, n_modes, eta, ORACLE_LEAKAGE),
            }
        };
        match run() {
            Ok((mix, p)) => return Ok((mix, p, cutoff)),
            Err(e @ Error::CutoffTooSmall { .. }) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}
