//! Circuits (gates plus heralding) and the full evaluation pipeline:
//! vacuum -> gates -> heralding -> optional fibre loss on Bob's mode -> CHSH.

use serde::{Deserialize, Serialize};

use crate::chsh::{chsh_score_within, BellMeasurement, CHSH_PRECISION};
use crate::error::{Error, Result};
use crate::gaussian::{apply_gates, vacuum_state, Gate, GaussianState};
use crate::herald::{apply_loss, herald_all, HeraldSpec, LcgState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCircuit")]
pub struct Circuit {
    pub n_modes: usize,
    /// Applied in list order.
    pub gates: Vec<Gate>,
    pub herald: HeraldSpec,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCircuit {
    n_modes: usize,
    gates: Vec<Gate>,
    #[serde(default)]
    herald: HeraldSpec,
}

impl TryFrom<RawCircuit> for Circuit {
    type Error = Error;

    fn try_from(raw: RawCircuit) -> Result<Self> {
        Circuit::new(raw.n_modes, raw.gates, raw.herald)
    }
}

impl Circuit {
    pub fn new(n_modes: usize, gates: Vec<Gate>, herald: HeraldSpec) -> Result<Self> {
        let c = Self { n_modes, gates, herald };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_modes < 2 {
            return Err(Error::InvalidParameter(format!(
                "a Bell circuit needs at least 2 modes, got {}",
                self.n_modes
            )));
        }
        for g in &self.gates {
            g.validate(self.n_modes)?;
        }
        self.herald.validate(self.n_modes)
    }

    pub fn params(&self) -> Vec<f64> {
        self.gates.iter().map(|g| g.param).collect()
    }

    pub fn with_params(&self, params: &[f64]) -> Self {
        assert_eq!(params.len(), self.gates.len(), "one parameter per gate");
        let gates = self.gates.iter().zip(params).map(|(g, &p)| g.with_param(p)).collect();
        Self { gates, ..self.clone() }
    }

    /// Gaussian state before heralding.
    pub fn prepare(&self) -> Result<GaussianState> {
        apply_gates(&vacuum_state(self.n_modes)?, &self.gates)
    }

    pub fn squeezer_count(&self) -> usize {
        self.gates.iter().filter(|g| g.kind.is_squeezer()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// A heralding stage below this probability counts as failed and the shared state is
    /// replaced by the two-mode vacuum. Zero keeps library semantics (errors propagate).
    pub failure_threshold: f64,
    /// Fibre transmissivity applied to Bob's mode (mode 2) after heralding.
    pub bob_transmissivity: f64,
    /// Largest tolerated error bound on the CHSH score (see `Error::Unresolved`).
    pub chsh_precision: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { failure_threshold: 0.0, bob_transmissivity: 1.0, chsh_precision: CHSH_PRECISION }
    }
}

#[derive(Debug, Clone)]
pub struct Heralded {
    pub state: LcgState,
    pub probability: f64,
    pub stages: Vec<f64>,
    /// False when a stage fell below the failure threshold.
    pub succeeded: bool,
}

/// Prepares and heralds the circuit. With a positive threshold, failures become the vacuum.
pub fn herald_circuit(circuit: &Circuit, opts: &EvalOptions) -> Result<Heralded> {
    let prepared = LcgState::gaussian(circuit.prepare()?);
    let soft = opts.failure_threshold > 0.0;
    match herald_all(&prepared, &circuit.herald) {
        Ok(out) => {
            let failed = soft && out.stages.iter().any(|&p| p < opts.failure_threshold);
            if failed {
                Ok(Heralded {
                    state: LcgState::vacuum(2)?,
                    probability: out.probability,
                    stages: out.stages,
                    succeeded: false,
                })
            } else {
                Ok(Heralded { state: out.state, probability: out.probability, stages: out.stages, succeeded: true })
            }
        }
        Err(Error::HeraldImpossible { probability }) if soft => Ok(Heralded {
            state: LcgState::vacuum(2)?,
            probability: probability.max(0.0),
            stages: Vec::new(),
            succeeded: false,
        }),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub chsh: f64,
    pub correlators: [[f64; 2]; 2],
    pub error_bound: f64,
    pub herald_probability: f64,
    pub stages: Vec<f64>,
    pub heralded: bool,
    /// Shared state after heralding and loss.
    pub state: LcgState,
}

pub fn evaluate(circuit: &Circuit, meas: &BellMeasurement, opts: &EvalOptions) -> Result<Evaluation> {
    let heralded = herald_circuit(circuit, opts)?;
    let state = if opts.bob_transmissivity < 1.0 {
        apply_loss(&heralded.state, 2, opts.bob_transmissivity)?
    } else {
        heralded.state
    };
    let result = chsh_score_within(&state, meas, opts.chsh_precision)?;
    Ok(Evaluation {
        chsh: result.score,
        correlators: result.correlators,
        error_bound: result.error_bound,
        herald_probability: heralded.probability,
        stages: heralded.stages,
        heralded: heralded.succeeded,
        state,
    })
}

/// Fibre transmissivity at 0.2 dB/km.
pub fn fibre_transmissivity(km: f64) -> f64 {
    10f64.powf(-0.2 * km / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::herald::HeraldScheme;
    use approx::assert_abs_diff_eq;

    fn fig1() -> Circuit {
        Circuit::new(
            4,
            vec![
                Gate::two_mode_squeezer(1, 2, 0.00096),
                Gate::two_mode_squeezer(3, 4, 0.44993),
                Gate::beam_splitter(2, 4, 1.63856),
                Gate::beam_splitter(1, 3, 1.50272),
            ],
            HeraldSpec::uniform(4, HeraldScheme::Click, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn fig1_score() {
        let e = evaluate(&fig1(), &BellMeasurement::default(), &EvalOptions::default()).unwrap();
        assert_abs_diff_eq!(e.chsh, 2.068, epsilon = 2e-3);
        assert!((e.herald_probability - 3e-6).abs() < 0.3 * 3e-6);
        assert_eq!(e.state.len(), 4);
    }

    #[test]
    fn empty_circuit_scores_zero() {
        let c = Circuit::new(2, vec![], HeraldSpec::none()).unwrap();
        let e = evaluate(&c, &BellMeasurement::default(), &EvalOptions::default()).unwrap();
        assert_abs_diff_eq!(e.chsh, 0.0, epsilon = 1e-12);
        assert_eq!(e.herald_probability, 1.0);
    }

    #[test]
    fn soft_failure_on_vacuum() {
        let c = Circuit::new(4, vec![Gate::beam_splitter(1, 3, 0.3)], HeraldSpec::uniform(4, HeraldScheme::Click, 1.0))
            .unwrap();
        assert!(matches!(
            evaluate(&c, &BellMeasurement::default(), &EvalOptions::default()),
            Err(Error::HeraldImpossible { .. })
        ));
        let opts = EvalOptions { failure_threshold: 1e-10, ..Default::default() };
        let e = evaluate(&c, &BellMeasurement::default(), &opts).unwrap();
        assert!(!e.heralded);
        assert_abs_diff_eq!(e.chsh, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn loss_keeps_herald_probability() {
        let plain = evaluate(&fig1(), &BellMeasurement::default(), &EvalOptions::default()).unwrap();
        let opts = EvalOptions { bob_transmissivity: fibre_transmissivity(5.0), ..Default::default() };
        let lossy = evaluate(&fig1(), &BellMeasurement::default(), &opts).unwrap();
        assert_eq!(plain.herald_probability, lossy.herald_probability);
        assert!(lossy.chsh < plain.chsh);
    }

    #[test]
    fn transmissivity_per_km() {
        assert_abs_diff_eq!(fibre_transmissivity(10.0), 10f64.powf(-0.2), epsilon = 1e-15);
        assert_eq!(fibre_transmissivity(0.0), 1.0);
    }
}
