//! CHSH maximization over gate parameters, heralding-probability maximization at a CHSH floor,
//! and the fibre-loss and detector-efficiency robustness sweeps.

mod nelder_mead;

pub use nelder_mead::{nelder_mead, Minimum, NelderMeadConfig};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chsh::{BellMeasurement, CHSH_PRECISION};
use crate::circuit::{evaluate, fibre_transmissivity, Circuit, EvalOptions, Evaluation};
use crate::error::{Error, Result};
use crate::gaussian::squeezing_from_db;
use crate::seed;

/// Largest CHSH shortfall below the floor that `maximize_herald_prob` accepts.
pub const FLOOR_SLACK: f64 = 1e-3;
const POLISH_GAIN: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeConfig {
    pub max_iterations: usize,
    pub simplex_tolerance: f64,
    /// Cap on every squeezing parameter, in dB.
    pub squeeze_cap_db: f64,
    /// Initial simplex edge for angle-valued parameters.
    pub angle_step: f64,
    /// Initial simplex edge for squeezing parameters.
    pub squeeze_step: f64,
    /// Heralding stages below this probability count as failures (state becomes vacuum).
    pub failure_threshold: f64,
    /// Jittered restarts tried when heralding fails at the start point.
    pub restarts: usize,
    pub restart_jitter: f64,
    pub seed: u64,
    pub bob_transmissivity: f64,
    /// Also optimize the four measurement angles.
    pub optimize_angles: bool,
    /// Initial weight of the CHSH-floor penalty; raised tenfold while the floor leaks.
    pub herald_penalty: f64,
    /// Start each sweep point from the previous optimum.
    pub warm_start: bool,
    /// Extra simplex restarts from the converged point; stops early once the gain is negligible.
    pub polish_rounds: usize,
    /// Largest tolerated error bound on each evaluated CHSH score.
    pub chsh_precision: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 4_000,
            simplex_tolerance: 1e-7,
            squeeze_cap_db: 10.0,
            angle_step: 0.1,
            squeeze_step: 0.05,
            failure_threshold: 1e-10,
            restarts: 20,
            restart_jitter: 0.2,
            seed: 0,
            bob_transmissivity: 1.0,
            optimize_angles: false,
            herald_penalty: 1e6,
            warm_start: true,
            polish_rounds: 4,
            chsh_precision: CHSH_PRECISION,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.squeeze_cap_db > 0.0 && self.squeeze_cap_db.is_finite()) {
            return Err(Error::InvalidParameter(format!("squeeze cap {} dB must be positive", self.squeeze_cap_db)));
        }
        if !(self.bob_transmissivity > 0.0 && self.bob_transmissivity <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "transmissivity {} outside (0, 1]",
                self.bob_transmissivity
            )));
        }
        if !(self.simplex_tolerance > 0.0) || !(self.angle_step > 0.0) || !(self.squeeze_step > 0.0) {
            return Err(Error::InvalidParameter("simplex tolerance and steps must be positive".into()));
        }
        if !(self.chsh_precision > 0.0) {
            return Err(Error::InvalidParameter(format!("CHSH precision {} must be positive", self.chsh_precision)));
        }
        Ok(())
    }

    pub fn squeeze_cap(&self) -> f64 {
        squeezing_from_db(self.squeeze_cap_db)
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            failure_threshold: self.failure_threshold,
            bob_transmissivity: self.bob_transmissivity,
            chsh_precision: self.chsh_precision,
        }
    }
}

/// Box bounds per gate parameter: squeezers are capped, angles are free.
pub fn parameter_bounds(circuit: &Circuit, config: &OptimizeConfig) -> Vec<(f64, f64)> {
    let cap = config.squeeze_cap();
    circuit
        .gates
        .iter()
        .map(|g| if g.kind.is_squeezer() { (-cap, cap) } else { (f64::NEG_INFINITY, f64::INFINITY) })
        .collect()
}

/// Decision vector layout: gate parameters, then (optionally) theta0, theta1, phi0, phi1.
struct Layout<'a> {
    circuit: &'a Circuit,
    meas: &'a BellMeasurement,
    angles: bool,
}

impl Layout<'_> {
    fn x0(&self, config: &OptimizeConfig) -> Vec<f64> {
        let cap = config.squeeze_cap();
        let mut x: Vec<f64> = self
            .circuit
            .gates
            .iter()
            .map(|g| if g.kind.is_squeezer() { g.param.clamp(-cap, cap) } else { g.param })
            .collect();
        if self.angles {
            x.extend(self.meas.theta);
            x.extend(self.meas.phi);
        }
        x
    }

    fn bounds(&self, config: &OptimizeConfig) -> Vec<(f64, f64)> {
        let mut b = parameter_bounds(self.circuit, config);
        if self.angles {
            b.extend([(f64::NEG_INFINITY, f64::INFINITY); 4]);
        }
        b
    }

    fn steps(&self, config: &OptimizeConfig) -> Vec<f64> {
        let mut s: Vec<f64> = self
            .circuit
            .gates
            .iter()
            .map(|g| if g.kind.is_squeezer() { config.squeeze_step } else { config.angle_step })
            .collect();
        if self.angles {
            s.extend([config.angle_step; 4]);
        }
        s
    }

    fn split(&self, x: &[f64]) -> (Circuit, BellMeasurement) {
        let n = self.circuit.gates.len();
        let circuit = self.circuit.with_params(&x[..n]);
        let meas = if self.angles {
            BellMeasurement { theta: [x[n], x[n + 1]], phi: [x[n + 2], x[n + 3]], ..self.meas.clone() }
        } else {
            self.meas.clone()
        };
        (circuit, meas)
    }

    fn evaluate(&self, x: &[f64], opts: &EvalOptions) -> Result<Evaluation> {
        let (c, m) = self.split(x);
        evaluate(&c, &m, opts)
    }
}

#[derive(Debug, Clone)]
pub struct ChshOptimum {
    pub circuit: Circuit,
    pub measurement: BellMeasurement,
    pub chsh: f64,
    pub herald_probability: f64,
    pub iterations: usize,
    pub evaluations: usize,
    /// Jittered restarts needed before heralding succeeded.
    pub restarts: usize,
}

/// Maximizes CHSH over the gate parameters (and the angles if enabled), squeezers capped.
pub fn maximize_chsh(circuit: &Circuit, meas: &BellMeasurement, config: &OptimizeConfig) -> Result<ChshOptimum> {
    config.validate()?;
    circuit.validate()?;
    let layout = Layout { circuit, meas, angles: config.optimize_angles };
    let opts = config.eval_options();
    let bounds = layout.bounds(config);

    let base = layout.x0(config);
    let mut start = None;
    let mut rng = seed::rng(config.seed, seed::streams::RESTARTS);
    for attempt in 0..=config.restarts {
        let x: Vec<f64> = if attempt == 0 {
            base.clone()
        } else {
            base.iter()
                .zip(&bounds)
                .map(|(v, &(lo, hi))| (v + rng.random_range(-config.restart_jitter..=config.restart_jitter)).clamp(lo, hi))
                .collect()
        };
        if matches!(layout.evaluate(&x, &opts), Ok(e) if e.heralded) {
            start = Some((x, attempt));
            break;
        }
    }
    let (x0, restarts) = start.ok_or_else(|| {
        Error::Infeasible(format!("heralding failed at the start point and {} jittered restarts", config.restarts))
    })?;

    let nm = NelderMeadConfig {
        max_iterations: config.max_iterations,
        simplex_tolerance: config.simplex_tolerance,
        initial_steps: layout.steps(config),
        bounds: Some(bounds),
        bound_penalty: 1e3,
    };
    let objective = |x: &[f64]| match layout.evaluate(x, &opts) {
        Ok(e) => -e.chsh,
        Err(_) => f64::INFINITY,
    };
    let mut min = nelder_mead(objective, &x0, &nm)?;
    let (mut iterations, mut evaluations) = (min.iterations, min.evaluations);
    // A collapsed simplex can stall short of the optimum; restarting from the
    // converged point rebuilds it at full size.
    for _ in 0..config.polish_rounds {
        let next = nelder_mead(objective, &min.x, &nm)?;
        iterations += next.iterations;
        evaluations += next.evaluations;
        let gain = min.value - next.value;
        if gain > 0.0 {
            min = next;
        }
        if !(gain > POLISH_GAIN) {
            break;
        }
    }
    let (best_circuit, best_meas) = layout.split(&min.x);
    let e = evaluate(&best_circuit, &best_meas, &opts)?;
    Ok(ChshOptimum {
        circuit: best_circuit,
        measurement: best_meas,
        chsh: e.chsh,
        herald_probability: e.herald_probability,
        iterations,
        evaluations,
        restarts,
    })
}

#[derive(Debug, Clone)]
pub struct HeraldOptimum {
    pub circuit: Circuit,
    pub herald_probability: f64,
    pub chsh: f64,
    /// Penalty weight of the accepted stage.
    pub penalty: f64,
}

/// Maximizes the heralding probability subject to `chsh >= floor` via a quadratic penalty,
/// escalated tenfold (up to four times) whenever the optimum leaks below the floor.
pub fn maximize_herald_prob(
    circuit: &Circuit,
    meas: &BellMeasurement,
    floor: f64,
    config: &OptimizeConfig,
) -> Result<HeraldOptimum> {
    config.validate()?;
    circuit.validate()?;
    if floor > 2.0 * std::f64::consts::SQRT_2 {
        return Err(Error::Infeasible(format!("CHSH floor {floor} exceeds the Tsirelson bound")));
    }
    let layout = Layout { circuit, meas, angles: false };
    let opts = config.eval_options();
    let x0 = layout.x0(config);
    let e0 = layout.evaluate(&x0, &opts)?;
    if !e0.heralded || e0.chsh < floor - FLOOR_SLACK {
        return Err(Error::Infeasible(format!("start point scores {} against a floor of {floor}", e0.chsh)));
    }

    let nm = NelderMeadConfig {
        max_iterations: config.max_iterations,
        simplex_tolerance: config.simplex_tolerance,
        initial_steps: layout.steps(config),
        bounds: Some(layout.bounds(config)),
        bound_penalty: 1e3,
    };
    let mut best = HeraldOptimum {
        circuit: circuit.with_params(&x0),
        herald_probability: e0.herald_probability,
        chsh: e0.chsh,
        penalty: config.herald_penalty,
    };
    let mut x = x0;
    let mut penalty = config.herald_penalty;
    for _ in 0..5 {
        let min = nelder_mead(
            |x| match layout.evaluate(x, &opts) {
                Ok(e) if e.heralded && e.herald_probability > 0.0 => {
                    let short = (floor - e.chsh).max(0.0);
                    -e.herald_probability.ln() + penalty * short * short
                }
                _ => f64::INFINITY,
            },
            &x,
            &nm,
        )?;
        x = min.x;
        let e = layout.evaluate(&x, &opts)?;
        if e.chsh >= floor - FLOOR_SLACK && e.herald_probability > best.herald_probability {
            best = HeraldOptimum {
                circuit: circuit.with_params(&x),
                herald_probability: e.herald_probability,
                chsh: e.chsh,
                penalty,
            };
        }
        // Stop once the leak is well inside the accepted slack.
        if e.chsh >= floor - 0.1 * FLOOR_SLACK {
            break;
        }
        log::debug!("CHSH {} leaks below floor {floor} at penalty {penalty:e}; escalating", e.chsh);
        penalty *= 10.0;
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    DistanceKm,
    Eta,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            Self::DistanceKm => "distance_km",
            Self::Eta => "eta",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: f64,
    pub chsh: f64,
    pub herald_probability: f64,
    pub params: Vec<f64>,
    /// theta0, theta1, phi0, phi1 used at this point.
    pub angles: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub variable: SweepVariable,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    /// Largest sampled x with CHSH above 2, if any.
    pub fn last_violation(&self) -> Option<f64> {
        self.points.iter().rfind(|p| p.chsh > 2.0).map(|p| p.x)
    }
}

fn angles(meas: &BellMeasurement) -> [f64; 4] {
    [meas.theta[0], meas.theta[1], meas.phi[0], meas.phi[1]]
}

fn distance_grid(km_max: f64, km_step: f64) -> Result<Vec<f64>> {
    if !(km_step > 0.0 && km_step.is_finite()) || !(km_max >= 0.0 && km_max.is_finite()) {
        return Err(Error::InvalidParameter(format!("bad distance grid: max {km_max}, step {km_step}")));
    }
    let n = (km_max / km_step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| i as f64 * km_step).collect())
}

/// Re-optimizes the gates at every distance with fibre loss on Bob's mode.
pub fn sweep_distance(
    circuit: &Circuit,
    meas: &BellMeasurement,
    km_max: f64,
    km_step: f64,
    config: &OptimizeConfig,
) -> Result<SweepResult> {
    let grid = distance_grid(km_max, km_step)?;
    let at = |d: f64, c: &Circuit, m: &BellMeasurement| -> Result<(SweepPoint, Circuit, BellMeasurement)> {
        let cfg = OptimizeConfig { bob_transmissivity: fibre_transmissivity(d), ..config.clone() };
        let opt = maximize_chsh(c, m, &cfg)?;
        log::info!("d = {d:.3} km: CHSH {:.6}", opt.chsh);
        let point = SweepPoint {
            x: d,
            chsh: opt.chsh,
            herald_probability: opt.herald_probability,
            params: opt.circuit.params(),
            angles: angles(&opt.measurement),
        };
        Ok((point, opt.circuit, opt.measurement))
    };
    let points = if config.warm_start {
        let mut points = Vec::with_capacity(grid.len());
        let (mut c, mut m) = (circuit.clone(), meas.clone());
        for &d in &grid {
            let (p, nc, nm) = at(d, &c, &m)?;
            points.push(p);
            c = nc;
            m = nm;
        }
        points
    } else {
        grid.par_iter().map(|&d| at(d, circuit, meas).map(|r| r.0)).collect::<Result<Vec<_>>>()?
    };
    Ok(SweepResult { variable: SweepVariable::DistanceKm, points })
}

/// Evaluates the circuit at fixed parameters for each detector efficiency.
pub fn sweep_efficiency(
    circuit: &Circuit,
    meas: &BellMeasurement,
    eta_grid: &[f64],
    config: &OptimizeConfig,
) -> Result<SweepResult> {
    if eta_grid.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
        return Err(Error::InvalidParameter("efficiencies must lie in (0, 1]".into()));
    }
    if eta_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("efficiency grid must be strictly increasing".into()));
    }
    let opts = EvalOptions { failure_threshold: 0.0, ..config.eval_options() };
    let points = eta_grid
        .par_iter()
        .map(|&eta| {
            let c = Circuit { herald: circuit.herald.with_eta(eta), ..circuit.clone() };
            let e = evaluate(&c, meas, &opts)?;
            Ok(SweepPoint {
                x: eta,
                chsh: e.chsh,
                herald_probability: e.herald_probability,
                params: c.params(),
                angles: angles(meas),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { variable: SweepVariable::Eta, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gate;
    use crate::herald::{HeraldScheme, HeraldSpec};

    fn fig1(params: [f64; 4]) -> Circuit {
        Circuit::new(
            4,
            vec![
                Gate::two_mode_squeezer(1, 2, params[0]),
                Gate::two_mode_squeezer(3, 4, params[1]),
                Gate::beam_splitter(2, 4, params[2]),
                Gate::beam_splitter(1, 3, params[3]),
            ],
            HeraldSpec::uniform(4, HeraldScheme::Click, 1.0),
        )
        .unwrap()
    }

    const FIG1: [f64; 4] = [0.00096, 0.44993, 1.63856, 1.50272];

    #[test]
    fn phase_shifters_on_vacuum_stay_flat() {
        let c = Circuit::new(2, vec![Gate::phase_shifter(1, 0.3), Gate::phase_shifter(2, -0.2)], HeraldSpec::none())
            .unwrap();
        let opt = maximize_chsh(&c, &BellMeasurement::default(), &OptimizeConfig::default()).unwrap();
        assert!(opt.chsh.abs() < 1e-9);
    }

    #[test]
    fn perturbed_fig1_reconverges() {
        let signs = [1.0, -1.0, -1.0, 1.0];
        let mut p = FIG1;
        for (v, s) in p.iter_mut().zip(signs) {
            *v *= 1.0 + 0.05 * s;
        }
        let opt = maximize_chsh(&fig1(p), &BellMeasurement::default(), &OptimizeConfig::default()).unwrap();
        assert!(opt.chsh >= 2.067, "CHSH {}", opt.chsh);
        let again = evaluate(&opt.circuit, &opt.measurement, &OptimizeConfig::default().eval_options()).unwrap();
        assert!((again.chsh - opt.chsh).abs() < 1e-9);
    }

    #[test]
    fn squeezing_cap_is_enforced() {
        let cfg = OptimizeConfig { squeeze_cap_db: 2.0, ..Default::default() };
        let opt = maximize_chsh(&fig1(FIG1), &BellMeasurement::default(), &cfg).unwrap();
        let cap = cfg.squeeze_cap();
        assert!(opt.circuit.gates.iter().filter(|g| g.kind.is_squeezer()).all(|g| g.param.abs() <= cap + 1e-15));
    }

    #[test]
    fn floor_above_tsirelson_is_infeasible() {
        let out = maximize_herald_prob(&fig1(FIG1), &BellMeasurement::default(), 2.9, &OptimizeConfig::default());
        assert!(matches!(out, Err(Error::Infeasible(_))));
    }

    #[test]
    fn unconstrained_probability_does_not_drop() {
        let c = fig1(FIG1);
        let cfg = OptimizeConfig { max_iterations: 300, ..Default::default() };
        let p0 = evaluate(&c, &BellMeasurement::default(), &cfg.eval_options()).unwrap().herald_probability;
        let opt = maximize_herald_prob(&c, &BellMeasurement::default(), 0.0, &cfg).unwrap();
        assert!(opt.herald_probability >= p0);
    }

    #[test]
    fn distance_grid_includes_endpoint() {
        assert_eq!(distance_grid(1.0, 0.25).unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(distance_grid(0.3, 0.1).unwrap().len(), 4);
        assert!(distance_grid(1.0, 0.0).is_err());
    }

    #[test]
    fn efficiency_grid_is_checked() {
        let c = fig1(FIG1);
        let m = BellMeasurement::default();
        let cfg = OptimizeConfig::default();
        assert!(sweep_efficiency(&c, &m, &[0.5, 0.25], &cfg).is_err());
        assert!(sweep_efficiency(&c, &m, &[0.0, 0.5], &cfg).is_err());
        let s = sweep_efficiency(&c, &m, &[0.5, 1.0], &cfg).unwrap();
        assert!(s.points[0].herald_probability < s.points[1].herald_probability);
    }
}
