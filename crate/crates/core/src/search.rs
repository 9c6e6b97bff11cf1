//! The circuit-construction environment (strategies, action spaces, observations, reward) and
//! seeded random search over it.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_4, LN_2};
use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chsh::BellMeasurement;
use crate::circuit::{herald_circuit, Circuit, EvalOptions};
use crate::error::{Error, Result};
use crate::gaussian::{Gate, GateKind};
use crate::herald::{HeraldScheme, HeraldSpec, LcgState};
use crate::optimize::{maximize_chsh, OptimizeConfig};
use crate::ppo::{Environment, Trainer};
use crate::seed;

/// Initial state and allowed gates of a search run.
///
/// 1: vacuum, every gate kind. 2: S2 on modes (1,2). 3: S2 on every pair (1,2), (3,4), ...
/// 4: S1 on modes 1 and 2. 5: S1 on every mode. Strategies 2-5 only append passive gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Strategy(u8);

impl Strategy {
    pub fn new(id: u8) -> Result<Self> {
        if (1..=5).contains(&id) {
            Ok(Self(id))
        } else {
            Err(Error::InvalidParameter(format!("strategy {id} is not one of 1..=5")))
        }
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn allowed_kinds(self) -> Vec<GateKind> {
        GateKind::ALL.into_iter().filter(|k| self.0 == 1 || k.is_passive()).collect()
    }
}

impl TryFrom<u8> for Strategy {
    type Error = Error;
    fn try_from(id: u8) -> Result<Self> {
        Self::new(id)
    }
}

impl From<Strategy> for u8 {
    fn from(s: Strategy) -> u8 {
        s.0
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub kind: GateKind,
    pub modes: Vec<usize>,
}

impl Action {
    pub fn gate(&self, angle: f64, squeezing: f64) -> Gate {
        let param = if self.kind.is_squeezer() { squeezing } else { angle };
        Gate { kind: self.kind, modes: self.modes.clone(), param }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let modes: Vec<String> = self.modes.iter().map(|m| m.to_string()).collect();
        write!(f, "{}[{}]", self.kind.symbol(), modes.join(","))
    }
}

/// Every allowed (kind, modes) pair: kinds in R, S1, B, S2 order, modes lexicographic.
pub fn action_space(strategy: Strategy, n_modes: usize) -> Result<Vec<Action>> {
    if n_modes < 2 {
        return Err(Error::InvalidParameter(format!("action space needs at least 2 modes, got {n_modes}")));
    }
    let mut out = Vec::new();
    for kind in strategy.allowed_kinds() {
        if kind.arity() == 1 {
            out.extend((1..=n_modes).map(|m| Action { kind, modes: vec![m] }));
        } else {
            for i in 1..=n_modes {
                out.extend((i + 1..=n_modes).map(|j| Action { kind, modes: vec![i, j] }));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub strategy: Strategy,
    pub n_modes: usize,
    /// Total circuit depth, initial gates included.
    pub n_circuit: usize,
    /// Parameter of appended phase shifters and beam splitters.
    pub default_angle: f64,
    /// Parameter of initial and appended squeezers.
    pub default_squeezing: f64,
    pub scheme: HeraldScheme,
    pub eta: f64,
    pub herald_failure_threshold: f64,
    pub measurement: BellMeasurement,
    pub optimize: OptimizeConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy(3),
            n_modes: 4,
            n_circuit: 5,
            default_angle: FRAC_PI_4,
            default_squeezing: 0.45,
            scheme: HeraldScheme::Click,
            eta: 1.0,
            herald_failure_threshold: 1e-10,
            measurement: BellMeasurement::default(),
            optimize: OptimizeConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_modes != 4 && self.n_modes != 6 {
            return Err(Error::InvalidParameter(format!("searches run on 4 or 6 modes, got {}", self.n_modes)));
        }
        let init = init_circuit(self.strategy, self)?;
        if self.n_circuit <= init.gates.len() {
            return Err(Error::InvalidParameter(format!(
                "depth {} leaves no room for actions after {} initial gates",
                self.n_circuit,
                init.gates.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidParameter(format!("detector efficiency {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }

    /// Agent actions per episode.
    pub fn episode_len(&self) -> Result<usize> {
        Ok(self.n_circuit - init_circuit(self.strategy, self)?.gates.len())
    }

    pub fn herald(&self) -> HeraldSpec {
        HeraldSpec::uniform(self.n_modes, self.scheme, self.eta)
    }

    pub fn observation_len(&self) -> usize {
        observation_len(self.n_modes)
    }

    fn optimize_config(&self) -> OptimizeConfig {
        OptimizeConfig { failure_threshold: self.herald_failure_threshold, ..self.optimize.clone() }
    }
}

pub fn init_circuit(strategy: Strategy, config: &EnvConfig) -> Result<Circuit> {
    let n = config.n_modes;
    let r = config.default_squeezing;
    let gates = match strategy.0 {
        1 => vec![],
        2 => vec![Gate::two_mode_squeezer(1, 2, r)],
        3 => {
            if !n.is_multiple_of(2) {
                return Err(Error::InvalidParameter(format!("strategy 3 pairs modes and needs even N, got {n}")));
            }
            (1..=n).step_by(2).map(|i| Gate::two_mode_squeezer(i, i + 1, r)).collect()
        }
        4 => vec![Gate::single_mode_squeezer(1, r), Gate::single_mode_squeezer(2, r)],
        _ => (1..=n).map(|i| Gate::single_mode_squeezer(i, r)).collect(),
    };
    Circuit::new(n, gates, config.herald())
}

pub fn observation_len(n_modes: usize) -> usize {
    11 << n_modes.saturating_sub(2)
}

/// Flattens a two-mode LCG state: per component the upper triangle of its covariance
/// (row-major) followed by its weight, zero-padded to `2^(N-2)` slots. Means are always zero
/// for these circuits and are left out.
pub fn encode_state(state: &LcgState, n_modes: usize) -> Result<Vec<f64>> {
    if state.n_modes() != 2 {
        return Err(Error::WrongModeCount { expected: 2, found: state.n_modes() });
    }
    let slots = 1usize << n_modes.saturating_sub(2);
    if state.len() > slots {
        return Err(Error::InvalidParameter(format!(
            "{} components exceed the {slots} observation slots",
            state.len()
        )));
    }
    let mut out = vec![0.0; slots * 11];
    for (slot, c) in out.chunks_exact_mut(11).zip(state.components()) {
        let sigma = c.state.sigma();
        let mut k = 0;
        for i in 0..4 {
            for j in i..4 {
                slot[k] = sigma[(i, j)];
                k += 1;
            }
        }
        slot[10] = c.weight;
    }
    Ok(out)
}

/// Reward for a final CHSH score: linear below 2, doubling every 0.1 above.
pub fn reward_fn(chsh: f64) -> f64 {
    if chsh < 2.0 {
        chsh / 4.0 - 1.0
    } else {
        (10.0 * LN_2 * (chsh - 2.0)).exp() - 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub actions: Vec<usize>,
    /// Circuit with optimized parameters (or the default ones if optimization was infeasible).
    pub circuit: Circuit,
    pub chsh: f64,
    pub herald_probability: f64,
    pub reward: f64,
    /// How many sampled episodes produced this action sequence.
    pub count: usize,
}

/// Optimizes a finished episode's circuit and scores it.
fn finish(circuit: Circuit, actions: Vec<usize>, config: &EnvConfig) -> Result<EpisodeRecord> {
    let (circuit, chsh, herald_probability) =
        match maximize_chsh(&circuit, &config.measurement, &config.optimize_config()) {
            Ok(opt) => (opt.circuit, opt.chsh, opt.herald_probability),
            Err(Error::Infeasible(_)) => (circuit, 0.0, 0.0),
            Err(e) => return Err(e),
        };
    Ok(EpisodeRecord { actions, circuit, chsh, herald_probability, reward: reward_fn(chsh), count: 1 })
}

#[derive(Debug, Clone)]
pub struct CircuitEnv {
    config: EnvConfig,
    actions: Vec<Action>,
    init: Circuit,
    circuit: Circuit,
    taken: Vec<usize>,
    done: bool,
    last: Option<EpisodeRecord>,
}

impl CircuitEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let actions = action_space(config.strategy, config.n_modes)?;
        let init = init_circuit(config.strategy, &config)?;
        Ok(Self { config, actions, circuit: init.clone(), init, taken: vec![], done: false, last: None })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn circuit(&self) -> &Circuit {
        &self.circuit
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Record of the most recently finished episode.
    pub fn last_episode(&self) -> Option<&EpisodeRecord> {
        self.last.as_ref()
    }

    fn observe(&self) -> Result<Vec<f64>> {
        let opts = EvalOptions { failure_threshold: self.config.herald_failure_threshold, ..Default::default() };
        let state = match herald_circuit(&self.circuit, &opts) {
            Ok(h) if h.succeeded => h.state,
            Ok(_) | Err(Error::HeraldImpossible { .. }) => LcgState::vacuum(2)?,
            Err(e) => return Err(e),
        };
        encode_state(&state, self.config.n_modes)
    }

    pub fn reset(&mut self) -> Result<Vec<f64>> {
        self.circuit = self.init.clone();
        self.taken.clear();
        self.done = false;
        self.observe()
    }

    /// Appends the chosen gate. The last step optimizes the circuit and pays the reward.
    pub fn step(&mut self, action: usize) -> Result<(Vec<f64>, f64, bool)> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let a = self.actions.get(action).ok_or_else(|| {
            Error::InvalidParameter(format!("action {action} outside 0..{}", self.actions.len()))
        })?;
        self.circuit.gates.push(a.gate(self.config.default_angle, self.config.default_squeezing));
        self.taken.push(action);
        let observation = self.observe()?;
        if self.circuit.gates.len() < self.config.n_circuit {
            return Ok((observation, 0.0, false));
        }
        self.done = true;
        let record = finish(self.circuit.clone(), self.taken.clone(), &self.config)?;
        let reward = record.reward;
        self.last = Some(record);
        Ok((observation, reward, true))
    }
}

impl Environment for CircuitEnv {
    fn observation_len(&self) -> usize {
        self.config.observation_len()
    }

    fn n_actions(&self) -> usize {
        self.actions.len()
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        CircuitEnv::reset(self)
    }

    fn step(&mut self, action: usize) -> Result<(Vec<f64>, f64, bool)> {
        CircuitEnv::step(self, action)
    }
}

/// Samples `episodes` uniform action sequences, optimizes each distinct one, and ranks the
/// results by CHSH (descending, ties by first occurrence). Deterministic in `seed`.
pub fn random_search(config: &EnvConfig, episodes: usize, seed: u64) -> Result<Vec<EpisodeRecord>> {
    if episodes == 0 {
        return Err(Error::InvalidParameter("random search needs at least one episode".into()));
    }
    config.validate()?;
    let actions = action_space(config.strategy, config.n_modes)?;
    let init = init_circuit(config.strategy, config)?;
    let len = config.episode_len()?;

    let mut order: Vec<Vec<usize>> = Vec::new();
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for e in 0..episodes {
        let mut rng = seed::rng(seed, seed::streams::EPISODES + e as u64);
        let seq: Vec<usize> = (0..len).map(|_| rng.random_range(0..actions.len())).collect();
        let count = counts.entry(seq.clone()).or_insert(0);
        if *count == 0 {
            order.push(seq);
        }
        *count += 1;
    }

    let mut records = order
        .into_par_iter()
        .map(|seq| {
            let mut circuit = init.clone();
            circuit
                .gates
                .extend(seq.iter().map(|&a| actions[a].gate(config.default_angle, config.default_squeezing)));
            let mut rec = finish(circuit, seq, config)?;
            rec.count = counts[&rec.actions];
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| b.chsh.total_cmp(&a.chsh));
    Ok(records)
}

/// One line of a training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub episode: u64,
    pub chsh: f64,
    pub reward: f64,
    pub best_chsh: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best: Option<EpisodeRecord>,
    pub trace: Vec<TracePoint>,
}

/// Trains the agent for `episodes` more episodes, keeping the best circuit seen and a
/// best-so-far trace. `on_episode` sees each trace point as it is produced.
pub fn train_agent(
    trainer: &mut Trainer<CircuitEnv>,
    episodes: usize,
    mut on_episode: impl FnMut(&TracePoint),
) -> Result<TrainOutcome> {
    let mut best: Option<EpisodeRecord> = None;
    let mut trace = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        trainer.run_episode()?;
        let rec = trainer.env.last_episode().expect("a finished episode leaves a record");
        if best.as_ref().is_none_or(|b| rec.chsh > b.chsh) {
            best = Some(rec.clone());
        }
        let point = TracePoint {
            episode: trainer.episodes,
            chsh: rec.chsh,
            reward: rec.reward,
            best_chsh: best.as_ref().map_or(rec.chsh, |b| b.chsh),
        };
        on_episode(&point);
        trace.push(point);
    }
    Ok(TrainOutcome { best, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn s(id: u8) -> Strategy {
        Strategy::new(id).unwrap()
    }

    #[test]
    fn action_counts() {
        assert_eq!(action_space(s(3), 4).unwrap().len(), 10);
        assert_eq!(action_space(s(1), 4).unwrap().len(), 20);
        assert_eq!(action_space(s(3), 6).unwrap().len(), 21);
        let a = action_space(s(1), 3).unwrap();
        let labels: Vec<String> = a.iter().map(|a| a.to_string()).collect();
        assert_eq!(labels[..4], ["R[1]", "R[2]", "R[3]", "S1[1]"]);
        assert_eq!(labels[6..9], ["B[1,2]", "B[1,3]", "B[2,3]"]);
        assert!(action_space(s(1), 1).is_err());
    }

    #[test]
    fn initial_circuits() {
        let cfg = EnvConfig::default();
        let c3 = init_circuit(s(3), &cfg).unwrap();
        assert_eq!(c3.gates, vec![Gate::two_mode_squeezer(1, 2, 0.45), Gate::two_mode_squeezer(3, 4, 0.45)]);
        assert!(init_circuit(s(1), &cfg).unwrap().gates.is_empty());
        let six = EnvConfig { n_modes: 6, ..cfg.clone() };
        let c5 = init_circuit(s(5), &six).unwrap();
        assert_eq!(c5.gates.len(), 6);
        assert!(c5.gates.iter().all(|g| g.kind == GateKind::SingleModeSqueezer));
        let odd = EnvConfig { n_modes: 5, ..cfg };
        assert!(init_circuit(s(3), &odd).is_err());
        assert!(Strategy::new(6).is_err());
    }

    #[test]
    fn vacuum_encoding() {
        let v = encode_state(&LcgState::vacuum(2).unwrap(), 4).unwrap();
        assert_eq!(v.len(), 44);
        assert_eq!(v[..11], [0.25, 0.0, 0.0, 0.0, 0.25, 0.0, 0.0, 0.25, 0.0, 0.25, 1.0]);
        assert!(v[11..].iter().all(|&x| x == 0.0));
        assert_eq!(observation_len(6), 176);
        assert!(encode_state(&LcgState::vacuum(3).unwrap(), 4).is_err());
    }

    #[test]
    fn rewards() {
        assert_abs_diff_eq!(reward_fn(0.0), -1.0);
        assert_abs_diff_eq!(reward_fn(2.0), 0.0);
        assert_abs_diff_eq!(reward_fn(2.1), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(reward_fn(2.068), 2f64.powf(0.68) - 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(reward_fn(2.0 - 1e-12), -0.5, epsilon = 1e-9);
    }

    #[test]
    fn strategy1_passive_first_step_sees_vacuum() {
        let cfg = EnvConfig { strategy: s(1), n_circuit: 3, ..Default::default() };
        let mut env = CircuitEnv::new(cfg).unwrap();
        let vacuum = env.reset().unwrap();
        let (obs, reward, done) = env.step(0).unwrap();
        assert_eq!(obs, vacuum);
        assert_eq!(reward, 0.0);
        assert!(!done);
    }

    #[test]
    fn episode_runs_to_depth_then_stops() {
        // Fig. 1 layout: S2[1,2], S2[3,4] from initialization, then B[2,4] and B[1,3], with the
        // defaults inside the basin of the best optimum (an exact swap angle is a saddle).
        let cfg = EnvConfig { n_circuit: 4, default_angle: 1.2, default_squeezing: 0.3, ..Default::default() };
        let mut env = CircuitEnv::new(cfg).unwrap();
        env.reset().unwrap();
        let b24 = env.actions().iter().position(|a| a.to_string() == "B[2,4]").unwrap();
        let b13 = env.actions().iter().position(|a| a.to_string() == "B[1,3]").unwrap();
        assert!(!env.step(b24).unwrap().2);
        let (_, reward, done) = env.step(b13).unwrap();
        assert!(done);
        let rec = env.last_episode().unwrap();
        assert_eq!(rec.circuit.gates.len(), 4);
        assert_abs_diff_eq!(reward, reward_fn(rec.chsh));
        assert_abs_diff_eq!(rec.chsh, 2.068, epsilon = 2e-3);
        assert_abs_diff_eq!(reward, 2f64.powf(0.68) - 1.0, epsilon = 0.01);
        assert!(matches!(env.step(0), Err(Error::EpisodeDone)));
        assert!(env.step(99).is_err());
    }

    #[test]
    fn random_search_is_deterministic() {
        let cfg = EnvConfig { n_circuit: 3, ..Default::default() };
        let a = random_search(&cfg, 12, 7).unwrap();
        let b = random_search(&cfg, 12, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|r| r.count).sum::<usize>(), 12);
        assert!(a.windows(2).all(|w| w[0].chsh >= w[1].chsh));
    }

    #[test]
    fn degenerate_all_phase_draw_scores_zero() {
        let cfg = EnvConfig { strategy: s(1), n_circuit: 1, ..Default::default() };
        let mut env = CircuitEnv::new(cfg).unwrap();
        env.reset().unwrap();
        env.step(0).unwrap();
        assert!(env.last_episode().unwrap().chsh <= 2.0);
    }

    #[test]
    fn training_trace_is_a_running_max() {
        let env = CircuitEnv::new(EnvConfig { n_circuit: 3, ..Default::default() }).unwrap();
        let cfg = crate::ppo::PpoConfig { update_frequency: 4, trajectory_capacity: 8, ..Default::default() };
        let mut trainer = Trainer::new(env, cfg).unwrap();
        let mut seen = 0;
        let out = train_agent(&mut trainer, 6, |_| seen += 1).unwrap();
        assert_eq!(seen, 6);
        assert_eq!(trainer.updates, 1);
        let best = out.best.unwrap();
        assert!(out.trace.windows(2).all(|w| w[1].best_chsh >= w[0].best_chsh));
        assert_eq!(out.trace.last().unwrap().best_chsh, best.chsh);
        assert!(out.trace.iter().all(|t| t.chsh <= best.chsh));
    }
}
