//! Simulation and automated design of photonic Bell tests with homodyne detection.
//!
//! States are Gaussian (or linear combinations of Gaussians after threshold-detector
//! heralding), evolved by phase shifters, beam splitters and squeezers, and scored by the
//! sign-binned CHSH expression. Circuits are searched by random sampling or a PPO agent, with
//! gate parameters tuned by Nelder-Mead.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chsh;
pub mod circuit;
pub mod error;
pub mod fock;
pub mod gaussian;
pub mod herald;
pub mod io;
pub mod optimize;
pub mod ppo;
pub mod quadrature;
pub mod search;
pub mod seed;

pub use chsh::{chsh_score, chsh_score_within, correlator, BellMeasurement, Binning, ChshResult};
pub use circuit::{evaluate, Circuit, EvalOptions, Evaluation};
pub use error::{Error, Result};
pub use gaussian::{apply_gate, vacuum_state, Gate, GateKind, GaussianState};
pub use herald::{HeraldScheme, HeraldSpec, LcgState};
pub use io::{CircuitFile, EvalReport};
pub use optimize::{maximize_chsh, maximize_herald_prob, sweep_distance, sweep_efficiency, OptimizeConfig, SweepResult};
pub use ppo::{PpoConfig, Trainer};
pub use search::{random_search, train_agent, CircuitEnv, EnvConfig, EpisodeRecord, Strategy};
