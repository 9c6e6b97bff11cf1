use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("a state needs at least one mode")]
    NoModes,
    #[error("mode {mode} is out of range for a {n_modes}-mode state")]
    InvalidMode { mode: usize, n_modes: usize },
    #[error("invalid gate: {0}")]
    InvalidGate(String),
    #[error("expected a square matrix, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("expected a {expected}-mode state, got {found} modes")]
    WrongModeCount { expected: usize, found: usize },
    #[error("cannot trace out the last remaining mode")]
    LastMode,
    #[error("degenerate covariance matrix: {0}")]
    DegenerateCovariance(String),
    #[error("heralding event is impossible (probability {probability:e})")]
    HeraldImpossible { probability: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("numerical integration failed: {0}")]
    Quadrature(String),
    #[error("CHSH not resolvable: cancellation between combination weights allows an error of {bound:e}")]
    Unresolved { bound: f64 },
    #[error("optimization infeasible: {0}")]
    Infeasible(String),
    #[error("Fock cutoff {cutoff} too small (truncation leakage {leakage:e})")]
    CutoffTooSmall { cutoff: usize, leakage: f64 },
    #[error("episode already finished")]
    EpisodeDone,
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
