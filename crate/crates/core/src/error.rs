use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value of {field} at t={t}, x={x:?}")]
    Evaluation { field: String, t: f64, x: Vec<f64> },

    #[error("non-finite {what} on path {path} at step {step}, state {state:?}")]
    PathEvaluation {
        what: &'static str,
        path: usize,
        step: usize,
        state: Vec<f64>,
    },

    #[error("CFL condition violated: worst ratio {ratio:.4} > 1 at x={x} ({hint})")]
    Cfl { x: f64, ratio: f64, hint: &'static str },

    #[error("lattice infeasible at level {level} (x={x}): p_up={p_up}, p_mid={p_mid}, p_down={p_down}")]
    LatticeInfeasible {
        level: usize,
        x: f64,
        p_up: f64,
        p_mid: f64,
        p_down: f64,
    },

    #[error(
        "mode clamp did not converge after {sweeps} sweeps (last change {last_change:e}); \
         the switching costs are close to a free loop at this node"
    )]
    ClampNonConvergence { sweeps: usize, last_change: f64 },

    #[error("same-slice Picard iteration diverged at slice {slice} (last change {last_change:e})")]
    PicardDivergence { slice: usize, last_change: f64 },

    #[error("ladder is not monotone between rungs {from} and {to}: violation {violation:e} (time step too large for the rung's penalty stiffness?)")]
    LadderMonotonicity { from: f64, to: f64, violation: f64 },

    #[error("regression basis is ill-conditioned at step {step}: condition number {cond:e}")]
    Conditioning { step: usize, cond: f64 },

    #[error("penalty too stiff for the explicit scheme: {name}*dt = {value} > 1")]
    PenaltyStiffness { name: &'static str, value: f64 },

    #[error("enumeration of {count} rule pairs exceeds the limit of {limit}")]
    EnumerationTooLarge { count: u128, limit: u128 },

    #[error("Dynkin enumeration {enumerated} disagrees with the clamp recursion {recursion}")]
    DynkinMismatch { enumerated: f64, recursion: f64 },

    #[error(
        "play on path {path} exceeded {max_switches} switches; suspected zero-cost loop through modes {loop_modes:?}"
    )]
    NonAdmissible {
        path: usize,
        max_switches: usize,
        loop_modes: Vec<usize>,
    },

    #[error("contact conditions of both players hold at time index {t_index}, x index {x_index}, mode {mode}: epsilon_contact exceeds the cost gap")]
    ContactConflict {
        t_index: usize,
        x_index: usize,
        mode: usize,
    },

    #[error("grid mismatch: {left} vs {right}")]
    GridMismatch { left: String, right: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {file} at line {line}: {message}")]
    Parse { file: String, line: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
