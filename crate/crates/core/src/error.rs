use thiserror::Error;

use crate::model::Violation;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state index {index} out of range for {n_states} states")]
    StateIndex { index: usize, n_states: usize },

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite linear predictor at transition ({from}, {to}), t = {t_hours} h")]
    NonFinitePredictor { from: usize, to: usize, t_hours: f64 },

    #[error("non-finite gradient component at coordinate {coordinate}")]
    NonFiniteGradient { coordinate: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid parameters: {}", join_violations(.0))]
    InvalidParams(Vec<Violation>),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("instance too large for exhaustive enumeration: {n_states}^{n_obs} paths")]
    TooLarge { n_states: usize, n_obs: usize },

    #[error("gravity center undefined: {0}")]
    UndefinedCenter(String),

    #[error("degenerate rest profile: rest amount {0} h")]
    DegenerateProfile(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("initialization failed after {attempts} attempts")]
    Initialization { attempts: usize },

    #[error("optimization failed on every start: {0}")]
    Optimization(String),

    #[error("invalid argument: {0}")]
    Argument(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
