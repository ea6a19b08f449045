use num_complex::Complex64;
use thiserror::Error;

use crate::model::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("invalid scenario ({} violation(s)):\n{}", .0.len(), format_violations(.0))]
    Invalid(Vec<Violation>),

    #[error("line {from}-{to} has zero impedance")]
    ZeroImpedance { from: usize, to: usize },

    #[error("equilibrium search did not converge; best residual {best_residual:.3e}")]
    NoConvergence { best_residual: f64 },

    #[error("dq projection is singular at bus {bus}: equilibrium voltage is zero")]
    ZeroVoltage { bus: usize },

    #[error("transfer function evaluated at excluded point s = {0}")]
    Pole(Complex64),

    #[error("eigenvalue decomposition failed at omega = {omega} rad/s")]
    Eigen { omega: f64 },

    #[error("latency bracket [{lo}, {hi}] s is invalid: verdict at lo = {at_lo}, at hi = {at_hi}")]
    Bracket {
        lo: f64,
        hi: f64,
        at_lo: String,
        at_hi: String,
    },

    #[error("stability is not monotone in latency: verdict {verdict} at tau = {tau} s contradicts threshold {threshold} s")]
    NonMonotonic {
        tau: f64,
        verdict: String,
        threshold: f64,
    },

    #[error("exhaustive topology search limited to n <= 5 (got n = {0}); use the greedy heuristic instead")]
    TooManyNodes(usize),

    #[error("scenario is not stable; linearized response undefined")]
    Unstable,

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| format!("  - {x}"))
        .collect::<Vec<_>>()
        .join("\n")
}
