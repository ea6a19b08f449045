//! Small-signal and time-domain stability analysis of consensus-controlled
//! inverter microgrids under communication latency.

pub mod ddesim;
pub mod equilibrium;
pub mod error;
pub mod explorer;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod network;
pub mod nyquist;
pub mod optim;
pub mod report;
pub mod scenario;
pub mod smallsignal;
pub mod units;

pub use equilibrium::{solve_equilibrium, Equilibrium};
pub use error::{Error, Result};
pub use model::{AnalysisOptions, CommGraph, DgParams, ElectricalNetwork, MicrogridScenario};
pub use nyquist::{assess_stability, latency_threshold, NyquistAnalysis, Verdict};
pub use scenario::{baseline, load_scenario, load_scenario_file};
