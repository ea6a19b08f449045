//! Run manifest written next to every set of outputs.

use serde::Serialize;

use crate::model::{AnalysisOptions, MicrogridScenario};
use crate::scenario::scenario_hash;

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub scenario: String,
    pub scenario_hash: String,
    pub options: AnalysisOptions,
    pub stabilizer_enabled: bool,
    pub seed: u64,
    /// Seconds since the Unix epoch; omitted in deterministic runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl RunManifest {
    pub fn new(command: &str, s: &MicrogridScenario, deterministic: bool) -> Self {
        let timestamp = (!deterministic).then(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        });
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            scenario: s.name.clone(),
            scenario_hash: scenario_hash(s),
            options: s.options.clone(),
            stabilizer_enabled: s.stabilizer_enabled,
            seed: s.options.rng_seed,
            timestamp,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::baseline;

    #[test]
    fn deterministic_manifest_is_stable() {
        let a = serde_json::to_string(&RunManifest::new("analyze", &baseline(), true)).unwrap();
        let b = serde_json::to_string(&RunManifest::new("analyze", &baseline(), true)).unwrap();
        assert_eq!(a, b);
        assert!(!a.contains("timestamp"));
        assert!(a.contains(&scenario_hash(&baseline())));
    }
}
