//! `.scn` scenario files: TOML with unit-annotated quantities.
//!
//! ```toml
//! format_version = 1
//! name = "baseline"
//!
//! [network]
//! v_nom = "120 V"
//! slack_bus = 1
//! lines = [{ from = 1, to = 2, r = "0.8 ohm", x = "0.9 ohm" }]
//! loads = [{ bus = 1, p = "8 kW", q = "3 kVAR" }]
//!
//! [dg_defaults]
//! inertia = "1 kg*m^2"
//! omega_b = "377 rad/s"
//! d_p = "1 N*m"
//! k1 = 5e5
//! k2 = 1e5
//! sigma = "0.05 s"
//! sigma_v = "0.1 s"
//!
//! [[dg]]
//! k_p = "2e-2 pi rad/s/kW"
//! k_q = "0.4 V/kVAR"
//!
//! [graph]
//! leaders = [1]
//! edges = [{ to = 2, from = 1 }]
//! uniform_latency = "1 s"
//! ```
//!
//! Bus and node numbers are 1-based in files and 0-based in memory. A bare
//! number is read as an SI value. Per-DG fields override `[dg_defaults]`;
//! `damping_torque` (N·m·s) may be given instead of `d_p`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::*;
use crate::units::{format_si, parse_quantity, Dim};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum Quantity {
    Number(f64),
    Text(String),
}

impl Quantity {
    fn si(v: f64, dim: Dim) -> Self {
        Quantity::Text(format_si(v, dim))
    }

    fn get(&self, dim: Dim, path: &str) -> Result<f64> {
        match self {
            Quantity::Number(x) => Ok(*x),
            Quantity::Text(t) => parse_quantity(t, dim).map_err(|message| Error::Parse {
                location: path.to_string(),
                message,
            }),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDg {
    #[serde(skip_serializing_if = "Option::is_none")]
    k_p: Option<Quantity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k_q: Option<Quantity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    inertia: Option<Quantity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    omega_b: Option<Quantity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    d_p: Option<Quantity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    damping_torque: Option<Quantity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k1: Option<Quantity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k2: Option<Quantity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<Quantity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma_v: Option<Quantity>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLine {
    from: usize,
    to: usize,
    r: Quantity,
    x: Quantity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLoad {
    bus: usize,
    #[serde(default = "zero")]
    p: Quantity,
    #[serde(default = "zero")]
    q: Quantity,
}

fn zero() -> Quantity {
    Quantity::Number(0.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    v_nom: Quantity,
    #[serde(default = "one")]
    slack_bus: usize,
    #[serde(default)]
    lines: Vec<RawLine>,
    #[serde(default)]
    loads: Vec<RawLoad>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdge {
    to: usize,
    from: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    latency: Option<Quantity>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    leaders: Vec<usize>,
    #[serde(default)]
    edges: Vec<RawEdge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    uniform_latency: Option<Quantity>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnalysis {
    #[serde(skip_serializing_if = "Option::is_none")]
    freq_min: Option<Quantity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    freq_max: Option<Quantity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    points_per_decade: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    refine_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    origin_indent_radius: Option<Quantity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sim_step: Option<Quantity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sim_duration: Option<Quantity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rng_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    equilibrium_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference_omega: Option<Quantity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference_voltage: Option<Quantity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    assembly: Option<Assembly>,
    #[serde(skip_serializing_if = "Option::is_none")]
    damping_term: Option<DampingTerm>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStabilizer {
    #[serde(default)]
    enabled: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    numerator: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    denominator: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    format_version: u32,
    #[serde(default)]
    name: String,
    network: RawNetwork,
    #[serde(default)]
    dg_defaults: RawDg,
    dg: Vec<RawDg>,
    graph: RawGraph,
    #[serde(default)]
    analysis: RawAnalysis,
    #[serde(default)]
    stabilizer: RawStabilizer,
}

fn index(k: usize, n: usize, path: &str) -> Result<usize> {
    if k == 0 || k > n {
        return Err(Error::Parse {
            location: path.to_string(),
            message: format!("index {k} out of range 1..={n}"),
        });
    }
    Ok(k - 1)
}

fn missing(path: &str) -> Error {
    Error::Parse {
        location: path.to_string(),
        message: "required field missing (set it per DG or in [dg_defaults])".into(),
    }
}

fn dg_field(
    own: &Option<Quantity>,
    def: &Option<Quantity>,
    dim: Dim,
    path: &str,
) -> Result<Option<f64>> {
    match (own, def) {
        (Some(q), _) => q.get(dim, path).map(Some),
        (None, Some(q)) => q.get(dim, &format!("dg_defaults.{}", path.rsplit('.').next().unwrap()))
            .map(Some),
        (None, None) => Ok(None),
    }
}

fn build_dg(raw: &RawDg, def: &RawDg, k: usize) -> Result<DgParams> {
    let p = |f: &str| format!("dg[{k}].{f}");
    let req = |own: &Option<Quantity>, d: &Option<Quantity>, dim: Dim, f: &str| -> Result<f64> {
        dg_field(own, d, dim, &p(f))?.ok_or_else(|| missing(&p(f)))
    };
    let omega_b = req(&raw.omega_b, &def.omega_b, Dim::AngularFrequency, "omega_b")?;
    // A per-DG value beats a default regardless of which of the two forms it uses.
    let d_p = match (&raw.d_p, &raw.damping_torque) {
        (Some(q), _) => q.get(Dim::Torque, &p("d_p"))?,
        (None, Some(q)) => q.get(Dim::TorqueTime, &p("damping_torque"))? * omega_b,
        (None, None) => match (&def.d_p, &def.damping_torque) {
            (Some(q), _) => q.get(Dim::Torque, "dg_defaults.d_p")?,
            (None, Some(q)) => q.get(Dim::TorqueTime, "dg_defaults.damping_torque")? * omega_b,
            (None, None) => return Err(missing(&p("d_p"))),
        },
    };
    Ok(DgParams {
        k_p: req(&raw.k_p, &def.k_p, Dim::FrequencyDroop, "k_p")?,
        k_q: req(&raw.k_q, &def.k_q, Dim::VoltageDroop, "k_q")?,
        inertia: req(&raw.inertia, &def.inertia, Dim::Inertia, "inertia")?,
        omega_b,
        d_p,
        k1: req(&raw.k1, &def.k1, Dim::Dimensionless, "k1")?,
        k2: req(&raw.k2, &def.k2, Dim::Dimensionless, "k2")?,
        sigma: req(&raw.sigma, &def.sigma, Dim::Time, "sigma")?,
        sigma_v: req(&raw.sigma_v, &def.sigma_v, Dim::Time, "sigma_v")?,
    })
}

fn opt(q: &Option<Quantity>, dim: Dim, path: &str, default: f64) -> Result<f64> {
    q.as_ref().map_or(Ok(default), |q| q.get(dim, path))
}

/// Parses scenario text without checking model invariants.
pub fn parse_scenario(text: &str) -> Result<MicrogridScenario> {
    let raw: RawScenario = toml::from_str(text).map_err(|e| {
        let location = match e.span() {
            Some(span) => {
                let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
                format!("line {line}")
            }
            None => "document".into(),
        };
        Error::Parse {
            location,
            message: e.message().to_string(),
        }
    })?;
    if raw.format_version != FORMAT_VERSION {
        return Err(Error::Parse {
            location: "format_version".into(),
            message: format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                raw.format_version
            ),
        });
    }
    let n = raw.dg.len();
    if n == 0 {
        return Err(Error::Parse {
            location: "dg".into(),
            message: "at least one [[dg]] table is required".into(),
        });
    }
    let dgs = raw
        .dg
        .iter()
        .enumerate()
        .map(|(k, d)| build_dg(d, &raw.dg_defaults, k + 1))
        .collect::<Result<Vec<_>>>()?;

    let rn = &raw.network;
    let mut lines = Vec::new();
    for (k, l) in rn.lines.iter().enumerate() {
        let p = format!("network.lines[{}]", k + 1);
        lines.push(Line {
            from: index(l.from, n, &format!("{p}.from"))?,
            to: index(l.to, n, &format!("{p}.to"))?,
            r: l.r.get(Dim::Impedance, &format!("{p}.r"))?,
            x: l.x.get(Dim::Impedance, &format!("{p}.x"))?,
        });
    }
    let mut loads = Vec::new();
    for (k, l) in rn.loads.iter().enumerate() {
        let p = format!("network.loads[{}]", k + 1);
        loads.push(Load {
            bus: index(l.bus, n, &format!("{p}.bus"))?,
            p: l.p.get(Dim::Power, &format!("{p}.p"))?,
            q: l.q.get(Dim::ReactivePower, &format!("{p}.q"))?,
        });
    }
    let v_nom = rn.v_nom.get(Dim::Voltage, "network.v_nom")?;
    let network = ElectricalNetwork {
        n,
        lines,
        loads,
        v_nom,
        slack_bus: index(rn.slack_bus, n, "network.slack_bus")?,
    };

    let mut graph = CommGraph::new(n);
    for &l in &raw.graph.leaders {
        graph.leaders[index(l, n, "graph.leaders")?] = true;
    }
    let uniform = raw
        .graph
        .uniform_latency
        .as_ref()
        .map(|q| q.get(Dim::Time, "graph.uniform_latency"))
        .transpose()?;
    for (k, e) in raw.graph.edges.iter().enumerate() {
        let p = format!("graph.edges[{}]", k + 1);
        let i = index(e.to, n, &format!("{p}.to"))?;
        let j = index(e.from, n, &format!("{p}.from"))?;
        graph.adjacency[i][j] = true;
        graph.latency[i][j] = match &e.latency {
            Some(q) => q.get(Dim::Time, &format!("{p}.latency"))?,
            None => uniform.unwrap_or(0.0),
        };
    }

    let a = &raw.analysis;
    let omega_ref = opt(&a.reference_omega, Dim::AngularFrequency, "analysis.reference_omega", dgs[0].omega_b)?;
    let v_ref = opt(&a.reference_voltage, Dim::Voltage, "analysis.reference_voltage", v_nom)?;
    let d = AnalysisOptions::with_references(omega_ref, v_ref);
    let options = AnalysisOptions {
        freq_min: opt(&a.freq_min, Dim::AngularFrequency, "analysis.freq_min", d.freq_min)?,
        freq_max: opt(&a.freq_max, Dim::AngularFrequency, "analysis.freq_max", d.freq_max)?,
        points_per_decade: a.points_per_decade.unwrap_or(d.points_per_decade),
        refine_tol: a.refine_tol.unwrap_or(d.refine_tol),
        origin_indent_radius: opt(
            &a.origin_indent_radius,
            Dim::AngularFrequency,
            "analysis.origin_indent_radius",
            d.origin_indent_radius,
        )?,
        sim_step: opt(&a.sim_step, Dim::Time, "analysis.sim_step", d.sim_step)?,
        sim_duration: opt(&a.sim_duration, Dim::Time, "analysis.sim_duration", d.sim_duration)?,
        rng_seed: a.rng_seed.unwrap_or(d.rng_seed),
        equilibrium_tol: a.equilibrium_tol.unwrap_or(d.equilibrium_tol),
        assembly: a.assembly.unwrap_or_default(),
        damping_term: a.damping_term.unwrap_or_default(),
        ..d
    };

    let st = &raw.stabilizer;
    let def = StabilizerCoeffs::default();
    Ok(MicrogridScenario {
        name: raw.name.clone(),
        dgs,
        graph,
        network,
        options,
        stabilizer_enabled: st.enabled,
        stabilizer: StabilizerCoeffs {
            numerator: st.numerator.unwrap_or(def.numerator),
            denominator: st.denominator.unwrap_or(def.denominator),
        },
    })
}

/// Parses scenario text and rejects it unless it passes [`validate`].
pub fn load_scenario(text: &str) -> Result<MicrogridScenario> {
    let s = parse_scenario(text)?;
    let v = validate(&s);
    if v.is_empty() {
        Ok(s)
    } else {
        Err(Error::Invalid(v))
    }
}

pub fn load_scenario_file(path: impl AsRef<Path>) -> Result<MicrogridScenario> {
    load_scenario(&std::fs::read_to_string(path)?)
}

/// Serializes in SI units; `load_scenario` of the output reproduces `s` exactly.
pub fn scenario_to_string(s: &MicrogridScenario) -> String {
    let q = Quantity::si;
    let dg = s
        .dgs
        .iter()
        .map(|d| RawDg {
            k_p: Some(q(d.k_p, Dim::FrequencyDroop)),
            k_q: Some(q(d.k_q, Dim::VoltageDroop)),
            inertia: Some(q(d.inertia, Dim::Inertia)),
            omega_b: Some(q(d.omega_b, Dim::AngularFrequency)),
            d_p: Some(q(d.d_p, Dim::Torque)),
            damping_torque: None,
            k1: Some(Quantity::Number(d.k1)),
            k2: Some(Quantity::Number(d.k2)),
            sigma: Some(q(d.sigma, Dim::Time)),
            sigma_v: Some(q(d.sigma_v, Dim::Time)),
        })
        .collect();
    let g = &s.graph;
    let edges = g
        .edges()
        .into_iter()
        .map(|(i, j)| RawEdge {
            to: i + 1,
            from: j + 1,
            latency: Some(q(g.latency[i][j], Dim::Time)),
        })
        .collect();
    let o = &s.options;
    let raw = RawScenario {
        format_version: FORMAT_VERSION,
        name: s.name.clone(),
        network: RawNetwork {
            v_nom: q(s.network.v_nom, Dim::Voltage),
            slack_bus: s.network.slack_bus + 1,
            lines: s
                .network
                .lines
                .iter()
                .map(|l| RawLine {
                    from: l.from + 1,
                    to: l.to + 1,
                    r: q(l.r, Dim::Impedance),
                    x: q(l.x, Dim::Impedance),
                })
                .collect(),
            loads: s
                .network
                .loads
                .iter()
                .map(|l| RawLoad {
                    bus: l.bus + 1,
                    p: q(l.p, Dim::Power),
                    q: q(l.q, Dim::ReactivePower),
                })
                .collect(),
        },
        dg_defaults: RawDg::default(),
        dg,
        graph: RawGraph {
            leaders: (0..g.n()).filter(|&i| g.leaders[i]).map(|i| i + 1).collect(),
            edges,
            uniform_latency: None,
        },
        analysis: RawAnalysis {
            freq_min: Some(q(o.freq_min, Dim::AngularFrequency)),
            freq_max: Some(q(o.freq_max, Dim::AngularFrequency)),
            points_per_decade: Some(o.points_per_decade),
            refine_tol: Some(o.refine_tol),
            origin_indent_radius: Some(q(o.origin_indent_radius, Dim::AngularFrequency)),
            sim_step: Some(q(o.sim_step, Dim::Time)),
            sim_duration: Some(q(o.sim_duration, Dim::Time)),
            rng_seed: Some(o.rng_seed),
            equilibrium_tol: Some(o.equilibrium_tol),
            reference_omega: Some(q(o.reference_omega, Dim::AngularFrequency)),
            reference_voltage: Some(q(o.reference_voltage, Dim::Voltage)),
            assembly: Some(o.assembly),
            damping_term: Some(o.damping_term),
        },
        stabilizer: RawStabilizer {
            enabled: s.stabilizer_enabled,
            numerator: Some(s.stabilizer.numerator),
            denominator: Some(s.stabilizer.denominator),
        },
    };
    toml::to_string(&raw).expect("scenario serializes")
}

/// SHA-256 of the canonical SI serialization, hex encoded.
pub fn scenario_hash(s: &MicrogridScenario) -> String {
    hex::encode(Sha256::digest(scenario_to_string(s).as_bytes()))
}

/// The 4-bus system with chain graph 1 → 2 → 3 → 4 led by node 1 and no latency.
pub fn baseline() -> MicrogridScenario {
    use std::f64::consts::PI;
    let n = 4;
    let k_p = [2e-2, 1e-2, 0.5e-2, 0.67e-2];
    let k_q = [0.4, 0.2, 0.1, 0.13];
    let dgs = (0..n)
        .map(|i| DgParams {
            k_p: k_p[i] * PI * 1e-3,
            k_q: k_q[i] * 1e-3,
            inertia: 1.0,
            omega_b: 377.0,
            d_p: 1.0,
            k1: 5e5,
            k2: 1e5,
            sigma: 0.05,
            sigma_v: 0.1,
        })
        .collect();
    let line = |from, to, r, x| Line { from, to, r, x };
    let load = |bus, p: f64, q: f64| Load {
        bus,
        p: p * 1e3,
        q: q * 1e3,
    };
    MicrogridScenario {
        name: "baseline".into(),
        dgs,
        graph: CommGraph::chain(n),
        network: ElectricalNetwork {
            n,
            lines: vec![line(0, 1, 0.8, 0.9), line(0, 3, 0.9, 1.4), line(1, 2, 0.8, 1.0)],
            loads: vec![
                load(0, 8.0, 3.0),
                load(1, 10.0, 4.0),
                load(2, 21.0, 5.0),
                load(3, 14.0, 4.0),
            ],
            v_nom: 120.0,
            slack_bus: 0,
        },
        options: AnalysisOptions::with_references(377.0, 120.0),
        stabilizer_enabled: false,
        stabilizer: StabilizerCoeffs::default(),
    }
}

/// Overrides given as `path=value` pairs, e.g. `dg.2.inertia=5` (SI units).
pub fn apply_overrides(
    s: &MicrogridScenario,
    overrides: &BTreeMap<String, f64>,
) -> Result<MicrogridScenario> {
    let mut s = s.clone();
    for (path, &v) in overrides {
        crate::explorer::set_parameter(&mut s, path, v)?;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASELINE: &str = include_str!("../../../scenarios/baseline.scn");

    #[test]
    fn shipped_baseline_matches_builtin() {
        let s = load_scenario(BASELINE).unwrap();
        let b = baseline();
        assert_eq!(s.dgs, b.dgs);
        assert_eq!(s.network, b.network);
        assert_eq!(s.graph.adjacency, b.graph.adjacency);
        assert_eq!(s.graph.leaders, b.graph.leaders);
    }

    #[test]
    fn round_trip_is_exact() {
        let mut s = load_scenario(BASELINE).unwrap();
        s.graph.set_uniform_latency(0.37);
        let again = load_scenario(&scenario_to_string(&s)).unwrap();
        assert_eq!(s, again);
        assert_eq!(scenario_hash(&s), scenario_hash(&again));
    }

    #[test]
    fn kilo_and_base_units_agree() {
        let w = BASELINE.replace("\"8 kW\"", "\"8000 W\"");
        assert_ne!(w, BASELINE);
        assert_eq!(load_scenario(&w).unwrap(), load_scenario(BASELINE).unwrap());
    }

    #[test]
    fn omitted_load_is_zero() {
        let text = BASELINE.replace("{ bus = 2, p = \"10 kW\", q = \"4 kVAR\" },", "");
        let s = load_scenario(&text).unwrap();
        assert_eq!(s.network.load_at(1), (0.0, 0.0));
    }

    #[test]
    fn parse_errors_carry_location() {
        let e = load_scenario(&BASELINE.replace("\"8 kW\"", "\"8 kVAR\"")).unwrap_err();
        assert!(e.to_string().contains("network.loads[1].p"), "{e}");
        let e = load_scenario("format_version = 1\nname = [\n").unwrap_err();
        assert!(e.to_string().contains("line"), "{e}");
    }

    #[test]
    fn invalid_scenario_lists_violations() {
        let text = BASELINE.replace("{ to = 3, from = 2 },", "");
        match load_scenario(&text) {
            Err(Error::Invalid(v)) => assert!(v.iter().any(|x| x.detail.contains("node 3"))),
            other => panic!("expected violations, got {other:?}"),
        }
    }
}
