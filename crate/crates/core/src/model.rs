//! Scenario domain types and validation.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Per-DG control and machine parameters, SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgParams {
    /// Frequency droop, rad·s⁻¹·W⁻¹.
    pub k_p: f64,
    /// Voltage droop, V·VAR⁻¹.
    pub k_q: f64,
    /// Normalized inertia, kg·m².
    pub inertia: f64,
    /// Base frequency, rad/s.
    pub omega_b: f64,
    /// Damping factor D_p, N·m.
    pub d_p: f64,
    /// PI proportional gain.
    pub k1: f64,
    /// PI integral gain.
    pub k2: f64,
    /// Power measurement filter time constant, s.
    pub sigma: f64,
    /// Voltage low-pass filter time constant, s.
    pub sigma_v: f64,
}

impl DgParams {
    /// Damping torque factor D, with D_p = D·ω_b.
    pub fn damping_torque(&self) -> f64 {
        self.d_p / self.omega_b
    }

    pub fn with_damping_torque(mut self, d: f64) -> Self {
        self.d_p = d * self.omega_b;
        self
    }
}

/// Directed communication graph. Edge (i, j) carries information from j to i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommGraph {
    pub adjacency: Vec<Vec<bool>>,
    pub leaders: Vec<bool>,
    /// Per-edge latency τ_ij in seconds; entries on absent edges are ignored.
    pub latency: Vec<Vec<f64>>,
}

impl CommGraph {
    pub fn new(n: usize) -> Self {
        Self {
            adjacency: vec![vec![false; n]; n],
            leaders: vec![false; n],
            latency: vec![vec![0.0; n]; n],
        }
    }

    /// Chain 1 → 2 → … → n with node 1 as the only leader.
    pub fn chain(n: usize) -> Self {
        let mut g = Self::new(n);
        for i in 1..n {
            g.adjacency[i][i - 1] = true;
        }
        if n > 0 {
            g.leaders[0] = true;
        }
        g
    }

    /// Every ordered pair connected; leaders as given.
    pub fn full_mesh(leaders: Vec<bool>) -> Self {
        let n = leaders.len();
        let mut g = Self::new(n);
        for i in 0..n {
            for j in 0..n {
                g.adjacency[i][j] = i != j;
            }
        }
        g.leaders = leaders;
        g
    }

    pub fn n(&self) -> usize {
        self.adjacency.len()
    }

    pub fn a(&self, i: usize, j: usize) -> f64 {
        if self.adjacency[i][j] {
            1.0
        } else {
            0.0
        }
    }

    pub fn theta(&self, i: usize) -> f64 {
        if self.leaders[i] {
            1.0
        } else {
            0.0
        }
    }

    pub fn in_degree(&self, i: usize) -> usize {
        self.adjacency[i].iter().filter(|&&e| e).count()
    }

    pub fn edge_count(&self) -> usize {
        (0..self.n()).map(|i| self.in_degree(i)).sum()
    }

    /// Sets every present edge to the same latency.
    pub fn set_uniform_latency(&mut self, tau: f64) {
        let n = self.n();
        for i in 0..n {
            for j in 0..n {
                self.latency[i][j] = if self.adjacency[i][j] { tau } else { 0.0 };
            }
        }
    }

    pub fn max_latency(&self) -> f64 {
        let n = self.n();
        let mut m = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                if self.adjacency[i][j] {
                    m = m.max(self.latency[i][j]);
                }
            }
        }
        m
    }

    pub fn has_latency(&self) -> bool {
        self.max_latency() > 0.0
    }

    /// Present edges as (to, from) pairs, row-major.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if self.adjacency[i][j] {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// Series resistance, Ω.
    pub r: f64,
    /// Series reactance at base frequency, Ω.
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub bus: usize,
    /// Three-phase active power, W.
    pub p: f64,
    /// Three-phase reactive power, VAR.
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectricalNetwork {
    pub n: usize,
    pub lines: Vec<Line>,
    pub loads: Vec<Load>,
    /// Nominal per-phase RMS voltage, V.
    pub v_nom: f64,
    pub slack_bus: usize,
}

impl ElectricalNetwork {
    /// Load at a bus; absent entries mean zero load.
    pub fn load_at(&self, bus: usize) -> (f64, f64) {
        self.loads
            .iter()
            .find(|l| l.bus == bus)
            .map(|l| (l.p, l.q))
            .unwrap_or((0.0, 0.0))
    }

    pub fn set_load(&mut self, bus: usize, p: f64, q: f64) {
        match self.loads.iter_mut().find(|l| l.bus == bus) {
            Some(l) => {
                l.p = p;
                l.q = q;
            }
            None => self.loads.push(Load { bus, p, q }),
        }
    }
}

/// Which form of the A_s/B_s blocks to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Assembly {
    /// Elimination of the control laws; exact linearization of the simulator.
    #[default]
    Direct,
    /// The block matrices exactly as printed, including their slips.
    Literal,
}

/// Damping coefficient used in the swing-equation denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DampingTerm {
    #[default]
    Dp,
    D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    /// Lowest frequency considered for margins, rad/s.
    pub freq_min: f64,
    /// Upper end of the imaginary-axis sweep, rad/s.
    pub freq_max: f64,
    pub points_per_decade: usize,
    /// Maximum locus step (compressed plane) before a sample is inserted.
    pub refine_tol: f64,
    /// Radius of the right-half-plane indent around s = 0, rad/s.
    pub origin_indent_radius: f64,
    pub sim_step: f64,
    pub sim_duration: f64,
    pub rng_seed: u64,
    pub equilibrium_tol: f64,
    pub reference_omega: f64,
    pub reference_voltage: f64,
    pub assembly: Assembly,
    pub damping_term: DampingTerm,
}

impl AnalysisOptions {
    pub fn with_references(reference_omega: f64, reference_voltage: f64) -> Self {
        Self {
            freq_min: 1e-3,
            freq_max: 1e4,
            points_per_decade: 64,
            refine_tol: 0.05,
            origin_indent_radius: 1e-4,
            sim_step: 1e-3,
            sim_duration: 60.0,
            rng_seed: 1,
            equilibrium_tol: 1e-6,
            reference_omega,
            reference_voltage,
            assembly: Assembly::Direct,
            damping_term: DampingTerm::Dp,
        }
    }
}

/// Rational filter F(s) = (n2 s² + n1 s + n0)/(d2 s² + d1 s + d0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilizerCoeffs {
    pub numerator: [f64; 3],
    pub denominator: [f64; 3],
}

impl Default for StabilizerCoeffs {
    fn default() -> Self {
        Self {
            numerator: [0.5, 1.0, 1.0],
            denominator: [1.0, 2.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrogridScenario {
    pub name: String,
    pub dgs: Vec<DgParams>,
    pub graph: CommGraph,
    pub network: ElectricalNetwork,
    pub options: AnalysisOptions,
    pub stabilizer_enabled: bool,
    pub stabilizer: StabilizerCoeffs,
}

impl MicrogridScenario {
    pub fn n(&self) -> usize {
        self.dgs.len()
    }

    /// Copy with the same latency on every present edge.
    pub fn with_uniform_latency(&self, tau: f64) -> Self {
        let mut s = self.clone();
        s.graph.set_uniform_latency(tau);
        s
    }

    pub fn with_stabilizer(&self, enabled: bool) -> Self {
        let mut s = self.clone();
        s.stabilizer_enabled = enabled;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.rule, self.detail)
    }
}

fn push(v: &mut Vec<Violation>, rule: &'static str, detail: String) {
    v.push(Violation { rule, detail });
}

/// Checks every scenario invariant. Empty iff the scenario is usable.
///
/// Node and bus indices in messages are 1-based, matching scenario files.
pub fn validate(s: &MicrogridScenario) -> Vec<Violation> {
    let mut v = Vec::new();
    let n = s.dgs.len();
    let g = &s.graph;

    if n == 0 {
        push(&mut v, "size", "scenario has no DGs".into());
        return v;
    }
    if g.n() != n || g.leaders.len() != n || g.latency.len() != n {
        push(
            &mut v,
            "size",
            format!("graph has {} nodes but there are {n} DGs", g.n()),
        );
    }
    if s.network.n != n {
        push(
            &mut v,
            "size",
            format!("network has {} buses but there are {n} DGs", s.network.n),
        );
    }
    if !v.is_empty() {
        return v;
    }
    if g.adjacency.iter().any(|r| r.len() != n) || g.latency.iter().any(|r| r.len() != n) {
        push(&mut v, "size", "adjacency/latency matrices are not square".into());
        return v;
    }

    for (i, dg) in s.dgs.iter().enumerate() {
        let k = i + 1;
        let checks: [(&'static str, bool, &str); 7] = [
            ("dg.inertia", dg.inertia > 0.0, "J must be > 0"),
            ("dg.omega_b", dg.omega_b > 0.0, "omega_b must be > 0"),
            ("dg.sigma", dg.sigma > 0.0, "sigma must be > 0"),
            ("dg.sigma_v", dg.sigma_v > 0.0, "sigma_v must be > 0"),
            ("dg.k_p", dg.k_p > 0.0, "k_p must be > 0"),
            ("dg.k_q", dg.k_q >= 0.0, "k_q must be >= 0"),
            ("dg.d_p", dg.d_p >= 0.0, "D_p must be >= 0"),
        ];
        for (rule, ok, msg) in checks {
            if !ok {
                push(&mut v, rule, format!("DG {k}: {msg}"));
            }
        }
        if !(dg.k1 >= 0.0 && dg.k2 > 0.0) {
            push(&mut v, "dg.pi", format!("DG {k}: PI gains need k1 >= 0, k2 > 0"));
        }
    }

    for i in 0..n {
        if g.adjacency[i][i] {
            push(&mut v, "graph.self_loop", format!("a_{0}{0} must be 0", i + 1));
        }
        for j in 0..n {
            let tau = g.latency[i][j];
            if !(tau >= 0.0) || !tau.is_finite() {
                push(
                    &mut v,
                    "graph.latency",
                    format!("negative or non-finite latency {tau} on edge ({},{})", i + 1, j + 1),
                );
            }
        }
        if g.in_degree(i) == 0 && !g.leaders[i] {
            push(
                &mut v,
                "graph.controllability",
                format!("node {} has d_i + theta_i = 0 (no neighbors and not a leader)", i + 1),
            );
        }
    }
    for k in unreachable_nodes(g) {
        push(
            &mut v,
            "graph.spanning_tree",
            format!("no directed path from leader set to node {}", k + 1),
        );
    }

    let net = &s.network;
    if !(net.v_nom > 0.0) {
        push(&mut v, "network.v_nom", "v_nom must be > 0".into());
    }
    if net.slack_bus >= n {
        push(
            &mut v,
            "network.slack_bus",
            format!("slack bus {} out of range", net.slack_bus + 1),
        );
    }
    for (k, l) in net.lines.iter().enumerate() {
        if l.from >= n || l.to >= n || l.from == l.to {
            push(
                &mut v,
                "network.line_endpoint",
                format!("line {} has invalid endpoints {}-{}", k + 1, l.from + 1, l.to + 1),
            );
        }
        if !(l.r >= 0.0) {
            push(&mut v, "network.line_r", format!("line {} has R < 0", k + 1));
        }
        if l.r == 0.0 && l.x == 0.0 {
            push(&mut v, "network.line_z", format!("line {} has zero impedance", k + 1));
        }
    }
    let mut seen = vec![false; n];
    for l in &net.loads {
        if l.bus >= n {
            push(&mut v, "network.load_bus", format!("load on invalid bus {}", l.bus + 1));
        } else if seen[l.bus] {
            push(
                &mut v,
                "network.load_duplicate",
                format!("bus {} has more than one load entry", l.bus + 1),
            );
        } else {
            seen[l.bus] = true;
        }
    }

    let o = &s.options;
    if !(o.freq_min > 0.0 && o.freq_min < o.freq_max) {
        push(&mut v, "options.freq", "need 0 < freq_min < freq_max".into());
    }
    if o.points_per_decade < 8 {
        push(&mut v, "options.ppd", "points_per_decade must be >= 8".into());
    }
    if !(o.sim_step > 0.0) {
        push(&mut v, "options.sim_step", "sim_step must be > 0".into());
    }
    if !(o.origin_indent_radius > 0.0 && o.origin_indent_radius < o.freq_min) {
        push(
            &mut v,
            "options.indent",
            "need 0 < origin_indent_radius < freq_min".into(),
        );
    }
    if !(o.refine_tol > 0.0) {
        push(&mut v, "options.refine_tol", "refine_tol must be > 0".into());
    }
    if !(o.equilibrium_tol > 0.0) {
        push(&mut v, "options.equilibrium_tol", "equilibrium_tol must be > 0".into());
    }
    if !(o.reference_voltage > 0.0 && o.reference_omega > 0.0) {
        push(&mut v, "options.reference", "reference voltage and frequency must be > 0".into());
    }

    let st = &s.stabilizer;
    let [n2, n1, n0] = st.numerator;
    let [d2, d1, d0] = st.denominator;
    let hurwitz = (d2 > 0.0 && d1 > 0.0 && d0 > 0.0) || (d2 < 0.0 && d1 < 0.0 && d0 < 0.0);
    if !hurwitz {
        push(
            &mut v,
            "stabilizer.denominator",
            "stabilizer denominator must be second order with left-half-plane roots".into(),
        );
    } else if ((n0 / d0) - 1.0).abs() > 1e-12 {
        push(
            &mut v,
            "stabilizer.dc_gain",
            format!("stabilizer DC gain is {} (must be 1)", n0 / d0),
        );
    }
    if ![n2, n1, n0].iter().all(|x| x.is_finite()) {
        push(&mut v, "stabilizer.numerator", "numerator must be finite".into());
    }
    v
}

/// Non-fatal findings: latency stored on absent edges.
pub fn warnings(s: &MicrogridScenario) -> Vec<Violation> {
    let g = &s.graph;
    let mut v = Vec::new();
    for i in 0..g.n() {
        for j in 0..g.n() {
            if !g.adjacency[i][j] && g.latency[i][j] != 0.0 {
                push(
                    &mut v,
                    "graph.latency_on_absent_edge",
                    format!("latency {} s on absent edge ({},{}) is ignored", g.latency[i][j], i + 1, j + 1),
                );
            }
        }
    }
    v
}

/// Nodes that cannot be reached from any leader along information flow.
pub(crate) fn unreachable_nodes(g: &CommGraph) -> Vec<usize> {
    let n = g.n();
    let mut reached: Vec<bool> = g.leaders.clone();
    let mut stack: Vec<usize> = (0..n).filter(|&i| reached[i]).collect();
    while let Some(j) = stack.pop() {
        // j informs every i with a_ij = 1
        for i in 0..n {
            if g.adjacency[i][j] && !reached[i] {
                reached[i] = true;
                stack.push(i);
            }
        }
    }
    (0..n).filter(|&i| !reached[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateVar {
    Omega(usize),
    Voltage(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputVar {
    P(usize),
    Q(usize),
}

/// Ordering of x = [Δω…, ΔV…], y = [ΔP…, ΔQ…] and the interleaving permutation T.
#[derive(Debug, Clone)]
pub struct StateLabeling {
    pub x_order: Vec<StateVar>,
    pub y_order: Vec<OutputVar>,
    /// T·[a_1…a_n, b_1…b_n] = [a_1, b_1, …, a_n, b_n].
    pub t_perm: DMatrix<f64>,
}

impl StateLabeling {
    pub fn new(n: usize) -> Self {
        let x_order = (0..n)
            .map(StateVar::Omega)
            .chain((0..n).map(StateVar::Voltage))
            .collect();
        let y_order = (0..n).map(OutputVar::P).chain((0..n).map(OutputVar::Q)).collect();
        let mut t = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            t[(2 * i, i)] = 1.0;
            t[(2 * i + 1, n + i)] = 1.0;
        }
        Self {
            x_order,
            y_order,
            t_perm: t,
        }
    }
}
