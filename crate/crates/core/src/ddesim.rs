//! Nonlinear delay-differential simulation of the controlled microgrid and the
//! frequency-domain reconstruction of its linearized response.
//!
//! Per DG the states are δ, ω, the PI integral ζ, the voltage-consensus
//! integrator V*, the voltage filter V and the power filters P_f, Q_f. The
//! network is solved as a quasi-static phasor circuit at every stage.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{solve_equilibrium, Equilibrium};
use crate::error::{Error, Result};
use crate::linalg::{c, identity, CMatrix};
use crate::model::{DampingTerm, MicrogridScenario, StabilizerCoeffs};
use crate::network::{assemble_bus_admittance, phasors, power_injections};
use crate::nyquist::assess_stability;
use crate::smallsignal::{build_cs, return_ratio};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ordering {
    /// Each stage reads x(t − τ(t)); a shorter delay may deliver older data.
    #[default]
    Unordered,
    /// Read instants never move backwards on an edge.
    Fifo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LatencyKind {
    /// The per-edge latencies stored in the scenario.
    Constant,
    UniformRandom { tau_min: f64, tau_max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub kind: LatencyKind,
    pub resample_interval: f64,
    pub seed: u64,
    pub ordering: Ordering,
}

impl LatencyModel {
    pub fn constant() -> Self {
        Self {
            kind: LatencyKind::Constant,
            resample_interval: 0.01,
            seed: 1,
            ordering: Ordering::default(),
        }
    }

    pub fn uniform(tau_min: f64, tau_max: f64, seed: u64) -> Self {
        Self {
            kind: LatencyKind::UniformRandom { tau_min, tau_max },
            resample_interval: 0.01,
            seed,
            ordering: Ordering::default(),
        }
    }

    fn bound(&self, sc: &MicrogridScenario) -> f64 {
        match self.kind {
            LatencyKind::Constant => sc.graph.max_latency(),
            LatencyKind::UniformRandom { tau_max, .. } => tau_max,
        }
    }
}

/// Initial offsets from equilibrium applied at t = 0, plus reference steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    /// Per-DG frequency offset, rad/s.
    pub omega: Vec<f64>,
    /// Per-DG voltage offset, V.
    pub voltage: Vec<f64>,
    pub omega_ref_step: f64,
    pub v_ref_step: f64,
}

impl Disturbance {
    /// Offsets of `rel` times the equilibrium ω and V on every DG.
    pub fn relative(eq: &Equilibrium, rel: f64) -> Self {
        Self {
            omega: vec![rel * eq.omega_e; eq.v.len()],
            voltage: eq.v.iter().map(|v| rel * v).collect(),
            ..Default::default()
        }
    }

    fn is_zero(&self) -> bool {
        self.omega.iter().chain(&self.voltage).all(|x| *x == 0.0)
            && self.omega_ref_step == 0.0
            && self.v_ref_step == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    /// Keep every `record_stride`-th step in the trace.
    pub record_stride: usize,
    /// Longest delay the history buffers can serve; `None` sizes them from the latency model.
    pub history_horizon: Option<f64>,
    /// |ω − ω_ref| beyond this stops the run as diverged, rad/s.
    pub omega_bound: f64,
    /// V outside [1/k, k/2]·V_ref stops the run as diverged.
    pub voltage_ratio_bound: f64,
    /// Relative band for the convergence verdict.
    pub band: f64,
}

impl SimConfig {
    pub fn from_scenario(sc: &MicrogridScenario) -> Self {
        Self {
            dt: sc.options.sim_step,
            record_stride: 1,
            history_horizon: None,
            omega_bound: 100.0,
            voltage_ratio_bound: 20.0,
            band: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub t: Vec<f64>,
    /// `omega[i][k]` is DG i at `t[k]`.
    pub omega: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub omega_star: Vec<Vec<f64>>,
    pub v_star: Vec<Vec<f64>>,
    /// (t, edge index into `edges`, τ) at every resample.
    pub latency_trace: Vec<(f64, usize, f64)>,
    /// Edges as (to, from), 0-based.
    pub edges: Vec<(usize, usize)>,
    pub converged: bool,
    pub settling_time: Option<f64>,
    pub divergence_time: Option<f64>,
}

impl SimTrace {
    fn new(n: usize, edges: Vec<(usize, usize)>) -> Self {
        let e = || vec![Vec::new(); n];
        Self {
            t: Vec::new(),
            omega: e(),
            v: e(),
            p: e(),
            q: e(),
            omega_star: e(),
            v_star: e(),
            latency_trace: Vec::new(),
            edges,
            converged: false,
            settling_time: None,
            divergence_time: None,
        }
    }
}

/// Controllable canonical realization of F(s) with a direct feed-through.
#[derive(Debug, Clone, Copy)]
struct Canon {
    a0: f64,
    a1: f64,
    c0: f64,
    c1: f64,
    d: f64,
}

impl Canon {
    fn new(f: &StabilizerCoeffs) -> Self {
        let [n2, n1, n0] = f.numerator;
        let [d2, d1, d0] = f.denominator;
        let (a1, a0) = (d1 / d2, d0 / d2);
        let (m2, m1, m0) = (n2 / d2, n1 / d2, n0 / d2);
        Self {
            a0,
            a1,
            c0: m0 - m2 * a0,
            c1: m1 - m2 * a1,
            d: m2,
        }
    }

    fn output(&self, x1: f64, x2: f64, u: f64) -> f64 {
        self.c0 * x1 + self.c1 * x2 + self.d * u
    }

    fn deriv(&self, x1: f64, x2: f64, u: f64) -> (f64, f64) {
        (x2, -self.a0 * x1 - self.a1 * x2 + u)
    }
}

const NS: usize = 7;
const DELTA: usize = 0;
const OMEGA: usize = 1;
const ZETA: usize = 2;
const VSTAR: usize = 3;
const VOLT: usize = 4;
const PF: usize = 5;
const QF: usize = 6;

/// Samples of ω, P_f, V, Q_f per DG on the step grid.
struct History {
    cap: usize,
    data: Vec<[f64; 4]>,
    n: usize,
    rest: Vec<[f64; 4]>,
    latest: usize,
}

impl History {
    fn new(n: usize, cap: usize, rest: Vec<[f64; 4]>) -> Self {
        Self {
            cap,
            data: vec![[0.0; 4]; cap * n],
            n,
            rest,
            latest: 0,
        }
    }

    fn push(&mut self, k: usize, x: &[f64]) {
        let slot = k % self.cap;
        for i in 0..self.n {
            let b = NS * i;
            self.data[slot * self.n + i] = [x[b + OMEGA], x[b + PF], x[b + VOLT], x[b + QF]];
        }
        self.latest = k;
    }

    fn at(&self, k: usize, i: usize) -> [f64; 4] {
        self.data[(k % self.cap) * self.n + i]
    }

    /// Linear interpolation at step position `pos` (in units of dt).
    fn sample(&self, pos: f64, i: usize) -> [f64; 4] {
        if pos <= 0.0 {
            return if pos == 0.0 { self.at(0, i) } else { self.rest[i] };
        }
        let pos = pos.min(self.latest as f64);
        let k = pos.floor() as usize;
        if k >= self.latest {
            return self.at(self.latest, i);
        }
        let f = pos - k as f64;
        let (a, b) = (self.at(k, i), self.at(k + 1, i));
        [0, 1, 2, 3].map(|m| a[m] + f * (b[m] - a[m]))
    }
}

struct Plant {
    n: usize,
    y: DMatrix<Complex64>,
    sc: MicrogridScenario,
    edges: Vec<(usize, usize)>,
    canon: Option<Canon>,
    omega_ref: f64,
    v_ref: f64,
}

impl Plant {
    fn powers(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let v: Vec<f64> = (0..self.n).map(|i| x[NS * i + VOLT]).collect();
        let d: Vec<f64> = (0..self.n).map(|i| x[NS * i + DELTA]).collect();
        power_injections(&self.y, &phasors(&v, &d))
    }

    /// ω* and the V* derivative per DG, given delayed (and filtered) inputs per edge.
    fn control(&self, x: &[f64], inputs: &[[f64; 3]]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let g = &self.sc.graph;
        let mut sum_w = vec![0.0; n];
        let mut sum_p = vec![0.0; n];
        let mut sum_v = vec![0.0; n];
        for (e, &(i, _)) in self.edges.iter().enumerate() {
            sum_w[i] += inputs[e][0];
            sum_p[i] += inputs[e][1];
            sum_v[i] += inputs[e][2];
        }
        let mut ws = vec![0.0; n];
        let mut vs_dot = vec![0.0; n];
        for i in 0..n {
            let p = &self.sc.dgs[i];
            let b = NS * i;
            let d = g.in_degree(i) as f64;
            let th = g.theta(i);
            ws[i] = (sum_w[i] + th * self.omega_ref) / (d + th) + sum_p[i] - d * p.k_p * x[b + PF];
            vs_dot[i] = sum_v[i] - d * (x[b + VOLT] + p.k_q * x[b + QF])
                + th * (self.v_ref - x[b + VOLT]);
        }
        (ws, vs_dot)
    }

    fn rhs(&self, x: &[f64], raw: &[[f64; 3]], dx: &mut [f64]) {
        let n = self.n;
        let ne = self.edges.len();
        let base = NS * n;
        let mut inputs = raw.to_vec();
        if let Some(cf) = &self.canon {
            for e in 0..ne {
                for ch in 0..3 {
                    let k = base + 6 * e + 2 * ch;
                    inputs[e][ch] = cf.output(x[k], x[k + 1], raw[e][ch]);
                    let (d1, d2) = cf.deriv(x[k], x[k + 1], raw[e][ch]);
                    dx[k] = d1;
                    dx[k + 1] = d2;
                }
            }
        }
        let (p, q) = self.powers(x);
        let (ws, vs_dot) = self.control(x, &inputs);
        for i in 0..n {
            let pr = &self.sc.dgs[i];
            let b = NS * i;
            let w = x[b + OMEGA];
            let damping = match self.sc.options.damping_term {
                DampingTerm::Dp => pr.d_p,
                DampingTerm::D => pr.damping_torque(),
            };
            dx[b + DELTA] = w - self.omega_ref;
            dx[b + OMEGA] = (pr.k1 * (ws[i] - w) + x[b + ZETA] - x[b + PF] - damping * (w - pr.omega_b))
                / (pr.inertia * pr.omega_b);
            dx[b + ZETA] = pr.k2 * (ws[i] - w);
            dx[b + VSTAR] = vs_dot[i];
            dx[b + VOLT] = (x[b + VSTAR] - pr.k_q * x[b + QF] - x[b + VOLT]) / pr.sigma_v;
            dx[b + PF] = (p[i] - x[b + PF]) / pr.sigma;
            dx[b + QF] = (q[i] - x[b + QF]) / pr.sigma;
        }
    }

    fn signal(&self, j: usize, h: [f64; 4]) -> [f64; 3] {
        let p = &self.sc.dgs[j];
        [h[0], p.k_p * h[1], h[2] + p.k_q * h[3]]
    }

    fn signal_now(&self, j: usize, x: &[f64]) -> [f64; 3] {
        let b = NS * j;
        self.signal(j, [x[b + OMEGA], x[b + PF], x[b + VOLT], x[b + QF]])
    }
}

/// Simulates from a freshly solved equilibrium.
pub fn simulate(
    sc: &MicrogridScenario,
    latency: &LatencyModel,
    disturbance: &Disturbance,
    duration: f64,
) -> Result<SimTrace> {
    let eq = solve_equilibrium(sc)?;
    simulate_from(sc, &eq, latency, disturbance, duration, &SimConfig::from_scenario(sc))
}

pub fn simulate_from(
    sc: &MicrogridScenario,
    eq: &Equilibrium,
    latency: &LatencyModel,
    disturbance: &Disturbance,
    duration: f64,
    cfg: &SimConfig,
) -> Result<SimTrace> {
    let n = sc.n();
    let dt = cfg.dt;
    if !(duration > 0.0) || !(dt > 0.0) {
        return Err(Error::Config("duration and step must be positive".into()));
    }
    if let LatencyKind::UniformRandom { tau_min, tau_max } = latency.kind {
        if !(0.0 <= tau_min && tau_min <= tau_max) {
            return Err(Error::Config(format!("invalid latency bounds [{tau_min}, {tau_max}]")));
        }
        if latency.resample_interval < dt {
            return Err(Error::Config("resample interval shorter than the step".into()));
        }
    }
    let tau_bound = latency.bound(sc);
    let horizon = cfg.history_horizon.unwrap_or(tau_bound + 2.0 * dt);
    if tau_bound > horizon {
        return Err(Error::Config(format!(
            "maximum latency {tau_bound} s exceeds history horizon {horizon} s"
        )));
    }
    let canon = if sc.stabilizer_enabled {
        Some(Canon::new(&sc.stabilizer))
    } else {
        None
    };
    let edges = sc.graph.edges();
    let ne = edges.len();
    let plant = Plant {
        n,
        y: assemble_bus_admittance(&sc.network)?,
        sc: sc.clone(),
        edges: edges.clone(),
        canon,
        omega_ref: sc.options.reference_omega + disturbance.omega_ref_step,
        v_ref: sc.options.reference_voltage + disturbance.v_ref_step,
    };

    let dim = NS * n + if canon.is_some() { 6 * ne } else { 0 };
    let mut x = vec![0.0; dim];
    let mut rest = Vec::with_capacity(n);
    for i in 0..n {
        let p = &sc.dgs[i];
        let b = NS * i;
        let damping = match sc.options.damping_term {
            DampingTerm::Dp => p.d_p,
            DampingTerm::D => p.damping_torque(),
        };
        x[b + DELTA] = eq.delta[i];
        x[b + OMEGA] = eq.omega_e;
        x[b + ZETA] = eq.p[i] + damping * (eq.omega_e - p.omega_b);
        x[b + VSTAR] = eq.v[i] + p.k_q * eq.q[i];
        x[b + VOLT] = eq.v[i];
        x[b + PF] = eq.p[i];
        x[b + QF] = eq.q[i];
        rest.push([eq.omega_e, eq.p[i], eq.v[i], eq.q[i]]);
    }
    if let Some(cf) = &canon {
        for (e, &(_, j)) in edges.iter().enumerate() {
            let u = plant.signal(j, rest[j]);
            for ch in 0..3 {
                x[NS * n + 6 * e + 2 * ch] = u[ch] / cf.a0;
            }
        }
    }
    let cap = (horizon / dt).ceil() as usize + 3;
    let mut hist = History::new(n, cap, rest);
    for i in 0..n {
        let b = NS * i;
        if let Some(&d) = disturbance.omega.get(i) {
            x[b + OMEGA] += d;
        }
        if let Some(&d) = disturbance.voltage.get(i) {
            x[b + VOLT] += d;
        }
    }
    hist.push(0, &x);

    let mut taus: Vec<f64> = edges.iter().map(|&(i, j)| sc.graph.latency[i][j]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(latency.seed);
    let steps_per_resample = ((latency.resample_interval / dt).round() as usize).max(1);
    let mut last_read = vec![f64::NEG_INFINITY; ne];
    let steps = (duration / dt).round() as usize;
    let mut trace = SimTrace::new(n, edges.clone());

    let record = |trace: &mut SimTrace, t: f64, x: &[f64], plant: &Plant, hist: &History| {
        let (p, q) = plant.powers(x);
        let raw: Vec<[f64; 3]> = edges
            .iter()
            .map(|&(_, j)| plant.signal(j, hist.sample(hist.latest as f64, j)))
            .collect();
        let (ws, _) = plant.control(x, &raw);
        trace.t.push(t);
        for i in 0..n {
            let b = NS * i;
            trace.omega[i].push(x[b + OMEGA]);
            trace.v[i].push(x[b + VOLT]);
            trace.p[i].push(p[i]);
            trace.q[i].push(q[i]);
            trace.omega_star[i].push(ws[i]);
            trace.v_star[i].push(x[b + VSTAR]);
        }
    };

    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    for step in 0..steps {
        let t = step as f64 * dt;
        if step % steps_per_resample == 0 {
            if let LatencyKind::UniformRandom { tau_min, tau_max } = latency.kind {
                for (e, tau) in taus.iter_mut().enumerate() {
                    *tau = if tau_max > tau_min {
                        rng.gen_range(tau_min..=tau_max)
                    } else {
                        tau_min
                    };
                    trace.latency_trace.push((t, e, *tau));
                }
            }
        }
        if step % cfg.record_stride == 0 {
            record(&mut trace, t, &x, &plant, &hist);
        }

        let read_floor = last_read.clone();
        let inputs_at = |ts: f64, xs: &[f64]| -> Vec<[f64; 3]> {
            edges
                .iter()
                .enumerate()
                .map(|(e, &(_, j))| {
                    let tau = taus[e];
                    if tau == 0.0 {
                        return plant.signal_now(j, xs);
                    }
                    let mut r = ts - tau;
                    if latency.ordering == Ordering::Fifo {
                        r = r.max(read_floor[e]);
                    }
                    plant.signal(j, hist.sample((r / dt).min(step as f64), j))
                })
                .collect()
        };

        let u1 = inputs_at(t, &x);
        plant.rhs(&x, &u1, &mut k1);
        for m in 0..dim {
            tmp[m] = x[m] + 0.5 * dt * k1[m];
        }
        let u2 = inputs_at(t + 0.5 * dt, &tmp);
        plant.rhs(&tmp, &u2, &mut k2);
        for m in 0..dim {
            tmp[m] = x[m] + 0.5 * dt * k2[m];
        }
        let u3 = inputs_at(t + 0.5 * dt, &tmp);
        plant.rhs(&tmp, &u3, &mut k3);
        for m in 0..dim {
            tmp[m] = x[m] + dt * k3[m];
        }
        let u4 = inputs_at(t + dt, &tmp);
        plant.rhs(&tmp, &u4, &mut k4);
        for m in 0..dim {
            x[m] += dt / 6.0 * (k1[m] + 2.0 * k2[m] + 2.0 * k3[m] + k4[m]);
        }
        hist.push(step + 1, &x);
        if latency.ordering == Ordering::Fifo {
            let tn = (step + 1) as f64 * dt;
            for (e, lr) in last_read.iter_mut().enumerate() {
                *lr = lr.max(tn - taus[e]);
            }
        }

        let tn = (step + 1) as f64 * dt;
        let blown = (0..n).any(|i| {
            let w = x[NS * i + OMEGA];
            let v = x[NS * i + VOLT];
            !w.is_finite()
                || !v.is_finite()
                || (w - sc.options.reference_omega).abs() > cfg.omega_bound
                || v > 0.5 * cfg.voltage_ratio_bound * sc.options.reference_voltage
                || v < sc.options.reference_voltage / cfg.voltage_ratio_bound
        });
        if blown {
            trace.divergence_time = Some(tn);
            break;
        }
    }
    if trace.divergence_time.is_none() && steps.is_multiple_of(cfg.record_stride) {
        record(&mut trace, steps as f64 * dt, &x, &plant, &hist);
    }
    let (conv, settle) = detect_convergence(&trace, cfg.band);
    trace.converged = conv;
    trace.settling_time = settle;
    Ok(trace)
}

/// Converged iff no blow-up and every ω_i, V_i stays within `band`·|mean| of
/// its mean over the final 20% of the trace. Settling time is the last instant
/// any of them was outside that band.
pub fn detect_convergence(trace: &SimTrace, band: f64) -> (bool, Option<f64>) {
    if trace.divergence_time.is_some() || trace.t.is_empty() {
        return (false, None);
    }
    let len = trace.t.len();
    let start = len - (len / 5).max(1);
    let mut converged = true;
    let mut last_out: Option<usize> = None;
    for sig in trace.omega.iter().chain(&trace.v) {
        let w = &sig[start..];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let tol = band * mean.abs();
        if w.iter().any(|x| (x - mean).abs() > tol) {
            converged = false;
        }
        if let Some(k) = sig.iter().rposition(|x| (x - mean).abs() > tol) {
            last_out = Some(last_out.map_or(k, |m: usize| m.max(k)));
        }
    }
    if !converged {
        return (false, None);
    }
    let settle = match last_out {
        None => 0.0,
        Some(k) => trace.t[(k + 1).min(len - 1)],
    };
    (true, Some(settle))
}

/// Exponential rate (1/s, positive when decaying) fitted to the envelope of
/// the largest frequency deviation from the final value.
pub fn envelope_decay_rate(trace: &SimTrace, t_from: f64, t_to: f64) -> Option<f64> {
    let n = trace.omega.len();
    let fin: Vec<f64> = (0..n).map(|i| *trace.omega[i].last().unwrap()).collect();
    let dev: Vec<f64> = (0..trace.t.len())
        .map(|k| (0..n).map(|i| (trace.omega[i][k] - fin[i]).abs()).fold(0.0, f64::max))
        .collect();
    // local maxima of the deviation envelope
    let pts: Vec<(f64, f64)> = (1..dev.len() - 1)
        .filter(|&k| trace.t[k] >= t_from && trace.t[k] <= t_to)
        .filter(|&k| dev[k] >= dev[k - 1] && dev[k] >= dev[k + 1] && dev[k] > 0.0)
        .map(|k| (trace.t[k], dev[k].ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (sx / m, sy / m);
    let (num, den) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + (p.0 - mx) * (p.1 - my), b + (p.0 - mx).powi(2)));
    Some(-num / den)
}

/// Options for the numerical inverse Laplace transform.
#[derive(Debug, Clone, Copy)]
pub struct InversionConfig {
    pub t_max: f64,
    pub dt: f64,
    pub terms: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            t_max: 30.0,
            dt: 0.01,
            terms: 160_000,
        }
    }
}

/// Fourier-series inverse Laplace transform (period 2T, abscissa a) of a
/// vector-valued function, sampled on a uniform grid.
fn invert(f: impl Fn(Complex64) -> Result<Vec<Complex64>>, dim: usize, cfg: &InversionConfig) -> Result<Vec<Vec<f64>>> {
    let big_t = 2.0 * cfg.t_max;
    let a = (1e8f64).ln() / (2.0 * big_t);
    let m = (2.0 * big_t / cfg.dt).round() as usize;
    let mut bins = vec![vec![Complex64::new(0.0, 0.0); m]; dim];
    let f0 = f(c(a, 0.0))?;
    for k in 1..=cfg.terms {
        let fk = f(c(a, k as f64 * PI / big_t))?;
        for d in 0..dim {
            bins[d][k % m] += fk[d];
        }
    }
    let fft = FftPlanner::new().plan_fft_inverse(m);
    let steps = (cfg.t_max / cfg.dt).round() as usize + 1;
    let mut out = Vec::with_capacity(dim);
    for d in 0..dim {
        let mut buf = bins[d].clone();
        fft.process(&mut buf);
        out.push(
            (0..steps)
                .map(|j| {
                    let t = j as f64 * cfg.dt;
                    (a * t).exp() / big_t * (0.5 * f0[d].re + buf[j].re)
                })
                .collect(),
        );
    }
    Ok(out)
}

/// Small-signal response to the initial offsets of `disturbance`, reconstructed
/// from the closed loop (I + L)⁻¹ in the frequency domain.
pub fn linearized_step_response(
    sc: &MicrogridScenario,
    eq: &Equilibrium,
    disturbance: &Disturbance,
    cfg: &InversionConfig,
) -> Result<SimTrace> {
    let n = sc.n();
    let mut trace = SimTrace::new(n, sc.graph.edges());
    let steps = (cfg.t_max / cfg.dt).round() as usize + 1;
    trace.t = (0..steps).map(|j| j as f64 * cfg.dt).collect();
    let fill = |trace: &mut SimTrace, dw: &[Vec<f64>], dv: &[Vec<f64>], dp: &[Vec<f64>], dq: &[Vec<f64>]| {
        for i in 0..n {
            trace.omega[i] = dw[i].iter().map(|x| eq.omega_e + x).collect();
            trace.v[i] = dv[i].iter().map(|x| eq.v[i] + x).collect();
            trace.p[i] = dp[i].iter().map(|x| eq.p[i] + x).collect();
            trace.q[i] = dq[i].iter().map(|x| eq.q[i] + x).collect();
        }
    };
    if disturbance.is_zero() {
        let z = vec![vec![0.0; steps]; n];
        fill(&mut trace, &z, &z, &z, &z);
        trace.converged = true;
        trace.settling_time = Some(0.0);
        return Ok(trace);
    }
    if disturbance.omega_ref_step != 0.0 || disturbance.v_ref_step != 0.0 {
        return Err(Error::Config("linearized response supports initial offsets only".into()));
    }
    let an = assess_stability(sc)?;
    if !an.stable {
        return Err(Error::Unstable);
    }
    let l = return_ratio(sc, eq)?;
    let cs = build_cs(eq, &sc.network, &sc.dgs, sc.options.assembly)?;
    let dw: Vec<f64> = (0..n).map(|i| disturbance.omega.get(i).copied().unwrap_or(0.0)).collect();
    let dv: Vec<f64> = (0..n).map(|i| disturbance.voltage.get(i).copied().unwrap_or(0.0)).collect();
    let damping = |i: usize| match sc.options.damping_term {
        DampingTerm::Dp => sc.dgs[i].d_p,
        DampingTerm::D => sc.dgs[i].damping_torque(),
    };
    let u_of = |s: Complex64| -> Vec<Complex64> {
        let mut u = vec![c(0.0, 0.0); 2 * n];
        for i in 0..n {
            let p = &sc.dgs[i];
            let jw = p.inertia * p.omega_b;
            u[i] = jw * dw[i] * s / (jw * s * s + (p.k1 + damping(i)) * s + p.k2);
            u[n + i] = p.sigma_v * dv[i] / (p.sigma_v * s + 1.0);
        }
        u
    };
    // Remainder x − u = −(I + L)⁻¹ L u, and y = C_s x.
    let eval = |s: Complex64| -> Result<Vec<Complex64>> {
        let lm = l.eval(s)?;
        let u = CMatrix::from_column_slice(2 * n, 1, &u_of(s));
        let ipl = identity(2 * n) + &lm;
        let lu = ipl.lu();
        let x = lu.solve(&u).ok_or(Error::Pole(s))?;
        let r = &x - &u;
        let y = cs.eval(s)? * &x;
        Ok(r.iter().chain(y.iter()).copied().collect())
    };
    let inv = invert(eval, 4 * n, cfg)?;
    let mut xw = vec![vec![0.0; steps]; n];
    let mut xv = vec![vec![0.0; steps]; n];
    for i in 0..n {
        let p = &sc.dgs[i];
        let jw = p.inertia * p.omega_b;
        let b = (p.k1 + damping(i)) / jw;
        let cc = p.k2 / jw;
        let disc = Complex64::new(b * b - 4.0 * cc, 0.0).sqrt();
        let r1 = (-b + disc) / 2.0;
        let r2 = (-b - disc) / 2.0;
        for (j, &t) in trace.t.iter().enumerate() {
            let uw = ((r1 * (r1 * t).exp() - r2 * (r2 * t).exp()) / (r1 - r2)).re * dw[i];
            let uv = dv[i] * (-t / p.sigma_v).exp();
            xw[i][j] = uw + inv[i][j];
            xv[i][j] = uv + inv[n + i][j];
        }
    }
    let yp: Vec<Vec<f64>> = (0..n).map(|i| inv[2 * n + i].clone()).collect();
    let yq: Vec<Vec<f64>> = (0..n).map(|i| inv[3 * n + i].clone()).collect();
    fill(&mut trace, &xw, &xv, &yp, &yq);
    let (conv, settle) = detect_convergence(&trace, 1e-4);
    trace.converged = conv;
    trace.settling_time = settle;
    Ok(trace)
}

/// RMS of the difference over RMS of the deviation from equilibrium, for the
/// ω signals and the V signals separately, over t ≤ `t_max`.
pub fn rms_mismatch(nonlinear: &SimTrace, linear: &SimTrace, eq: &Equilibrium, t_max: f64) -> (f64, f64) {
    let n = eq.v.len();
    let mut acc = [(0.0, 0.0); 2];
    for (k, &t) in linear.t.iter().enumerate() {
        if t > t_max + 1e-9 {
            break;
        }
        let Some(kn) = nonlinear.t.iter().position(|x| (x - t).abs() < 1e-9) else {
            continue;
        };
        for i in 0..n {
            let dw = nonlinear.omega[i][kn] - eq.omega_e;
            acc[0].0 += (nonlinear.omega[i][kn] - linear.omega[i][k]).powi(2);
            acc[0].1 += dw * dw;
            let dv = nonlinear.v[i][kn] - eq.v[i];
            acc[1].0 += (nonlinear.v[i][kn] - linear.v[i][k]).powi(2);
            acc[1].1 += dv * dv;
        }
    }
    let ratio = |(a, b): (f64, f64)| if b > 0.0 { (a / b).sqrt() } else { a.sqrt() };
    (ratio(acc[0]), ratio(acc[1]))
}

/// CSV with columns t, dg_index, omega, V, P, Q (dg_index is 1-based).
pub fn trace_csv(tr: &SimTrace) -> String {
    let mut out = String::from("t,dg_index,omega,V,P,Q\n");
    for k in 0..tr.t.len() {
        for i in 0..tr.omega.len() {
            let _ = writeln!(
                out,
                "{:e},{},{:e},{:e},{:e},{:e}",
                tr.t[k],
                i + 1,
                tr.omega[i][k],
                tr.v[i][k],
                tr.p[i][k],
                tr.q[i][k]
            );
        }
    }
    out
}

/// CSV with columns t, edge, tau; edges written as `to-from`, 1-based.
pub fn latency_csv(tr: &SimTrace) -> String {
    let mut out = String::from("t,edge,tau\n");
    for &(t, e, tau) in &tr.latency_trace {
        let (i, j) = tr.edges[e];
        let _ = writeln!(out, "{t:e},{}-{},{tau:e}", i + 1, j + 1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CommGraph;
    use crate::scenario::baseline;

    fn short(sc: &MicrogridScenario, tau: f64, dist: &Disturbance, dur: f64) -> SimTrace {
        let s = sc.with_uniform_latency(tau);
        let eq = solve_equilibrium(&s).unwrap();
        simulate_from(&s, &eq, &LatencyModel::constant(), dist, dur, &SimConfig::from_scenario(&s)).unwrap()
    }

    #[test]
    fn rest_stays_at_rest() {
        let tr = short(&baseline(), 0.3, &Disturbance::default(), 2.0);
        let eq = solve_equilibrium(&baseline()).unwrap();
        for i in 0..4 {
            for k in 0..tr.t.len() {
                assert!((tr.omega[i][k] - eq.omega_e).abs() < 1e-6);
                assert!((tr.v[i][k] - eq.v[i]).abs() < 1e-6);
            }
        }
        assert!(tr.converged);
        assert_eq!(tr.settling_time, Some(0.0));
    }

    #[test]
    fn detect_convergence_examples() {
        let mut tr = SimTrace::new(1, vec![]);
        tr.t = (0..1000).map(|k| k as f64 * 0.01).collect();
        tr.omega[0] = vec![377.0; 1000];
        tr.v[0] = vec![120.0; 1000];
        assert_eq!(detect_convergence(&tr, 1e-4), (true, Some(0.0)));
        tr.omega[0] = tr.t.iter().map(|t| 377.0 + 0.01 * (0.5 * t).exp() * (3.0 * t).sin()).collect();
        assert!(!detect_convergence(&tr, 1e-4).0);
        tr.omega[0] = tr.t.iter().map(|t| 377.0 + 5.0 * (-t).exp() * (3.0 * t).sin()).collect();
        let (ok, settle) = detect_convergence(&tr, 1e-4);
        assert!(ok && settle.unwrap() > 1.0 && settle.unwrap() < 7.0);
    }

    #[test]
    fn delay_free_leader_step_reaches_consensus() {
        let sc = baseline();
        let d = Disturbance {
            omega_ref_step: 0.2,
            ..Default::default()
        };
        let tr = short(&sc, 0.0, &d, 30.0);
        assert!(tr.converged, "{:?}", tr.divergence_time);
        let last = tr.t.len() - 1;
        let w0 = tr.omega[0][last];
        let kp: Vec<f64> = (0..4).map(|i| sc.dgs[i].k_p * tr.p[i][last]).collect();
        for i in 0..4 {
            assert!((tr.omega[i][last] - w0).abs() < 1e-4);
            assert!((kp[i] - kp[0]).abs() < 0.01 * kp[0].abs());
        }
    }

    #[test]
    fn history_horizon_is_enforced() {
        let s = baseline().with_uniform_latency(1.0);
        let eq = solve_equilibrium(&s).unwrap();
        let mut cfg = SimConfig::from_scenario(&s);
        cfg.history_horizon = Some(0.5);
        let r = simulate_from(&s, &eq, &LatencyModel::constant(), &Disturbance::default(), 1.0, &cfg);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn simulation_is_deterministic() {
        let s = baseline();
        let eq = solve_equilibrium(&s).unwrap();
        let d = Disturbance::relative(&eq, 1e-3);
        let lm = LatencyModel::uniform(0.1, 0.4, 7);
        let cfg = SimConfig::from_scenario(&s);
        let a = simulate_from(&s, &eq, &lm, &d, 3.0, &cfg).unwrap();
        let b = simulate_from(&s, &eq, &lm, &d, 3.0, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(!a.latency_trace.is_empty());
        assert!(a.latency_trace.iter().all(|x| x.2 >= 0.1 && x.2 <= 0.4));
    }

    #[test]
    fn stabilizer_realization_has_unit_dc_gain() {
        let cf = Canon::new(&StabilizerCoeffs::default());
        let (x1, x2) = (1.0 / cf.a0, 0.0);
        assert!((cf.output(x1, x2, 1.0) - 1.0).abs() < 1e-15);
        assert_eq!(cf.deriv(x1, x2, 1.0), (0.0, 0.0));
    }

    #[test]
    fn zero_perturbation_gives_zero_response() {
        let s = baseline().with_uniform_latency(0.3);
        let eq = solve_equilibrium(&s).unwrap();
        let tr = linearized_step_response(&s, &eq, &Disturbance::default(), &InversionConfig::default()).unwrap();
        assert!(tr.omega.iter().flatten().all(|w| *w == eq.omega_e));
    }

    #[test]
    fn single_dg_matches_closed_form() {
        let mut s = baseline();
        s.dgs.truncate(1);
        s.dgs[0].k_q = 0.0;
        s.network.n = 1;
        s.network.lines.clear();
        s.network.loads.clear();
        s.graph = CommGraph::new(1);
        s.graph.leaders[0] = true;
        let eq = solve_equilibrium(&s).unwrap();
        let d = Disturbance {
            omega: vec![0.3],
            voltage: vec![0.5],
            ..Default::default()
        };
        let cfg = InversionConfig {
            t_max: 5.0,
            dt: 0.01,
            terms: 20_000,
        };
        let tr = linearized_step_response(&s, &eq, &d, &cfg).unwrap();
        let p = &s.dgs[0];
        let jw = p.inertia * p.omega_b;
        let b = (p.k1 + p.d_p) / jw;
        let disc = (b * b - 4.0 * p.k2 / jw).sqrt();
        let (r1, r2) = ((-b + disc) / 2.0, (-b - disc) / 2.0);
        let sv = p.sigma_v;
        // σ_v Δ s/(σ_v s² + s + 1): roots of σ_v s² + s + 1
        let dq = Complex64::new(1.0 - 4.0 * sv, 0.0).sqrt();
        let (q1, q2) = ((-1.0 + dq) / (2.0 * sv), (-1.0 - dq) / (2.0 * sv));
        for (k, &t) in tr.t.iter().enumerate().skip(1) {
            let w = 0.3 * (r1 * (r1 * t).exp() - r2 * (r2 * t).exp()) / (r1 - r2);
            let v = (0.5 * (q1 * (q1 * t).exp() - q2 * (q2 * t).exp()) / (q1 - q2)).re;
            assert!((tr.omega[0][k] - eq.omega_e - w).abs() < 1e-4, "t={t}");
            assert!((tr.v[0][k] - eq.v[0] - v).abs() < 1e-4, "t={t}: {} vs {v}", tr.v[0][k] - eq.v[0]);
        }
    }
}
