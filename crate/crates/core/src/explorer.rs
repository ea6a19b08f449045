//! Parameter sweeps, the inertia/damping stability surface and the
//! communication topology search.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{solve_equilibrium, solve_equilibrium_with, Equilibrium, SearchBox};
use crate::error::{Error, Result};
use crate::graph::has_spanning_tree_from_leaders;
use crate::model::{validate, MicrogridScenario};
use crate::nyquist::{analyze, Verdict};

const DG_FIELDS: &[&str] = &[
    "k_p",
    "k_q",
    "inertia",
    "omega_b",
    "d_p",
    "damping_torque",
    "k1",
    "k2",
    "sigma",
    "sigma_v",
];

fn bad_path(path: &str, why: &str) -> Error {
    Error::Config(format!("parameter path `{path}`: {why}"))
}

fn index(path: &str, text: &str, len: usize) -> Result<usize> {
    let k: usize = text
        .parse()
        .map_err(|_| bad_path(path, "expected a 1-based index"))?;
    if k == 0 || k > len {
        return Err(bad_path(path, &format!("index {k} out of range 1..={len}")));
    }
    Ok(k - 1)
}

/// Sets one scalar addressed by a dotted path (SI units, 1-based indices):
/// `dg.N.field`, `dg.*.field`, `load.BUS.p|q`, `line.N.r|x`, `graph.latency`,
/// `graph.latency.TO.FROM`, `network.v_nom`, `options.NAME`,
/// `stabilizer.numerator.K`, `stabilizer.denominator.K`.
pub fn set_parameter(s: &mut MicrogridScenario, path: &str, v: f64) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let n = s.n();
    match parts.as_slice() {
        ["dg", who, field] => {
            if !DG_FIELDS.contains(field) {
                return Err(bad_path(path, &format!("unknown DG field `{field}`")));
            }
            let targets: Vec<usize> = if *who == "*" {
                (0..n).collect()
            } else {
                vec![index(path, who, n)?]
            };
            for i in targets {
                let d = &mut s.dgs[i];
                match *field {
                    "k_p" => d.k_p = v,
                    "k_q" => d.k_q = v,
                    "inertia" => d.inertia = v,
                    "omega_b" => d.omega_b = v,
                    "d_p" => d.d_p = v,
                    "damping_torque" => d.d_p = v * d.omega_b,
                    "k1" => d.k1 = v,
                    "k2" => d.k2 = v,
                    "sigma" => d.sigma = v,
                    _ => d.sigma_v = v,
                }
            }
        }
        ["load", bus, which] => {
            let b = index(path, bus, s.network.n)?;
            let (p, q) = s.network.load_at(b);
            match *which {
                "p" => s.network.set_load(b, v, q),
                "q" => s.network.set_load(b, p, v),
                _ => return Err(bad_path(path, "load field must be p or q")),
            }
        }
        ["line", k, which] => {
            let k = index(path, k, s.network.lines.len())?;
            match *which {
                "r" => s.network.lines[k].r = v,
                "x" => s.network.lines[k].x = v,
                _ => return Err(bad_path(path, "line field must be r or x")),
            }
        }
        ["graph", "latency"] => s.graph.set_uniform_latency(v),
        ["graph", "latency", to, from] => {
            let (i, j) = (index(path, to, n)?, index(path, from, n)?);
            if !s.graph.adjacency[i][j] {
                return Err(bad_path(path, "no such edge"));
            }
            s.graph.latency[i][j] = v;
        }
        ["network", "v_nom"] => s.network.v_nom = v,
        ["options", name] => {
            let o = &mut s.options;
            match *name {
                "freq_min" => o.freq_min = v,
                "freq_max" => o.freq_max = v,
                "points_per_decade" => o.points_per_decade = v as usize,
                "refine_tol" => o.refine_tol = v,
                "origin_indent_radius" => o.origin_indent_radius = v,
                "sim_step" => o.sim_step = v,
                "sim_duration" => o.sim_duration = v,
                "rng_seed" => o.rng_seed = v as u64,
                "equilibrium_tol" => o.equilibrium_tol = v,
                "reference_omega" => o.reference_omega = v,
                "reference_voltage" => o.reference_voltage = v,
                _ => return Err(bad_path(path, &format!("unknown option `{name}`"))),
            }
        }
        ["stabilizer", which, k] => {
            let k = index(path, k, 3)?;
            match *which {
                "numerator" => s.stabilizer.numerator[k] = v,
                "denominator" => s.stabilizer.denominator[k] = v,
                _ => return Err(bad_path(path, "expected numerator or denominator")),
            }
        }
        _ => return Err(bad_path(path, "unrecognized")),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub gm: f64,
    pub pm: f64,
    pub stable: bool,
    pub verdict: Option<Verdict>,
    /// Why this point has no result, if it failed.
    pub error: Option<String>,
}

impl SweepPoint {
    fn failed(value: f64, e: impl ToString) -> Self {
        Self {
            value,
            gm: f64::NAN,
            pm: f64::NAN,
            stable: false,
            verdict: None,
            error: Some(e.to_string()),
        }
    }
}

/// Margins and verdict at each value of `path`, re-solving the equilibrium per
/// point (warm-started from the previous one). Failed points are recorded.
pub fn sweep_parameter(s: &MicrogridScenario, path: &str, values: &[f64]) -> Result<Vec<SweepPoint>> {
    // Surface a bad path before the sweep starts.
    set_parameter(&mut s.clone(), path, values.first().copied().unwrap_or(0.0))?;
    let mut prev: Option<Equilibrium> = None;
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        let mut sc = s.clone();
        set_parameter(&mut sc, path, v)?;
        let violations = validate(&sc);
        if !violations.is_empty() {
            out.push(SweepPoint::failed(v, Error::Invalid(violations)));
            continue;
        }
        let eq = match solve_equilibrium_with(&sc, prev.as_ref(), &SearchBox::default()) {
            Ok(eq) => eq,
            Err(e) => {
                out.push(SweepPoint::failed(v, e));
                continue;
            }
        };
        match analyze(&sc, &eq) {
            Ok(a) => out.push(SweepPoint {
                value: v,
                gm: a.gm,
                pm: a.pm,
                stable: a.stable,
                verdict: Some(a.verdict),
                error: None,
            }),
            Err(e) => out.push(SweepPoint::failed(v, e)),
        }
        prev = Some(eq);
    }
    Ok(out)
}

/// CSV with columns value, gm, pm, stable, error.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("value,gm,pm,stable,error\n");
    for p in points {
        let _ = writeln!(
            out,
            "{:e},{:e},{:e},{},{}",
            p.value,
            p.gm,
            p.pm,
            p.stable,
            p.error.as_deref().unwrap_or("").replace(',', ";")
        );
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilitySurface {
    pub inertia: Vec<f64>,
    pub d_p: Vec<f64>,
    pub tau: f64,
    /// `verdicts[j][k]` at inertia[j], d_p[k]; `None` if the cell failed.
    pub verdicts: Vec<Vec<Option<Verdict>>>,
    pub gm: Vec<Vec<f64>>,
    /// Per inertia column, the smallest D_p above which every cell is stable.
    pub boundary: Vec<Option<f64>>,
}

impl StabilitySurface {
    /// True when a larger inertia never needs less damping.
    pub fn boundary_is_monotone(&self) -> bool {
        let b: Vec<f64> = self.boundary.iter().map(|b| b.unwrap_or(f64::INFINITY)).collect();
        b.windows(2).all(|w| w[1] >= w[0])
    }
}

/// Verdicts over the (J, D_p) grid with every DG set to the same J and D_p and
/// every present edge at latency `tau`.
pub fn stability_surface(
    s: &MicrogridScenario,
    inertia: &[f64],
    d_p: &[f64],
    tau: f64,
) -> Result<StabilitySurface> {
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    if inertia.is_empty() || d_p.is_empty() || !finite(inertia) || !finite(d_p) {
        return Err(Error::Config("surface axes must be non-empty and finite".into()));
    }
    let base = s.with_uniform_latency(tau);
    let eq0 = solve_equilibrium(&base)?;
    let cells: Vec<(usize, usize)> = (0..inertia.len())
        .flat_map(|j| (0..d_p.len()).map(move |k| (j, k)))
        .collect();
    let results: Vec<(Option<Verdict>, f64)> = cells
        .par_iter()
        .map(|&(j, k)| {
            let mut sc = base.clone();
            for d in &mut sc.dgs {
                d.inertia = inertia[j];
                d.d_p = d_p[k];
            }
            solve_equilibrium_with(&sc, Some(&eq0), &SearchBox::default())
                .and_then(|eq| analyze(&sc, &eq))
                .map(|a| (Some(a.verdict), if a.stable { a.gm } else { 0.0 }))
                .unwrap_or((None, f64::NAN))
        })
        .collect();
    let mut verdicts = vec![vec![None; d_p.len()]; inertia.len()];
    let mut gm = vec![vec![f64::NAN; d_p.len()]; inertia.len()];
    for (&(j, k), (v, g)) in cells.iter().zip(results) {
        verdicts[j][k] = v;
        gm[j][k] = g;
    }
    let mut order: Vec<usize> = (0..d_p.len()).collect();
    order.sort_by(|&a, &b| d_p[a].total_cmp(&d_p[b]));
    let boundary = verdicts
        .iter()
        .map(|col| {
            let mut edge = None;
            for &k in order.iter().rev() {
                if col[k] == Some(Verdict::Stable) {
                    edge = Some(d_p[k]);
                } else {
                    break;
                }
            }
            edge
        })
        .collect();
    Ok(StabilitySurface {
        inertia: inertia.to_vec(),
        d_p: d_p.to_vec(),
        tau,
        verdicts,
        gm,
        boundary,
    })
}

/// Largest network size the exhaustive topology search accepts.
pub const MAX_EXHAUSTIVE_NODES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyCandidate {
    /// Bit k set when the k-th off-diagonal entry (row-major) is an edge.
    pub mask: u64,
    pub edges: usize,
    /// Gain margin; 0 when the candidate is unstable or lacks a spanning tree.
    pub gm: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyResult {
    pub tau: f64,
    pub best: TopologyCandidate,
    pub adjacency: Vec<Vec<bool>>,
    /// All evaluated candidates, best first.
    pub ranked: Vec<TopologyCandidate>,
}

fn off_diagonal(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

pub fn mask_to_adjacency(mask: u64, n: usize) -> Vec<Vec<bool>> {
    let mut a = vec![vec![false; n]; n];
    for (k, (i, j)) in off_diagonal(n).into_iter().enumerate() {
        a[i][j] = mask >> k & 1 == 1;
    }
    a
}

pub fn adjacency_to_mask(a: &[Vec<bool>]) -> u64 {
    off_diagonal(a.len())
        .into_iter()
        .enumerate()
        .filter(|&(_, (i, j))| a[i][j])
        .fold(0, |m, (k, _)| m | 1 << k)
}

/// Σ_j a_ij + θ_i > 0 for every node.
fn degree_feasible(a: &[Vec<bool>], leaders: &[bool]) -> bool {
    a.iter().zip(leaders).all(|(row, &l)| l || row.iter().any(|&x| x))
}

/// Row-major adjacency, as compared lexicographically (true after false).
fn lex_key(a: &[Vec<bool>]) -> Vec<bool> {
    a.iter().flatten().copied().collect()
}

fn rank(c: &mut [TopologyCandidate], n: usize) {
    c.sort_by(|x, y| {
        y.gm.total_cmp(&x.gm)
            .then(x.edges.cmp(&y.edges))
            .then_with(|| lex_key(&mask_to_adjacency(x.mask, n)).cmp(&lex_key(&mask_to_adjacency(y.mask, n))))
    });
}

fn evaluate(s: &MicrogridScenario, eq: &Equilibrium, adjacency: Vec<Vec<bool>>, tau: f64) -> TopologyCandidate {
    let n = s.n();
    let mask = adjacency_to_mask(&adjacency);
    let edges = adjacency.iter().flatten().filter(|&&x| x).count();
    let mut sc = s.clone();
    sc.graph.adjacency = adjacency;
    sc.graph.latency = vec![vec![0.0; n]; n];
    sc.graph.set_uniform_latency(tau);
    let a = has_spanning_tree_from_leaders(&sc.graph)
        .then(|| analyze(&sc, eq).ok())
        .flatten()
        .filter(|a| a.stable);
    TopologyCandidate {
        mask,
        edges,
        gm: a.as_ref().map_or(0.0, |a| a.gm),
        stable: a.is_some(),
    }
}

/// Contour resolution used to screen topology candidates.
const SCREEN_PPD: usize = 16;
const SCREEN_REFINE_TOL: f64 = 0.2;
/// Candidates re-evaluated at full resolution after screening.
const RESCORE_TOP: usize = 12;

/// Exhaustive search over every degree-feasible adjacency with the scenario's
/// leader set, maximizing GM at uniform latency `tau`. Candidates are screened
/// on a coarser contour; the leaders are then re-scored at full resolution.
pub fn optimize_topology(s: &MicrogridScenario, tau: f64) -> Result<TopologyResult> {
    let n = s.n();
    if n > MAX_EXHAUSTIVE_NODES {
        return Err(Error::TooManyNodes(n));
    }
    let eq = solve_equilibrium(s)?;
    let bits = n * (n - 1);
    let masks: Vec<u64> = (0..1u64 << bits)
        .filter(|&m| degree_feasible(&mask_to_adjacency(m, n), &s.graph.leaders))
        .collect();
    let mut coarse = s.clone();
    coarse.options.points_per_decade = coarse.options.points_per_decade.min(SCREEN_PPD);
    coarse.options.refine_tol = coarse.options.refine_tol.max(SCREEN_REFINE_TOL);
    let mut ranked: Vec<TopologyCandidate> = masks
        .par_iter()
        .map(|&m| evaluate(&coarse, &eq, mask_to_adjacency(m, n), tau))
        .collect();
    rank(&mut ranked, n);
    let top = ranked.len().min(RESCORE_TOP);
    let rescored: Vec<TopologyCandidate> = ranked[..top]
        .par_iter()
        .map(|c| evaluate(s, &eq, mask_to_adjacency(c.mask, n), tau))
        .collect();
    ranked.splice(..top, rescored);
    rank(&mut ranked, n);
    finish(tau, ranked, n)
}

/// Greedy edge removal from the full mesh: repeatedly drop the edge whose
/// removal raises GM the most, until no removal helps.
pub fn optimize_topology_greedy(s: &MicrogridScenario, tau: f64) -> Result<TopologyResult> {
    let n = s.n();
    let eq = solve_equilibrium(s)?;
    let mut current = evaluate(s, &eq, vec![vec![true; n]; n].iter().enumerate().map(|(i, r)| {
        let mut r = r.clone();
        r[i] = false;
        r
    }).collect(), tau);
    let mut seen = vec![current.clone()];
    loop {
        let a = mask_to_adjacency(current.mask, n);
        let mut next: Vec<TopologyCandidate> = off_diagonal(n)
            .into_par_iter()
            .filter(|&(i, j)| a[i][j])
            .filter_map(|(i, j)| {
                let mut b = a.clone();
                b[i][j] = false;
                degree_feasible(&b, &s.graph.leaders).then(|| evaluate(s, &eq, b, tau))
            })
            .collect();
        rank(&mut next, n);
        seen.extend(next.iter().cloned());
        match next.into_iter().next() {
            Some(c) if c.gm > current.gm => current = c,
            _ => break,
        }
    }
    rank(&mut seen, n);
    seen.dedup_by_key(|c| c.mask);
    finish(tau, seen, n)
}

fn finish(tau: f64, ranked: Vec<TopologyCandidate>, n: usize) -> Result<TopologyResult> {
    let best = ranked
        .first()
        .cloned()
        .ok_or_else(|| Error::Config("no feasible topology".into()))?;
    Ok(TopologyResult {
        tau,
        adjacency: mask_to_adjacency(best.mask, n),
        best,
        ranked,
    })
}

/// JSON array of {mask, edges, gm, stable}.
pub fn topology_json(r: &TopologyResult) -> serde_json::Value {
    serde_json::to_value(&r.ranked).unwrap_or_default()
}
