//! Characteristic loci on the Nyquist contour, encirclement counts, margins
//! and latency thresholds.
//!
//! The contour runs along the positive imaginary axis from a quarter-circle
//! indent of radius ε around s = 0 (bulging into the right half plane) up to
//! `freq_max`; the negative half follows by conjugation and the closing arc
//! contributes only the return of arg det(I + L) from its value at j·freq_max,
//! since every channel of L is strictly proper.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{solve_equilibrium, Equilibrium};
use crate::error::{Error, Result};
use crate::linalg::{assignment, c, det, eigenvalues, identity, wrap};
use crate::model::{AnalysisOptions, MicrogridScenario};
use crate::smallsignal::{return_ratio, TransferMatrixFn};

/// Minimum distance to −1 below which a verdict is reported as marginal.
pub const MARGINAL_BAND: f64 = 1e-3;
const INDENT_POINTS: usize = 32;
const MAX_POINTS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Stable,
    Unstable,
    Marginal,
}

impl Verdict {
    pub fn is_stable(self) -> bool {
        self == Verdict::Stable
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Verdict::Stable => "stable",
            Verdict::Unstable => "unstable",
            Verdict::Marginal => "marginal",
        };
        f.write_str(s)
    }
}

/// Matched eigenvalue branches over the upper half of the contour.
#[derive(Debug, Clone)]
pub struct Loci {
    /// Contour points in traversal order.
    pub s: Vec<Complex64>,
    /// `branches[b][k]` is branch b at `s[k]`.
    pub branches: Vec<Vec<Complex64>>,
    /// det(I + L) at each contour point.
    pub det: Vec<Complex64>,
    /// Number of leading points that lie on the origin indent.
    pub indent_len: usize,
}

impl Loci {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Locus set at −ω: the conjugate of the set at ω.
    pub fn mirrored(&self) -> Vec<Vec<Complex64>> {
        self.branches
            .iter()
            .map(|b| b.iter().map(|z| z.conj()).collect())
            .collect()
    }

    pub fn min_distance_to_critical(&self) -> f64 {
        self.branches
            .iter()
            .flatten()
            .map(|z| (z + 1.0).norm())
            .fold(f64::INFINITY, f64::min)
    }
}

struct Sample {
    s: Complex64,
    ev: Vec<Complex64>,
    det: Complex64,
}

fn evaluate(l: &TransferMatrixFn, s: Complex64) -> Result<Sample> {
    let m = l.eval(s)?;
    let ev = eigenvalues(&m).ok_or(Error::Eigen { omega: s.im })?;
    let d = det(&(identity(m.nrows()) + &m));
    Ok(Sample { s, ev, det: d })
}

fn compress(z: Complex64) -> Complex64 {
    z / (1.0 + z.norm())
}

fn match_sets(prev: &[Complex64], next: &[Complex64]) -> Vec<usize> {
    let cost: Vec<Vec<f64>> = prev
        .iter()
        .map(|a| next.iter().map(|b| (compress(*a) - compress(*b)).norm()).collect())
        .collect();
    assignment(&cost)
}

fn needs_split(a: &Sample, b: &Sample, tol: f64) -> bool {
    let (da, db) = (a.det, b.det);
    if wrap(db.arg() - da.arg()).abs() > PI / 4.0 {
        return true;
    }
    if (db - da).norm() > 0.5 * da.norm().min(db.norm()) {
        return true;
    }
    let m = match_sets(&a.ev, &b.ev);
    a.ev.iter().zip(&m).any(|(x, &j)| {
        let y = b.ev[j];
        if (compress(*x) - compress(y)).norm() > tol {
            return true;
        }
        let near = (x + 1.0).norm().min((y + 1.0).norm());
        (x - y).norm() > 0.5 * near || wrap((y + 1.0).arg() - (x + 1.0).arg()).abs() > PI / 4.0
    })
}

/// Contour parameter: φ ∈ [0, π/2] on the indent, then log10 ω.
fn point(t: f64, eps: f64, on_indent: bool) -> Complex64 {
    if on_indent {
        Complex64::from_polar(eps, t)
    } else {
        c(0.0, 10f64.powf(t))
    }
}

/// Evaluates and matches the characteristic loci with adaptive refinement.
pub fn sweep_loci(l: &TransferMatrixFn, o: &AnalysisOptions) -> Result<Loci> {
    let eps = o.origin_indent_radius;
    let (lo, hi) = (eps.log10(), o.freq_max.log10());
    let decades = hi - lo;
    let n_axis = ((decades * o.points_per_decade as f64).ceil() as usize).max(2);
    let mut params: Vec<(f64, bool)> = (0..=INDENT_POINTS)
        .map(|k| (FRAC_PI_2 * k as f64 / INDENT_POINTS as f64, true))
        .collect();
    params.extend((1..=n_axis).map(|k| (lo + decades * k as f64 / n_axis as f64, false)));

    let mut samples: Vec<(f64, bool, Sample)> = params
        .par_iter()
        .map(|&(t, ind)| evaluate(l, point(t, eps, ind)).map(|s| (t, ind, s)))
        .collect::<Result<_>>()?;
    // settled[k] marks the interval (k, k+1) as already checked and fine
    let mut settled = vec![false; samples.len()];

    loop {
        let verdicts: Vec<Option<(f64, bool)>> = samples
            .par_windows(2)
            .zip(settled.par_iter())
            .map(|(w, &done)| {
                let (ta, ia, a) = (&w[0].0, w[0].1, &w[0].2);
                let (tb, ib, b) = (&w[1].0, w[1].1, &w[1].2);
                // jε appears as both φ = π/2 and the axis start
                if done || ia != ib {
                    return None;
                }
                let width = tb - ta;
                let min_width = if ia { 1e-9 } else { 1e-11 };
                (width > min_width && needs_split(a, b, o.refine_tol)).then(|| (0.5 * (ta + tb), ia))
            })
            .collect();
        let splits: Vec<(usize, (f64, bool))> = verdicts
            .iter()
            .enumerate()
            .filter_map(|(k, v)| v.map(|x| (k, x)))
            .collect();
        if splits.is_empty() || samples.len() + splits.len() > MAX_POINTS {
            break;
        }
        let new: Vec<Sample> = splits
            .par_iter()
            .map(|&(_, (t, ind))| evaluate(l, point(t, eps, ind)))
            .collect::<Result<_>>()?;
        let mut merged = Vec::with_capacity(samples.len() + new.len());
        let mut merged_settled = Vec::with_capacity(samples.len() + new.len());
        let mut new_iter = splits.iter().zip(new).peekable();
        for (k, x) in samples.into_iter().enumerate() {
            merged.push(x);
            match new_iter.peek() {
                Some(((j, _), _)) if *j == k => {
                    let ((_, (t, ind)), smp) = new_iter.next().unwrap();
                    merged_settled.push(false);
                    merged.push((*t, *ind, smp));
                    merged_settled.push(false);
                }
                _ => merged_settled.push(verdicts.get(k).is_some_and(|v| v.is_none())),
            }
        }
        samples = merged;
        settled = merged_settled;
    }

    let indent_len = samples.iter().filter(|x| x.1).count();
    let dim = samples[0].2.ev.len();
    let mut branches: Vec<Vec<Complex64>> = samples[0].2.ev.iter().map(|&z| vec![z]).collect();
    for k in 1..samples.len() {
        let prev: Vec<Complex64> = branches.iter().map(|b| *b.last().unwrap()).collect();
        let next = &samples[k].2.ev;
        let m = match_sets(&prev, next);
        for b in 0..dim {
            branches[b].push(next[m[b]]);
        }
    }
    Ok(Loci {
        s: samples.iter().map(|x| x.2.s).collect(),
        det: samples.iter().map(|x| x.2.det).collect(),
        branches,
        indent_len,
    })
}

fn half_increment(z: &[Complex64]) -> f64 {
    z.windows(2).map(|w| wrap(w[1].arg() - w[0].arg())).sum()
}

fn full_winding(half: f64, end: Complex64) -> i64 {
    ((2.0 * half - 2.0 * wrap(end.arg())) / (2.0 * PI)).round() as i64
}

/// Counter-clockwise encirclements of 0 by det(I + L) on the closed contour.
pub fn det_winding(loci: &Loci) -> i64 {
    full_winding(half_increment(&loci.det), *loci.det.last().unwrap())
}

/// Counter-clockwise encirclements of −1 summed over all characteristic loci.
pub fn loci_winding(loci: &Loci) -> i64 {
    let mut half = 0.0;
    let mut end = 0.0;
    for b in &loci.branches {
        let shifted: Vec<Complex64> = b.iter().map(|z| z + 1.0).collect();
        half += half_increment(&shifted);
        end += wrap(shifted.last().unwrap().arg());
    }
    ((2.0 * half - 2.0 * end) / (2.0 * PI)).round() as i64
}

pub fn winding_number(l: &TransferMatrixFn, o: &AnalysisOptions) -> Result<i64> {
    Ok(det_winding(&sweep_loci(l, o)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    /// Gain margin ratio; infinite when no locus crosses the negative real axis.
    pub gm: f64,
    pub gm_omega: Option<f64>,
    pub gm_branch: Option<usize>,
    /// Phase margin in degrees; infinite when no locus crosses the unit circle.
    pub pm: f64,
    pub pm_omega: Option<f64>,
    pub pm_branch: Option<usize>,
}

/// Bisects on ω for a zero of `g` along the branch that passes through `za`/`zb`.
fn bisect_branch(
    l: &TransferMatrixFn,
    (mut wa, mut za): (f64, Complex64),
    (mut wb, mut zb): (f64, Complex64),
    g: &dyn Fn(Complex64) -> f64,
) -> (f64, Complex64) {
    let ga = g(za);
    for _ in 0..60 {
        if (wb - wa) <= 1e-10 * wb {
            break;
        }
        let wm = (wa * wb).sqrt();
        let guess = za + (zb - za) * ((wm.ln() - wa.ln()) / (wb.ln() - wa.ln()));
        let zm = match l.eval(c(0.0, wm)).ok().and_then(|m| eigenvalues(&m)) {
            Some(ev) => *ev
                .iter()
                .min_by(|a, b| (*a - guess).norm().total_cmp(&(*b - guess).norm()))
                .unwrap(),
            None => break,
        };
        if g(zm).signum() == ga.signum() {
            wa = wm;
            za = zm;
        } else {
            wb = wm;
            zb = zm;
        }
    }
    let t = if (g(zb) - g(za)).abs() > 0.0 {
        g(za) / (g(za) - g(zb))
    } else {
        0.5
    };
    (wa + (wb - wa) * t, za + (zb - za) * t)
}

/// Gain and phase margins over ω ≥ `freq_min`, refined on `l` when given.
///
/// Among all negative-real-axis crossings the one with |λ| closest to 1 (in
/// log scale) sets the GM; among unit-circle crossings the smallest |PM| wins.
/// Crossings are located by interpolation and only those that can still win
/// are refined on `l`.
pub fn margins(loci: &Loci, l: Option<&TransferMatrixFn>, freq_min: f64) -> Margins {
    // (branch, k) of each sample interval that crosses, with its interpolated score
    let mut gm_cand: Vec<(f64, usize, usize)> = Vec::new();
    let mut pm_cand: Vec<(f64, usize, usize)> = Vec::new();
    let lerp = |za: Complex64, zb: Complex64, ga: f64, gb: f64| za + (zb - za) * (ga / (ga - gb));
    let start = loci.indent_len;
    for (bi, br) in loci.branches.iter().enumerate() {
        for k in start..loci.len().saturating_sub(1) {
            if loci.s[k].im < freq_min {
                continue;
            }
            let (za, zb) = (br[k], br[k + 1]);
            if za.im.signum() != zb.im.signum() && (za.re < 0.0 || zb.re < 0.0) {
                let z = lerp(za, zb, za.im, zb.im);
                let score = if z.re < 0.0 { z.norm().ln().abs() } else { f64::INFINITY };
                gm_cand.push((score, bi, k));
            }
            let (ga, gb) = (za.norm() - 1.0, zb.norm() - 1.0);
            if ga.signum() != gb.signum() {
                let z = lerp(za, zb, ga, gb);
                pm_cand.push((wrap(PI + z.arg()).abs(), bi, k));
            }
        }
    }
    // Interpolation error is bounded by the sweep refinement; keep a generous slack.
    let shortlist = |mut c: Vec<(f64, usize, usize)>, slack: f64| {
        c.sort_by(|x, y| x.0.total_cmp(&y.0));
        let best = c.first().map_or(f64::INFINITY, |x| x.0);
        c.into_iter()
            .filter(|x| x.0.is_finite() || !best.is_finite())
            .take_while(|x| x.0 <= best + slack)
            .take(16)
            .collect::<Vec<_>>()
    };
    let refine = |bi: usize, k: usize, g: &dyn Fn(Complex64) -> f64| {
        let (wa, wb) = (loci.s[k].im, loci.s[k + 1].im);
        let (za, zb) = (loci.branches[bi][k], loci.branches[bi][k + 1]);
        match l {
            Some(l) => bisect_branch(l, (wa, za), (wb, zb), g),
            None => {
                let t = g(za) / (g(za) - g(zb));
                (wa + (wb - wa) * t, za + (zb - za) * t)
            }
        }
    };
    let mut out = Margins {
        gm: f64::INFINITY,
        gm_omega: None,
        gm_branch: None,
        pm: f64::INFINITY,
        pm_omega: None,
        pm_branch: None,
    };
    let mut best_gm = f64::INFINITY;
    for (_, bi, k) in shortlist(gm_cand, 0.1) {
        let (w, z) = refine(bi, k, &|z: Complex64| z.im);
        if z.re < 0.0 {
            let score = z.norm().ln().abs();
            if score < best_gm {
                best_gm = score;
                out.gm = 1.0 / z.norm();
                out.gm_omega = Some(w);
                out.gm_branch = Some(bi);
            }
        }
    }
    for (_, bi, k) in shortlist(pm_cand, 0.1) {
        let (w, z) = refine(bi, k, &|z: Complex64| z.norm() - 1.0);
        let pm = wrap(PI + z.arg()).to_degrees();
        if pm.abs() < out.pm.abs() {
            out.pm = pm;
            out.pm_omega = Some(w);
            out.pm_branch = Some(bi);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NyquistAnalysis {
    /// Imaginary part of each contour point (indent points included).
    pub grid: Vec<f64>,
    #[serde(skip)]
    pub loci: Vec<Vec<Complex64>>,
    pub winding: i64,
    pub loci_winding: i64,
    pub gm: f64,
    pub pm: f64,
    pub stable: bool,
    pub verdict: Verdict,
    pub min_distance: f64,
    pub crossovers: Crossovers,
    /// Decay rate (1/s) of the dominant closed-loop root near the GM crossing.
    pub convergence_rate: Option<f64>,
    pub points: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Crossovers {
    pub gm_omega: Option<f64>,
    pub pm_omega: Option<f64>,
}

/// Root of det(I + L(s)) near `s0` by Newton with a numerical derivative.
pub fn closed_loop_root(l: &TransferMatrixFn, s0: Complex64) -> Option<Complex64> {
    let n = l.dim;
    let f = |s: Complex64| l.eval(s).ok().map(|m| det(&(identity(n) + m)));
    let mut s = s0;
    for _ in 0..60 {
        let fs = f(s)?;
        let h = 1e-6 * s.norm().max(1e-3);
        let d = (f(s + h)? - f(s - h)?) / (2.0 * h);
        if d.norm() == 0.0 {
            return None;
        }
        let step = fs / d;
        s -= step;
        if !(s.re.is_finite() && s.im.is_finite()) {
            return None;
        }
        if step.norm() < 1e-10 * s.norm().max(1e-6) {
            return Some(s);
        }
    }
    None
}

/// Full analysis around a known equilibrium.
pub fn analyze(sc: &MicrogridScenario, eq: &Equilibrium) -> Result<NyquistAnalysis> {
    let l = return_ratio(sc, eq)?;
    analyze_return_ratio(&l, &sc.options)
}

pub fn analyze_return_ratio(l: &TransferMatrixFn, o: &AnalysisOptions) -> Result<NyquistAnalysis> {
    let loci = sweep_loci(l, o)?;
    let winding = det_winding(&loci);
    let lw = loci_winding(&loci);
    let m = margins(&loci, Some(l), o.freq_min);
    let min_distance = loci.min_distance_to_critical();
    let verdict = if min_distance < MARGINAL_BAND {
        Verdict::Marginal
    } else if winding == 0 {
        Verdict::Stable
    } else {
        Verdict::Unstable
    };
    let convergence_rate = if verdict == Verdict::Stable {
        m.gm_omega
            .and_then(|w| closed_loop_root(l, c(-0.01 * w, w)))
            .filter(|r| r.re < 0.0)
            .map(|r| -r.re)
    } else {
        None
    };
    Ok(NyquistAnalysis {
        grid: loci.s.iter().map(|s| s.im).collect(),
        points: loci.len(),
        loci: loci.branches,
        winding,
        loci_winding: lw,
        gm: m.gm,
        pm: m.pm,
        stable: verdict == Verdict::Stable,
        verdict,
        min_distance,
        crossovers: Crossovers {
            gm_omega: m.gm_omega,
            pm_omega: m.pm_omega,
        },
        convergence_rate,
    })
}

pub fn assess_stability(sc: &MicrogridScenario) -> Result<NyquistAnalysis> {
    let eq = solve_equilibrium(sc)?;
    analyze(sc, &eq)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub tau: f64,
    pub lo: f64,
    pub hi: f64,
    pub tol: f64,
    pub probes: Vec<(f64, Verdict)>,
    pub checks: Vec<(f64, Verdict)>,
}

/// Verdict of `sc` with every present edge at latency `tau`.
pub fn verdict_at(sc: &MicrogridScenario, eq: &Equilibrium, tau: f64) -> Result<Verdict> {
    Ok(analyze(&sc.with_uniform_latency(tau), eq)?.verdict)
}

/// Bisects the uniform latency at which the verdict flips from stable.
/// Marginal probes count as not stable.
pub fn latency_threshold(sc: &MicrogridScenario, lo: f64, hi: f64, tol: f64) -> Result<ThresholdResult> {
    let eq = solve_equilibrium(sc)?;
    latency_threshold_with(sc, &eq, lo, hi, tol)
}

pub fn latency_threshold_with(
    sc: &MicrogridScenario,
    eq: &Equilibrium,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<ThresholdResult> {
    if !(lo < hi) || !(tol > 0.0) {
        return Err(Error::Bracket {
            lo,
            hi,
            at_lo: "not evaluated".into(),
            at_hi: "degenerate bracket".into(),
        });
    }
    let (vl, vh) = rayon::join(|| verdict_at(sc, eq, lo), || verdict_at(sc, eq, hi));
    let (vl, vh) = (vl?, vh?);
    if !vl.is_stable() || vh.is_stable() {
        return Err(Error::Bracket {
            lo,
            hi,
            at_lo: vl.to_string(),
            at_hi: vh.to_string(),
        });
    }
    let mut probes = vec![(lo, vl), (hi, vh)];
    let (mut a, mut b) = (lo, hi);
    while b - a > tol {
        let m = 0.5 * (a + b);
        let v = verdict_at(sc, eq, m)?;
        probes.push((m, v));
        if v.is_stable() {
            a = m;
        } else {
            b = m;
        }
    }
    let tau = 0.5 * (a + b);
    let interior: Vec<f64> = (1..=5).map(|k| lo + (hi - lo) * k as f64 / 6.0).collect();
    let checks: Vec<(f64, Verdict)> = interior
        .par_iter()
        .filter(|&&t| (t - tau).abs() > tol)
        .map(|&t| verdict_at(sc, eq, t).map(|v| (t, v)))
        .collect::<Result<_>>()?;
    for &(t, v) in &checks {
        if (t < tau) != v.is_stable() {
            return Err(Error::NonMonotonic {
                tau: t,
                verdict: v.to_string(),
                threshold: tau,
            });
        }
    }
    Ok(ThresholdResult {
        tau,
        lo,
        hi,
        tol,
        probes,
        checks,
    })
}

/// CSV with columns omega_rad_s, branch_index, re, im (positive half only).
pub fn loci_csv(a: &NyquistAnalysis) -> String {
    let mut out = String::from("omega_rad_s,branch_index,re,im\n");
    for (b, br) in a.loci.iter().enumerate() {
        for (w, z) in a.grid.iter().zip(br) {
            let _ = writeln!(out, "{w:e},{b},{:e},{:e}", z.re, z.im);
        }
    }
    out
}

pub fn report_json(a: &NyquistAnalysis) -> serde_json::Value {
    let inf = |x: f64| {
        if x.is_finite() {
            serde_json::json!(x)
        } else {
            serde_json::json!("inf")
        }
    };
    serde_json::json!({
        "winding": a.winding,
        "loci_winding": a.loci_winding,
        "gm": inf(a.gm),
        "pm_deg": inf(a.pm),
        "stable": a.stable,
        "verdict": a.verdict,
        "min_distance_to_critical": a.min_distance,
        "crossovers": {
            "gm_omega_rad_s": a.crossovers.gm_omega,
            "pm_omega_rad_s": a.crossovers.pm_omega,
        },
        "convergence_rate_per_s": a.convergence_rate,
        "grid": {
            "points": a.points,
            "omega_min_rad_s": a.grid.first(),
            "omega_max_rad_s": a.grid.last(),
        },
    })
}
