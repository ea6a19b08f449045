//! Steady-state operating point of the droop/consensus controlled network.
//!
//! At rest every ω_i equals a common ω_e and the consensus integrators are
//! stationary. With u = k_p·P and g = V + k_q·Q, the stationarity conditions are
//!
//! - frequency: θ_i/(d_i+θ_i)·(ω_ref − ω_e) − (L u)_i = 0
//! - voltage:   Σ_j a_ij g_j − d_i g_i + θ_i (V_ref − V_i) = 0
//!
//! with (P, Q) given by the network at angles δ (slack fixed at 0) and
//! magnitudes V. The unknown offset Δ = ω_ref − ω_e closes the square system.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::graph::laplacian;
use crate::model::MicrogridScenario;
use crate::network::{assemble_bus_admittance, phasors, power_injections};
use crate::optim::{differential_evolution, newton, DeConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub omega_e: f64,
    pub v: Vec<f64>,
    pub delta: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub v_d: Vec<f64>,
    pub v_q: Vec<f64>,
    pub i_d: Vec<f64>,
    pub i_q: Vec<f64>,
    pub residual: f64,
}

/// Relative search box around V_ref for voltages; angles within ±π/2.
#[derive(Debug, Clone, Copy)]
pub struct SearchBox {
    pub v_lo: f64,
    pub v_hi: f64,
    pub delta_max: f64,
}

impl Default for SearchBox {
    fn default() -> Self {
        Self {
            v_lo: 0.5,
            v_hi: 1.5,
            delta_max: FRAC_PI_2,
        }
    }
}

struct Problem<'a> {
    s: &'a MicrogridScenario,
    y: DMatrix<Complex64>,
    lap: DMatrix<f64>,
    w: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(s: &'a MicrogridScenario) -> Result<Self> {
        let g = &s.graph;
        let w = (0..s.n())
            .map(|i| g.theta(i) / (g.in_degree(i) as f64 + g.theta(i)))
            .collect();
        Ok(Self {
            s,
            y: assemble_bus_admittance(&s.network)?,
            lap: laplacian(g),
            w,
        })
    }

    fn n(&self) -> usize {
        self.s.n()
    }

    /// Candidate layout: free angles (slack skipped) then voltages.
    fn unpack(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n();
        let slack = self.s.network.slack_bus;
        let mut delta = vec![0.0; n];
        let mut k = 0;
        for (i, d) in delta.iter_mut().enumerate() {
            if i != slack {
                *d = z[k];
                k += 1;
            }
        }
        (delta, z[n - 1..2 * n - 1].to_vec())
    }

    fn pq(&self, v: &[f64], delta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        power_injections(&self.y, &phasors(v, delta))
    }

    /// Frequency rows without the Δ term, and voltage rows.
    fn rows(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n();
        let (delta, v) = self.unpack(z);
        let (p, q) = self.pq(&v, &delta);
        let g = &self.s.graph;
        let u: Vec<f64> = (0..n).map(|i| self.s.dgs[i].k_p * p[i]).collect();
        let lu = &self.lap * nalgebra::DVector::from_vec(u);
        let gv: Vec<f64> = (0..n).map(|i| v[i] + self.s.dgs[i].k_q * q[i]).collect();
        let v_ref = self.s.options.reference_voltage;
        let freq = (0..n).map(|i| -lu[i]).collect();
        let volt = (0..n)
            .map(|i| {
                let nb: f64 = (0..n).map(|j| g.a(i, j) * gv[j]).sum();
                nb - g.in_degree(i) as f64 * gv[i] + g.theta(i) * (v_ref - v[i])
            })
            .collect();
        (freq, volt)
    }

    /// Least-squares Δ for given frequency rows.
    fn best_offset(&self, freq: &[f64]) -> f64 {
        let ww: f64 = self.w.iter().map(|w| w * w).sum();
        if ww == 0.0 {
            return 0.0;
        }
        -self.w.iter().zip(freq).map(|(w, f)| w * f).sum::<f64>() / ww
    }

    fn residual_norm(&self, z: &[f64]) -> (f64, f64) {
        let (freq, volt) = self.rows(z);
        let d = self.best_offset(&freq);
        let r: f64 = freq
            .iter()
            .zip(&self.w)
            .map(|(f, w)| (f + w * d).powi(2))
            .chain(volt.iter().map(|x| x * x))
            .sum();
        (r.sqrt(), d)
    }

    fn square(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let (freq, volt) = self.rows(&x[..2 * n - 1]);
        let d = x[2 * n - 1];
        freq.iter()
            .zip(&self.w)
            .map(|(f, w)| f + w * d)
            .chain(volt)
            .collect()
    }

    fn in_box(&self, z: &[f64], bx: &SearchBox) -> bool {
        let n = self.n();
        let v_ref = self.s.options.reference_voltage;
        z[..n - 1].iter().all(|d| d.abs() <= bx.delta_max)
            && z[n - 1..2 * n - 1]
                .iter()
                .all(|v| *v >= bx.v_lo * v_ref && *v <= bx.v_hi * v_ref)
    }

    fn polish(&self, z0: &[f64], tol: f64, bx: &SearchBox) -> Option<Vec<f64>> {
        let (_, d0) = self.residual_norm(z0);
        let mut x0 = z0.to_vec();
        x0.push(d0);
        let r = newton(|x| self.square(x), &x0, tol, 100);
        let z = &r.x[..2 * self.n() - 1];
        (r.converged && self.in_box(z, bx)).then(|| z.to_vec())
    }

    fn finish(&self, z: &[f64]) -> Equilibrium {
        let n = self.n();
        let (delta, v) = self.unpack(z);
        let (res, d) = self.residual_norm(z);
        let vc = phasors(&v, &delta);
        let i = &self.y * &vc;
        let (p, q) = power_injections(&self.y, &vc);
        Equilibrium {
            omega_e: self.s.options.reference_omega - d,
            v_d: (0..n).map(|k| vc[k].re).collect(),
            v_q: (0..n).map(|k| vc[k].im).collect(),
            i_d: (0..n).map(|k| i[k].re).collect(),
            i_q: (0..n).map(|k| i[k].im).collect(),
            v,
            delta,
            p,
            q,
            residual: res,
        }
    }

    fn pack(&self, eq: &Equilibrium) -> Vec<f64> {
        let slack = self.s.network.slack_bus;
        let mut z: Vec<f64> = (0..self.n())
            .filter(|&i| i != slack)
            .map(|i| eq.delta[i] - eq.delta[slack])
            .collect();
        z.extend_from_slice(&eq.v);
        z
    }
}

/// Residual norm at a candidate `[δ (slack omitted)…, V…]`, with ω_e optimal.
pub fn equilibrium_residual(candidate: &[f64], s: &MicrogridScenario) -> Result<f64> {
    let p = Problem::new(s)?;
    if candidate.len() != 2 * s.n() - 1 {
        return Err(Error::Config(format!(
            "candidate has {} entries, expected {}",
            candidate.len(),
            2 * s.n() - 1
        )));
    }
    Ok(p.residual_norm(candidate).0)
}

pub fn solve_equilibrium(s: &MicrogridScenario) -> Result<Equilibrium> {
    solve_equilibrium_with(s, None, &SearchBox::default())
}

/// Like [`solve_equilibrium`], trying Newton from `guess` before the global search.
pub fn solve_equilibrium_with(
    s: &MicrogridScenario,
    guess: Option<&Equilibrium>,
    bx: &SearchBox,
) -> Result<Equilibrium> {
    let prob = Problem::new(s)?;
    let n = s.n();
    let tol = s.options.equilibrium_tol;
    if let Some(g) = guess.filter(|g| g.v.len() == n) {
        if let Some(z) = prob.polish(&prob.pack(g), tol, bx) {
            return Ok(prob.finish(&z));
        }
    }
    let v_ref = s.options.reference_voltage;
    let mut lower = vec![-bx.delta_max; n - 1];
    let mut upper = vec![bx.delta_max; n - 1];
    lower.extend(std::iter::repeat_n(bx.v_lo * v_ref, n));
    upper.extend(std::iter::repeat_n(bx.v_hi * v_ref, n));
    let cfg = DeConfig {
        population: 20 * n,
        max_generations: 2000,
        mutation: 0.7,
        crossover: 0.9,
        seed: s.options.rng_seed,
        target: tol,
    };
    let mut found: Option<Vec<f64>> = None;
    let de = differential_evolution(
        |z| prob.residual_norm(z).0,
        &lower,
        &upper,
        &cfg,
        25,
        |z, _| {
            found = prob.polish(z, tol, bx);
            found.is_some()
        },
    );
    let z = match found {
        Some(z) => z,
        None => {
            if de.f <= tol {
                de.x.clone()
            } else {
                prob.polish(&de.x, tol, bx).ok_or(Error::NoConvergence {
                    best_residual: de.f,
                })?
            }
        }
    };
    let eq = prob.finish(&z);
    if eq.residual > tol {
        return Err(Error::NoConvergence {
            best_residual: eq.residual,
        });
    }
    Ok(eq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CommGraph;
    use crate::scenario::baseline;

    fn no_load(mut s: MicrogridScenario) -> MicrogridScenario {
        s.network.loads.clear();
        s
    }

    #[test]
    fn zero_load_is_flat() {
        let s = no_load(baseline());
        assert!(equilibrium_residual(&[0.0, 0.0, 0.0, 120.0, 120.0, 120.0, 120.0], &s).unwrap() < 1e-9);
        let eq = solve_equilibrium(&s).unwrap();
        for i in 0..4 {
            assert!((eq.v[i] - 120.0).abs() < 1e-6);
            assert!(eq.delta[i].abs() < 1e-8);
            assert!(eq.p[i].abs() < 1e-3 && eq.q[i].abs() < 1e-3);
        }
    }

    #[test]
    fn baseline_shares_power() {
        let s = baseline();
        let eq = solve_equilibrium(&s).unwrap();
        assert!(eq.residual <= 1e-6);
        assert_eq!(eq.delta[0], 0.0);
        let kp: Vec<f64> = (0..4).map(|i| s.dgs[i].k_p * eq.p[i]).collect();
        for i in 1..4 {
            assert!((kp[i] - kp[0]).abs() < 1e-6 * kp[0].abs().max(1.0), "{kp:?}");
        }
        let total: f64 = eq.p.iter().sum();
        assert!(total > 53_000.0 && total < 60_000.0);
    }

    #[test]
    fn random_candidate_is_not_stationary() {
        let r = equilibrium_residual(&[0.1, -0.2, 0.05, 110.0, 125.0, 118.0, 130.0], &baseline()).unwrap();
        assert!(r > 1e-3);
    }

    #[test]
    fn symmetric_two_bus() {
        let mut s = baseline();
        s.dgs.truncate(2);
        s.dgs[1] = s.dgs[0].clone();
        s.network.n = 2;
        s.network.lines.truncate(1);
        s.network.loads = vec![
            crate::model::Load { bus: 0, p: 5000.0, q: 1000.0 },
            crate::model::Load { bus: 1, p: 5000.0, q: 1000.0 },
        ];
        s.graph = CommGraph::full_mesh(vec![true, true]);
        let eq = solve_equilibrium(&s).unwrap();
        assert!((eq.v[0] - eq.v[1]).abs() < 1e-6);
        assert!(eq.delta[1].abs() < 1e-8);
        assert!(equilibrium_residual(&[0.0, eq.v[0], eq.v[0]], &s).unwrap() < 1e-6);
    }

    #[test]
    fn impossible_load_fails() {
        let mut s = baseline();
        for l in &mut s.network.loads {
            l.p *= 1000.0;
            l.q *= 1000.0;
        }
        match solve_equilibrium(&s) {
            Err(Error::NoConvergence { best_residual }) => assert!(best_residual > 0.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn self_consistent_and_deterministic() {
        let s = baseline();
        let a = solve_equilibrium(&s).unwrap();
        let b = solve_equilibrium(&s).unwrap();
        assert_eq!(a, b);
        for i in 0..4 {
            assert!((a.v_d[i].powi(2) + a.v_q[i].powi(2) - a.v[i].powi(2)).abs() < 1e-6);
            let p = 3.0 * (a.v_d[i] * a.i_d[i] + a.v_q[i] * a.i_q[i]);
            let q = 3.0 * (a.v_q[i] * a.i_d[i] - a.v_d[i] * a.i_q[i]);
            assert!((p - a.p[i]).abs() <= 10.0 * s.options.equilibrium_tol * a.p[i].abs().max(1.0));
            assert!((q - a.q[i]).abs() <= 10.0 * s.options.equilibrium_tol * a.q[i].abs().max(1.0));
        }
    }

    #[test]
    fn slack_rotation_leaves_residual() {
        let s = baseline();
        let eq = solve_equilibrium(&s).unwrap();
        let prob = Problem::new(&s).unwrap();
        let mut rotated = eq.clone();
        for d in &mut rotated.delta {
            *d += 0.3;
        }
        let z = prob.pack(&rotated);
        assert!((equilibrium_residual(&z, &s).unwrap() - eq.residual).abs() < 1e-9);
    }
}
