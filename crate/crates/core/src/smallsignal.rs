//! Frequency-domain small-signal model: A_s, B_s, C_s and L(s) = −(A_s + B_s C_s)/s.
//!
//! State x = [Δω…, ΔV…], output y = [ΔP…, ΔQ…] and s·x = A_s x + B_s y, y = C_s x.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, Matrix2};
use num_complex::Complex64;

use crate::equilibrium::Equilibrium;
use crate::error::{Error, Result};
use crate::graph::delayed_adjacency;
use crate::linalg::{c, CMatrix};
use crate::model::{
    Assembly, DampingTerm, DgParams, ElectricalNetwork, MicrogridScenario, StabilizerCoeffs,
    StateLabeling,
};
use crate::network::{assemble_bus_admittance, dq_decompose};

type EvalFn = dyn Fn(Complex64) -> Result<CMatrix> + Send + Sync;

/// A square matrix-valued function of complex frequency.
#[derive(Clone)]
pub struct TransferMatrixFn {
    pub dim: usize,
    pub label: String,
    f: Arc<EvalFn>,
}

impl TransferMatrixFn {
    pub fn new(
        dim: usize,
        label: impl Into<String>,
        f: impl Fn(Complex64) -> Result<CMatrix> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            label: label.into(),
            f: Arc::new(f),
        }
    }

    pub fn eval(&self, s: Complex64) -> Result<CMatrix> {
        let m = (self.f)(s)?;
        if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Pole(s));
        }
        Ok(m)
    }
}

impl fmt::Debug for TransferMatrixFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TransferMatrixFn({}, {}x{})", self.label, self.dim, self.dim)
    }
}

/// (T_ω, T_p) of the VSG swing loop with the configured damping coefficient.
pub fn dg_frequency_tf_with(p: &DgParams, s: Complex64, term: DampingTerm) -> (Complex64, Complex64) {
    let damping = match term {
        DampingTerm::Dp => p.d_p,
        DampingTerm::D => p.damping_torque(),
    };
    let den = p.inertia * p.omega_b * s * s + (p.k1 + damping) * s + p.k2;
    ((p.k1 * s + p.k2) / den, s / den)
}

pub fn dg_frequency_tf(p: &DgParams, s: Complex64) -> (Complex64, Complex64) {
    dg_frequency_tf_with(p, s, DampingTerm::Dp)
}

pub fn dg_voltage_tf(p: &DgParams, s: Complex64) -> Result<Complex64> {
    let den = p.sigma_v * s + 1.0;
    if den == c(0.0, 0.0) {
        return Err(Error::Pole(s));
    }
    Ok(den.inv())
}

pub fn stabilizer_tf(f: &StabilizerCoeffs, s: Complex64) -> Result<Complex64> {
    let [n2, n1, n0] = f.numerator;
    let [d2, d1, d0] = f.denominator;
    let den = d2 * s * s + d1 * s + d0;
    if den.norm() == 0.0 {
        return Err(Error::Pole(s));
    }
    Ok((n2 * s * s + n1 * s + n0) / den)
}

/// Per-DG dq projection quantities around the equilibrium voltage.
#[derive(Debug, Clone, PartialEq)]
pub struct DqProjection {
    pub v_d: f64,
    pub v_q: f64,
    pub m_de: f64,
    pub m_qe: f64,
    pub n_de: f64,
    pub n_qe: f64,
    pub d_e: f64,
    /// (1/D_e)·[[n_qe, −m_qe], [−n_de, m_de]] as printed.
    pub m_e: Matrix2<f64>,
}

impl DqProjection {
    pub fn new(v_d: f64, v_q: f64) -> Self {
        let v2 = v_d * v_d + v_q * v_q;
        let v = v2.sqrt();
        let m_de = v_q / v2;
        let m_qe = v_d / v2;
        let n_de = v_d / v;
        let n_qe = v_q / v;
        let d_e = m_de * n_qe - n_de * m_qe;
        let m_e = Matrix2::new(n_qe, -m_qe, -n_de, m_de) / d_e;
        Self {
            v_d,
            v_q,
            m_de,
            m_qe,
            n_de,
            n_qe,
            d_e,
            m_e,
        }
    }

    /// ∂(v_d, v_q)/∂(δ, V): the map the dq state actually follows.
    pub fn jacobian(&self) -> Matrix2<f64> {
        let v = self.v_d.hypot(self.v_q);
        Matrix2::new(-self.v_q, self.v_d / v, self.v_d, self.v_q / v)
    }
}

pub fn build_dq_projection(eq: &Equilibrium) -> Result<Vec<DqProjection>> {
    (0..eq.v_d.len())
        .map(|i| {
            if eq.v_d[i] == 0.0 && eq.v_q[i] == 0.0 {
                Err(Error::ZeroVoltage { bus: i + 1 })
            } else {
                Ok(DqProjection::new(eq.v_d[i], eq.v_q[i]))
            }
        })
        .collect()
}

/// Real 2n×2n gain Tᵀ·3(i_dqe + v_dqe·Y_s)·M·T, so that C_s = Σ(s)·K·E(s).
pub fn cs_gain(
    eq: &Equilibrium,
    network: &ElectricalNetwork,
    assembly: Assembly,
) -> Result<DMatrix<f64>> {
    let n = eq.v.len();
    let proj = build_dq_projection(eq)?;
    let ys = dq_decompose(&assemble_bus_admittance(network)?).assembled;
    let mut idq = DMatrix::zeros(2 * n, 2 * n);
    let mut vdq = DMatrix::zeros(2 * n, 2 * n);
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        let (id, iq, vd, vq) = (eq.i_d[i], eq.i_q[i], eq.v_d[i], eq.v_q[i]);
        idq.fixed_view_mut::<2, 2>(2 * i, 2 * i)
            .copy_from(&Matrix2::new(id, iq, -iq, id));
        vdq.fixed_view_mut::<2, 2>(2 * i, 2 * i)
            .copy_from(&Matrix2::new(vd, vq, vq, -vd));
        let block = match assembly {
            Assembly::Direct => proj[i].jacobian(),
            Assembly::Literal => proj[i].m_e,
        };
        m.fixed_view_mut::<2, 2>(2 * i, 2 * i).copy_from(&block);
    }
    let t = StateLabeling::new(n).t_perm;
    Ok(t.transpose() * ((idq + vdq * ys) * 3.0) * m * t)
}

/// C_s(s) with the power-measurement filter on rows i and n+i.
pub fn build_cs(
    eq: &Equilibrium,
    network: &ElectricalNetwork,
    dgs: &[DgParams],
    assembly: Assembly,
) -> Result<TransferMatrixFn> {
    let n = dgs.len();
    let k = cs_gain(eq, network, assembly)?.map(|x| c(x, 0.0));
    let sigma: Vec<f64> = dgs.iter().map(|d| d.sigma).collect();
    Ok(TransferMatrixFn::new(2 * n, "C_s", move |s| {
        if s == c(0.0, 0.0) {
            return Err(Error::Pole(s));
        }
        let inv_s = s.inv();
        let mut m = k.clone();
        for r in 0..2 * n {
            let filt = (sigma[r % n] * s + 1.0).inv();
            for col in 0..2 * n {
                let e = if col < n { inv_s } else { c(1.0, 0.0) };
                m[(r, col)] *= filt * e;
            }
        }
        Ok(m)
    }))
}

/// A_s and B_s at one frequency.
pub fn build_as_bs(sc: &MicrogridScenario, s: Complex64) -> Result<(CMatrix, CMatrix)> {
    let n = sc.n();
    let g = &sc.graph;
    let mut ah = delayed_adjacency(g, s);
    if sc.stabilizer_enabled {
        ah *= stabilizer_tf(&sc.stabilizer, s)?;
    }
    let literal = sc.options.assembly == Assembly::Literal;
    let zero = c(0.0, 0.0);
    let mut a = CMatrix::from_element(2 * n, 2 * n, zero);
    let mut b = CMatrix::from_element(2 * n, 2 * n, zero);
    for i in 0..n {
        let p = &sc.dgs[i];
        let (tw, tp) = dg_frequency_tf_with(p, s, sc.options.damping_term);
        let tv = dg_voltage_tf(p, s)?;
        let d = g.in_degree(i) as f64;
        let th = g.theta(i);
        let (scale, th_v, k_freq) = if literal {
            let inv = if d > 0.0 { 1.0 / d } else { 0.0 };
            (inv, 0.0, &sc.dgs[..])
        } else {
            (1.0 / (d + th), th, &sc.dgs[..])
        };
        for j in 0..n {
            let aij = ah[(i, j)];
            let diag = if i == j { c(d, 0.0) } else { zero };
            a[(i, j)] = s * tw * scale * aij;
            a[(n + i, n + j)] = tv * (aij - diag - if i == j { th_v } else { 0.0 });
            let kf = if literal { k_freq[j].k_q } else { k_freq[j].k_p };
            b[(i, j)] = s * tw * (aij - diag) * kf - if i == j { s * tp } else { zero };
            let self_s = if i == j { s } else { zero };
            b[(n + i, n + j)] = tv * (aij - diag - self_s) * sc.dgs[j].k_q;
        }
    }
    Ok((a, b))
}

pub fn build_as(sc: &MicrogridScenario) -> TransferMatrixFn {
    let sc = sc.clone();
    TransferMatrixFn::new(2 * sc.n(), "A_s", move |s| Ok(build_as_bs(&sc, s)?.0))
}

pub fn build_bs(sc: &MicrogridScenario) -> TransferMatrixFn {
    let sc = sc.clone();
    TransferMatrixFn::new(2 * sc.n(), "B_s", move |s| Ok(build_as_bs(&sc, s)?.1))
}

/// L(s) = −(A_s + B_s·C_s)/s around `eq`.
pub fn return_ratio(sc: &MicrogridScenario, eq: &Equilibrium) -> Result<TransferMatrixFn> {
    let cs = build_cs(eq, &sc.network, &sc.dgs, sc.options.assembly)?;
    let sc = sc.clone();
    Ok(TransferMatrixFn::new(2 * sc.n(), "L", move |s| {
        if s == c(0.0, 0.0) {
            return Err(Error::Pole(s));
        }
        let (a, b) = build_as_bs(&sc, s)?;
        let cm = cs.eval(s)?;
        Ok((a + b * cm) / (-s))
    }))
}

/// Entry of L where the direct and literal assemblies differ.
#[derive(Debug, Clone, PartialEq)]
pub struct AssemblyDifference {
    pub omega: f64,
    pub row: usize,
    pub col: usize,
    pub direct: Complex64,
    pub literal: Complex64,
}

/// Entry-wise comparison of L(jω) under both assemblies at the given frequencies.
pub fn compare_assemblies(
    sc: &MicrogridScenario,
    eq: &Equilibrium,
    omegas: &[f64],
    rel_tol: f64,
) -> Result<Vec<AssemblyDifference>> {
    let mut d = sc.clone();
    d.options.assembly = Assembly::Direct;
    let mut l = sc.clone();
    l.options.assembly = Assembly::Literal;
    let ld = return_ratio(&d, eq)?;
    let ll = return_ratio(&l, eq)?;
    let mut out = Vec::new();
    for &w in omegas {
        let s = c(0.0, w);
        let (md, ml) = (ld.eval(s)?, ll.eval(s)?);
        let scale = md.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
        for r in 0..md.nrows() {
            for col in 0..md.ncols() {
                if (md[(r, col)] - ml[(r, col)]).norm() > rel_tol * scale {
                    out.push(AssemblyDifference {
                        omega: w,
                        row: r,
                        col,
                        direct: md[(r, col)],
                        literal: ml[(r, col)],
                    });
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::solve_equilibrium;
    use crate::model::{CommGraph, Load};
    use crate::network::{phasors, power_injections};
    use crate::scenario::baseline;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol * b.norm().max(1.0)
    }

    #[test]
    fn frequency_tf_examples() {
        let p = &baseline().dgs[0];
        let (tw, tp) = dg_frequency_tf(p, c(0.0, 0.0));
        assert_eq!(tw, c(1.0, 0.0));
        assert_eq!(tp, c(0.0, 0.0));
        let s = c(0.0, 0.3 * 2.0 * PI);
        let (tw, _) = dg_frequency_tf(p, s);
        let want = (5e5 * s + 1e5) / (377.0 * s * s + (5e5 + 1.0) * s + 1e5);
        assert!(close(tw, want, 1e-14));
        let mut big = p.clone();
        big.k1 = 1e15;
        let (tw, _) = dg_frequency_tf(&big, c(0.0, 3.0));
        assert!(close(tw, c(1.0, 0.0), 1e-9));
    }

    #[test]
    fn voltage_tf_examples() {
        let mut p = baseline().dgs[0].clone();
        assert_eq!(dg_voltage_tf(&p, c(0.0, 0.0)).unwrap(), c(1.0, 0.0));
        let corner = dg_voltage_tf(&p, c(0.0, 1.0 / p.sigma_v)).unwrap();
        assert_relative_eq!(corner.norm(), 1.0 / 2f64.sqrt(), epsilon = 1e-12);
        p.sigma_v = 0.1;
        assert!(close(dg_voltage_tf(&p, c(0.0, 10.0)).unwrap(), c(0.5, -0.5), 1e-15));
        assert!(dg_voltage_tf(&p, c(-10.0, 0.0)).is_err());
    }

    #[test]
    fn stabilizer_examples() {
        let f = StabilizerCoeffs::default();
        assert_eq!(stabilizer_tf(&f, c(0.0, 0.0)).unwrap(), c(1.0, 0.0));
        assert!(close(stabilizer_tf(&f, c(0.0, 1.0)).unwrap(), c(0.5, -0.25), 1e-15));
        assert!(close(stabilizer_tf(&f, c(0.0, 1e7)).unwrap(), c(0.5, 0.0), 1e-6));
        assert!(stabilizer_tf(&f, c(-1.0, 0.0)).is_err());
    }

    #[test]
    fn projection_axis_cases() {
        let a = DqProjection::new(1.0, 0.0);
        assert_eq!((a.m_de, a.m_qe, a.n_de, a.n_qe, a.d_e), (0.0, 1.0, 1.0, 0.0, -1.0));
        assert_eq!(a.m_e, Matrix2::new(0.0, 1.0, 1.0, 0.0));
        let b = DqProjection::new(0.0, 1.0);
        assert_eq!((b.m_de, b.m_qe, b.n_de, b.n_qe, b.d_e), (1.0, 0.0, 0.0, 1.0, 1.0));
        assert_eq!(b.m_e, Matrix2::identity());
        let num = Matrix2::new(b.n_qe, -b.m_qe, -b.n_de, b.m_de);
        assert_eq!(b.m_e * b.d_e, num);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for &(v, d) in &[(120.0, 0.3), (95.0, -1.1), (130.0, 2.5), (1.0, 0.0)] {
            let p = DqProjection::new(v * f64::cos(d), v * f64::sin(d));
            let h = 1e-6;
            let f = |dl: f64, vv: f64| (vv * dl.cos(), vv * dl.sin());
            let (a, b) = (f(d + h, v), f(d - h, v));
            let (e, g) = (f(d, v + h), f(d, v - h));
            let fd = Matrix2::new(
                (a.0 - b.0) / (2.0 * h),
                (e.0 - g.0) / (2.0 * h),
                (a.1 - b.1) / (2.0 * h),
                (e.1 - g.1) / (2.0 * h),
            );
            assert!((p.jacobian() - fd).abs().max() < 1e-6 * v);
        }
    }

    #[test]
    fn zero_voltage_is_rejected() {
        let mut eq = solve_equilibrium(&baseline()).unwrap();
        eq.v_d[2] = 0.0;
        eq.v_q[2] = 0.0;
        assert!(matches!(build_dq_projection(&eq), Err(Error::ZeroVoltage { bus: 3 })));
    }

    fn two_bus() -> MicrogridScenario {
        let mut s = baseline();
        s.dgs.truncate(2);
        s.dgs[1] = s.dgs[0].clone();
        s.network.n = 2;
        s.network.lines.truncate(1);
        s.network.loads = vec![
            Load { bus: 0, p: 6000.0, q: 1500.0 },
            Load { bus: 1, p: 6000.0, q: 1500.0 },
        ];
        s.graph = CommGraph::full_mesh(vec![true, false]);
        s
    }

    #[test]
    fn cs_matches_nonlinear_power_flow() {
        let s = two_bus();
        let eq = solve_equilibrium(&s).unwrap();
        let cs = build_cs(&eq, &s.network, &s.dgs, Assembly::Direct).unwrap();
        let w = 1e-3;
        let m = cs.eval(c(0.0, w)).unwrap();
        let y = assemble_bus_admittance(&s.network).unwrap();
        // x = Δω at node 2 ⇒ Δδ_2 = Δω/s; compare ΔP per unit Δδ.
        let h = 1e-6;
        let mut dp = eq.delta.clone();
        dp[1] += h;
        let mut dm = eq.delta.clone();
        dm[1] -= h;
        let (pp, qp) = power_injections(&y, &phasors(&eq.v, &dp));
        let (pm, qm) = power_injections(&y, &phasors(&eq.v, &dm));
        for (row, fd) in [
            (0, (pp[0] - pm[0]) / (2.0 * h)),
            (1, (pp[1] - pm[1]) / (2.0 * h)),
            (2, (qp[0] - qm[0]) / (2.0 * h)),
            (3, (qp[1] - qm[1]) / (2.0 * h)),
        ] {
            let got = m[(row, 1)] * c(0.0, w);
            assert!((got.re - fd).abs() <= 0.01 * fd.abs().max(1.0), "row {row}: {got} vs {fd}");
        }
    }

    #[test]
    fn cs_vanishes_without_network() {
        let mut s = two_bus();
        s.network.lines.clear();
        s.network.loads.clear();
        let eq = solve_equilibrium(&s).unwrap();
        let cs = build_cs(&eq, &s.network, &s.dgs, Assembly::Direct).unwrap();
        assert_eq!(cs.dim, 4);
        assert!(cs.eval(c(0.0, 1.0)).unwrap().iter().all(|z| z.norm() == 0.0));
        assert!(cs.eval(c(0.0, 0.0)).is_err());
    }

    #[test]
    fn frequency_rows_follow_averaging_weights() {
        // n = 2, node 1 leads, node 2 listens to node 1, τ = 0, s real.
        let mut s = two_bus();
        s.graph = CommGraph::chain(2);
        let sv = c(1e-3, 0.0);
        let (a, _) = build_as_bs(&s, sv).unwrap();
        let (tw, _) = dg_frequency_tf(&s.dgs[1], sv);
        // node 2: weight 1/(d+θ) = 1 on ω_1; node 1 has no neighbours.
        assert!(close(a[(1, 0)], sv * tw, 1e-14));
        assert_eq!(a[(0, 1)], c(0.0, 0.0));
        assert_eq!(a[(0, 0)], c(0.0, 0.0));
        // Together with −s on the left, row 2 at s → 0 gives ω_2 → ω_1.
        let row_sum: Complex64 = (0..2).map(|j| a[(1, j)]).sum::<Complex64>() / sv;
        assert!(close(row_sum, c(1.0, 0.0), 1e-3));
    }

    #[test]
    fn zero_kq_zeroes_voltage_block_of_b() {
        let mut s = baseline();
        for d in &mut s.dgs {
            d.k_q = 0.0;
        }
        s.graph.set_uniform_latency(0.4);
        let (_, b) = build_as_bs(&s, c(0.1, 2.0)).unwrap();
        for i in 4..8 {
            for j in 4..8 {
                assert_eq!(b[(i, j)], c(0.0, 0.0));
            }
        }
    }

    #[test]
    fn decoupled_loops_match_scalar_oracle() {
        let mut s = baseline();
        s.graph = CommGraph::new(4);
        s.graph.leaders = vec![true; 4];
        s.network.lines.clear();
        s.network.loads.clear();
        let eq = solve_equilibrium(&s).unwrap();
        let l = return_ratio(&s, &eq).unwrap();
        for &w in &[0.01, 0.7, 13.0] {
            let sv = c(0.0, w);
            let m = l.eval(sv).unwrap();
            for i in 0..4 {
                let p = &s.dgs[i];
                // ω: L = T_p·s/s·0 … only Â = 0, so A_ω = 0 and B_ω C = 0.
                assert!(m[(i, i)].norm() < 1e-12);
                // V: s x = −T_v x ⇒ L = T_v/s.
                let want = dg_voltage_tf(p, sv).unwrap() / sv;
                assert!(close(m[(4 + i, 4 + i)], want, 1e-12));
            }
        }
    }

    #[test]
    fn conjugate_symmetry() {
        let mut s = baseline();
        s.graph.set_uniform_latency(0.7);
        s.stabilizer_enabled = true;
        let eq = solve_equilibrium(&s).unwrap();
        let l = return_ratio(&s, &eq).unwrap();
        for &(re, im) in &[(0.0, 0.4), (0.2, 3.0), (0.0, 100.0)] {
            let a = l.eval(c(re, im)).unwrap();
            let b = l.eval(c(re, -im)).unwrap();
            assert!((a.conjugate() - b).norm() < 1e-10 * a.norm());
        }
    }
}
