//! Phasor bus admittance and its dq-frame real counterpart.

use nalgebra::{DMatrix, DVector, Matrix2};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::ElectricalNetwork;

/// Constant-impedance load admittance from three-phase P, Q at per-phase v_nom.
pub fn load_admittance(p: f64, q: f64, v_nom: f64) -> Complex64 {
    (Complex64::new(p, q) / 3.0).conj() / (v_nom * v_nom)
}

pub fn line_admittance(r: f64, x: f64) -> Result<Complex64> {
    let z = Complex64::new(r, x);
    if z.norm_sqr() == 0.0 {
        return Err(Error::ZeroImpedance { from: 0, to: 0 });
    }
    Ok(z.inv())
}

pub fn assemble_bus_admittance(net: &ElectricalNetwork) -> Result<DMatrix<Complex64>> {
    let n = net.n;
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for l in &net.lines {
        let yl = line_admittance(l.r, l.x).map_err(|_| Error::ZeroImpedance {
            from: l.from + 1,
            to: l.to + 1,
        })?;
        y[(l.from, l.from)] += yl;
        y[(l.to, l.to)] += yl;
        y[(l.from, l.to)] -= yl;
        y[(l.to, l.from)] -= yl;
    }
    for l in &net.loads {
        y[(l.bus, l.bus)] += load_admittance(l.p, l.q, net.v_nom);
    }
    Ok(y)
}

/// The rotation block [[G, −B], [B, G]] of G + jB.
pub fn dq_block(y: Complex64) -> Matrix2<f64> {
    Matrix2::new(y.re, -y.im, y.im, y.re)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DqAdmittance {
    pub blocks: Vec<Vec<Matrix2<f64>>>,
    /// Ordered [d_1, q_1, …, d_n, q_n].
    pub assembled: DMatrix<f64>,
}

pub fn dq_decompose(y: &DMatrix<Complex64>) -> DqAdmittance {
    let n = y.nrows();
    let blocks: Vec<Vec<_>> = (0..n)
        .map(|i| (0..n).map(|j| dq_block(y[(i, j)])).collect())
        .collect();
    let mut assembled = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            assembled
                .fixed_view_mut::<2, 2>(2 * i, 2 * j)
                .copy_from(&blocks[i][j]);
        }
    }
    DqAdmittance { blocks, assembled }
}

/// Complex voltages from magnitudes and angles.
pub fn phasors(v: &[f64], delta: &[f64]) -> DVector<Complex64> {
    DVector::from_iterator(
        v.len(),
        v.iter().zip(delta).map(|(&m, &a)| Complex64::from_polar(m, a)),
    )
}

/// Three-phase (P, Q) injected at each bus: S = 3·V·conj(Y V).
pub fn power_injections(y: &DMatrix<Complex64>, v: &DVector<Complex64>) -> (Vec<f64>, Vec<f64>) {
    let i = y * v;
    v.iter()
        .zip(i.iter())
        .map(|(v, i)| {
            let s = 3.0 * v * i.conj();
            (s.re, s.im)
        })
        .unzip()
}

/// Total active load and line losses for a given voltage profile.
pub fn power_balance(net: &ElectricalNetwork, v: &DVector<Complex64>) -> Result<(f64, f64)> {
    let mut load = 0.0;
    for l in &net.loads {
        let y = load_admittance(l.p, l.q, net.v_nom);
        load += 3.0 * v[l.bus].norm_sqr() * y.re;
    }
    let mut loss = 0.0;
    for l in &net.lines {
        let y = line_admittance(l.r, l.x)?;
        loss += 3.0 * (v[l.from] - v[l.to]).norm_sqr() * y.re;
    }
    Ok((load, loss))
}
