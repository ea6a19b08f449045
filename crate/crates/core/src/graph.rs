//! Laplacian, delayed adjacency and the delay-free consensus oracle.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::model::{unreachable_nodes, CommGraph};

/// L = D − A with d_ii the in-degree of node i.
pub fn laplacian(g: &CommGraph) -> DMatrix<f64> {
    let n = g.n();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            g.in_degree(i) as f64
        } else {
            -g.a(i, j)
        }
    })
}

/// Â(s) with entries e^{−τ_ij s}·a_ij.
pub fn delayed_adjacency(g: &CommGraph, s: Complex64) -> DMatrix<Complex64> {
    let n = g.n();
    DMatrix::from_fn(n, n, |i, j| {
        if g.adjacency[i][j] {
            (-s * g.latency[i][j]).exp()
        } else {
            Complex64::new(0.0, 0.0)
        }
    })
}

/// −L − diag(θ): state matrix of first-order leader–follower consensus.
pub fn consensus_closed_loop_matrix(g: &CommGraph) -> DMatrix<f64> {
    let mut m = -laplacian(g);
    for i in 0..g.n() {
        m[(i, i)] -= g.theta(i);
    }
    m
}

pub fn has_spanning_tree_from_leaders(g: &CommGraph) -> bool {
    unreachable_nodes(g).is_empty()
}
