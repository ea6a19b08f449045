//! Differential evolution and damped Newton for small dense problems.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct DeConfig {
    pub population: usize,
    pub max_generations: usize,
    pub mutation: f64,
    pub crossover: f64,
    pub seed: u64,
    /// Stop as soon as the best objective falls below this value.
    pub target: f64,
}

#[derive(Debug, Clone)]
pub struct DeResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub generations: usize,
}

/// DE/rand/1/bin inside a box. `checkpoint` is called with the incumbent every
/// `checkpoint_every` generations; returning `true` stops the search.
pub fn differential_evolution<F, C>(
    f: F,
    lower: &[f64],
    upper: &[f64],
    cfg: &DeConfig,
    checkpoint_every: usize,
    mut checkpoint: C,
) -> DeResult
where
    F: Fn(&[f64]) -> f64 + Sync,
    C: FnMut(&[f64], f64) -> bool,
{
    let dim = lower.len();
    let np = cfg.population.max(4);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pop: Vec<Vec<f64>> = (0..np)
        .map(|_| {
            (0..dim)
                .map(|k| lower[k] + rng.gen::<f64>() * (upper[k] - lower[k]))
                .collect()
        })
        .collect();
    let mut fit: Vec<f64> = pop.par_iter().map(|x| sanitize(f(x))).collect();
    let best_of = |fit: &[f64]| {
        fit.iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v < fit[b] { i } else { b })
    };
    let mut gen = 0;
    while gen < cfg.max_generations {
        let b = best_of(&fit);
        if fit[b] <= cfg.target {
            break;
        }
        if checkpoint_every > 0 && gen > 0 && gen % checkpoint_every == 0 && checkpoint(&pop[b], fit[b]) {
            break;
        }
        let trials: Vec<Vec<f64>> = (0..np)
            .map(|i| {
                let (r1, r2, r3) = distinct3(&mut rng, np, i);
                let jr = rng.gen_range(0..dim);
                (0..dim)
                    .map(|k| {
                        if k == jr || rng.gen::<f64>() < cfg.crossover {
                            let v = pop[r1][k] + cfg.mutation * (pop[r2][k] - pop[r3][k]);
                            reflect(v, lower[k], upper[k])
                        } else {
                            pop[i][k]
                        }
                    })
                    .collect()
            })
            .collect();
        let tf: Vec<f64> = trials.par_iter().map(|x| sanitize(f(x))).collect();
        for (i, (t, v)) in trials.into_iter().zip(tf).enumerate() {
            if v <= fit[i] {
                pop[i] = t;
                fit[i] = v;
            }
        }
        gen += 1;
    }
    let b = best_of(&fit);
    DeResult {
        x: pop[b].clone(),
        f: fit[b],
        generations: gen,
    }
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

fn distinct3(rng: &mut ChaCha8Rng, np: usize, i: usize) -> (usize, usize, usize) {
    let mut pick = |ex: &[usize]| loop {
        let r = rng.gen_range(0..np);
        if !ex.contains(&r) {
            return r;
        }
    };
    let r1 = pick(&[i]);
    let r2 = pick(&[i, r1]);
    let r3 = pick(&[i, r1, r2]);
    (r1, r2, r3)
}

fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    if v < lo {
        (lo + (lo - v)).min(hi)
    } else if v > hi {
        (hi - (v - hi)).max(lo)
    } else {
        v
    }
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub x: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Damped Newton on a square system with a central-difference Jacobian.
pub fn newton<F>(f: F, x0: &[f64], tol: f64, max_iter: usize) -> NewtonResult
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut fx = DVector::from_vec(f(x.as_slice()));
    let mut norm = fx.norm();
    let mut it = 0;
    while it < max_iter && norm.is_finite() {
        if norm <= tol * 1e-3 {
            break;
        }
        let mut jac = DMatrix::zeros(fx.len(), n);
        for k in 0..n {
            let h = 1e-7 * x[k].abs().max(1.0);
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let d = (DVector::from_vec(f(xp.as_slice())) - DVector::from_vec(f(xm.as_slice()))) / (2.0 * h);
            jac.set_column(k, &d);
        }
        let step = match jac.clone().lu().solve(&(-&fx)) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => match jac.svd(true, true).solve(&(-&fx), 1e-14) {
                Ok(s) => s,
                Err(_) => break,
            },
        };
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let xn = &x + &step * alpha;
            let fnew = DVector::from_vec(f(xn.as_slice()));
            let nn = fnew.norm();
            if nn.is_finite() && nn < norm {
                x = xn;
                fx = fnew;
                norm = nn;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        it += 1;
        if !improved {
            break;
        }
    }
    NewtonResult {
        x: x.as_slice().to_vec(),
        residual: norm,
        iterations: it,
        converged: norm <= tol,
    }
}
