//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls into the pruner or solver.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = DMatrix<f64>;

pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Solves `a · x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, &r)| {
            let mut v = row.clone();
            v.push(r);
            v
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            let pivot_row = m[col].clone();
            for (c, v) in m[r].iter_mut().enumerate().skip(col) {
                *v -= f * pivot_row[c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut acc = m[r][n];
        for c in r + 1..n {
            acc -= m[r][c] * x[c];
        }
        x[r] = acc / m[r][r];
    }
    x
}

/// `X·Xᵀ + (λ/2)·I` as nested vectors: the quadratic form of the damped
/// least-squares objective `‖ΔX‖² + (λ/2)‖Δ‖²`.
pub fn objective_gram(x: &Mat, lambda: f64) -> Vec<Vec<f64>> {
    let d = x.nrows();
    let mut g = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..x.ncols() {
                s += x[(i, k)] * x[(j, k)];
            }
            g[i][j] = s;
        }
        g[i][i] += lambda / 2.0;
    }
    g
}

/// Removes the columns in `removed` from `w` and re-fits the remaining
/// columns of every row to minimise the damped objective. Returns the new
/// weights and the objective increase.
pub fn reduced_refit(w: &Mat, g: &[Vec<f64>], removed: &[usize]) -> (Mat, f64) {
    let d = w.ncols();
    let free: Vec<usize> = (0..d).filter(|c| !removed.contains(c)).collect();
    let mut out = w.clone();
    let mut increase = 0.0;
    for i in 0..w.nrows() {
        // delta on removed columns is fixed to -w; free part solves
        // G_FF · δ_F = -G_FS · δ_S
        let delta_s: Vec<f64> = removed.iter().map(|&c| -w[(i, c)]).collect();
        let a: Vec<Vec<f64>> = free.iter().map(|&r| free.iter().map(|&c| g[r][c]).collect()).collect();
        let b: Vec<f64> = free
            .iter()
            .map(|&r| -removed.iter().zip(&delta_s).map(|(&c, ds)| g[r][c] * ds).sum::<f64>())
            .collect();
        let delta_f = if free.is_empty() { vec![] } else { gauss_solve(&a, &b) };
        let mut delta = vec![0.0; d];
        for (k, &c) in free.iter().enumerate() {
            delta[c] = delta_f[k];
        }
        for (k, &c) in removed.iter().enumerate() {
            delta[c] = delta_s[k];
        }
        for r in 0..d {
            for c in 0..d {
                increase += delta[r] * g[r][c] * delta[c];
            }
        }
        for c in 0..d {
            out[(i, c)] += delta[c];
        }
    }
    (out, increase)
}

pub fn hessian(x: &Mat, lambda: f64) -> Mat {
    x * x.transpose() * 2.0 + Mat::identity(x.nrows(), x.nrows()) * lambda
}

/// Every assignment of one level per group, in lexicographic order.
pub fn all_assignments(levels_per_group: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &n in levels_per_group {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..n).map(move |l| {
                    let mut p = prefix.clone();
                    p.push(l);
                    p
                })
            })
            .collect();
    }
    out
}
