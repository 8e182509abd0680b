//! Smooth convex minimization for the small dense problems in this crate
//! (logistic fits and surrogate best responses).

use rayon::prelude::*;

use crate::util::pairwise_sum;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimOptions {
    pub max_iter: usize,
    /// Stop when the Euclidean gradient norm falls below this.
    pub tol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions { max_iter: 10_000, tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// A twice-differentiable objective. `eval` fills `grad` (length `dim`) and
/// `hess` (row-major `dim × dim`) when given.
pub trait Objective {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], grad: Option<&mut [f64]>, hess: Option<&mut [f64]>) -> f64;
}

/// In-place Cholesky solve of `a · z = b`. Returns `None` if `a` is not
/// numerically positive definite.
pub fn cholesky_solve(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut z = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            z[i] -= l[i * n + k] * z[k];
        }
        z[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            z[i] -= l[k * n + i] * z[k];
        }
        z[i] /= l[i * n + i];
    }
    Some(z)
}

/// Solves with increasing diagonal jitter until the factorization succeeds.
pub fn regularized_solve(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max).max(1e-300);
    let mut jitter = 0.0;
    for _ in 0..12 {
        let mut m = a.to_vec();
        for i in 0..n {
            m[i * n + i] += jitter;
        }
        if let Some(z) = cholesky_solve(&m, b) {
            if z.iter().all(|v| v.is_finite()) {
                return Some(z);
            }
        }
        jitter = if jitter == 0.0 { scale * 1e-12 } else { jitter * 100.0 };
    }
    None
}

/// Damped Newton iteration with Armijo backtracking, from `x0`.
/// Falls back to the steepest-descent direction when the Hessian system
/// cannot be solved.
pub fn minimize(obj: &impl Objective, x0: Vec<f64>, opts: &OptimOptions) -> OptimResult {
    let d = obj.dim();
    let mut x = x0;
    let mut g = vec![0.0; d];
    let mut h = vec![0.0; d * d];
    let mut f = obj.eval(&x, Some(&mut g), Some(&mut h));
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let gn = norm(&g);
        if gn <= opts.tol {
            return OptimResult { x, value: f, grad_norm: gn, iterations, converged: true };
        }
        iterations += 1;
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut dir = regularized_solve(&h, &neg).unwrap_or_else(|| neg.clone());
        let mut slope: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            dir = neg;
            slope = -gn * gn;
        }
        let mut t = 1.0;
        let mut accepted = false;
        let mut trial = vec![0.0; d];
        for _ in 0..60 {
            for i in 0..d {
                trial[i] = x[i] + t * dir[i];
            }
            let ft = obj.eval(&trial, None, None);
            let slack = if t == 1.0 { 1e-12 * f.abs().max(1.0) } else { 0.0 };
            if ft <= f + 1e-4 * t * slope + slack {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        std::mem::swap(&mut x, &mut trial);
        f = obj.eval(&x, Some(&mut g), Some(&mut h));
    }
    let gn = norm(&g);
    OptimResult { x, value: f, grad_norm: gn, iterations, converged: gn <= opts.tol }
}

/// Rows per block for deterministic parallel reductions.
pub(crate) const BLOCK: usize = 4096;

/// Sums per-block partial vectors of length `len` computed in parallel;
/// block boundaries and the final reduction order do not depend on the
/// thread count.
pub(crate) fn blocked_sum<F>(n: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    let blocks = n.div_ceil(BLOCK).max(1);
    let partials: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![0.0; len];
            f(b * BLOCK..((b + 1) * BLOCK).min(n), &mut acc);
            acc
        })
        .collect();
    (0..len)
        .map(|k| pairwise_sum(&partials.iter().map(|p| p[k]).collect::<Vec<_>>()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic;
    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            2
        }
        fn eval(&self, x: &[f64], grad: Option<&mut [f64]>, hess: Option<&mut [f64]>) -> f64 {
            if let Some(g) = grad {
                g[0] = 2.0 * (x[0] - 1.0);
                g[1] = 20.0 * (x[1] + 2.0);
            }
            if let Some(h) = hess {
                h.copy_from_slice(&[2.0, 0.0, 0.0, 20.0]);
            }
            (x[0] - 1.0).powi(2) + 10.0 * (x[1] + 2.0).powi(2)
        }
    }

    #[test]
    fn quadratic_in_one_step() {
        let r = minimize(&Quadratic, vec![0.0, 0.0], &OptimOptions::default());
        assert!(r.converged);
        assert!(r.iterations <= 2);
        assert!((r.x[0] - 1.0).abs() < 1e-12 && (r.x[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn cholesky_matches_hand_solution() {
        let z = cholesky_solve(&[4.0, 2.0, 2.0, 3.0], &[2.0, 1.0]).unwrap();
        assert!((z[0] - 0.5).abs() < 1e-15 && z[1].abs() < 1e-15);
        assert!(cholesky_solve(&[1.0, 2.0, 2.0, 1.0], &[1.0, 1.0]).is_none());
    }

    #[test]
    fn blocked_sum_is_thread_independent() {
        let f = |r: std::ops::Range<usize>, acc: &mut [f64]| {
            for i in r {
                acc[0] += (i as f64).sqrt();
            }
        };
        let a = blocked_sum(100_000, 1, f);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| blocked_sum(100_000, 1, f));
        assert_eq!(a, b);
    }
}
