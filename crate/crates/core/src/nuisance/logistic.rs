use crate::error::{Error, Result};
use crate::optim::{blocked_sum, minimize, regularized_solve, Objective, OptimOptions};
use crate::util::{sigmoid, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Logistic,
    Identity,
}

/// Generalized linear predictor with the intercept stored first.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub link: Link,
    pub converged: bool,
    pub iterations: usize,
}

impl LinearModel {
    pub fn constant(value: f64, link: Link, dim: usize) -> Self {
        let mut weights = vec![0.0; dim + 1];
        weights[0] = value;
        LinearModel { weights, link, converged: true, iterations: 0 }
    }

    pub fn index(&self, x: &[f64]) -> f64 {
        let mut z = self.weights[0];
        for (w, v) in self.weights[1..].iter().zip(x) {
            z += w * v;
        }
        z
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let z = self.index(x);
        match self.link {
            Link::Logistic => sigmoid(z),
            Link::Identity => z,
        }
    }
}

fn check_shapes(features: &[Vec<f64>], n_labels: usize, weights: &[f64]) -> Result<usize> {
    if features.len() != n_labels || weights.len() != n_labels {
        return Err(Error::Domain("features, labels and weights differ in length".into()));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Domain("weights must be finite and nonnegative".into()));
    }
    if !weights.iter().any(|w| *w > 0.0) {
        return Err(Error::Domain("all weights are zero".into()));
    }
    let dim = features.first().map_or(0, Vec::len);
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Domain("feature rows differ in length".into()));
    }
    Ok(dim)
}

struct LogisticLoss<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    w: &'a [f64],
    total: f64,
    reg: f64,
}

impl Objective for LogisticLoss<'_> {
    fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len) + 1
    }

    fn eval(&self, beta: &[f64], grad: Option<&mut [f64]>, hess: Option<&mut [f64]>) -> f64 {
        let d = beta.len();
        let want_g = grad.is_some();
        let want_h = hess.is_some();
        let len = 1 + if want_g { d } else { 0 } + if want_h { d * d } else { 0 };
        let acc = blocked_sum(self.x.len(), len, |rows, acc| {
            let mut f = vec![0.0; d];
            for i in rows {
                if self.w[i] == 0.0 {
                    continue;
                }
                f[0] = 1.0;
                f[1..].copy_from_slice(&self.x[i]);
                let z: f64 = f.iter().zip(beta).map(|(a, b)| a * b).sum();
                let yi = if self.y[i] { 1.0 } else { 0.0 };
                acc[0] += self.w[i] * (softplus(z) - yi * z);
                if want_g {
                    let r = self.w[i] * (sigmoid(z) - yi);
                    for j in 0..d {
                        acc[1 + j] += r * f[j];
                    }
                }
                if want_h {
                    let s = sigmoid(z);
                    let c = self.w[i] * s * (1.0 - s);
                    let off = 1 + if want_g { d } else { 0 };
                    for j in 0..d {
                        for k in 0..=j {
                            acc[off + j * d + k] += c * f[j] * f[k];
                        }
                    }
                }
            }
        });
        let penalty: f64 = beta[1..].iter().map(|b| b * b).sum::<f64>() * self.reg / 2.0;
        if let Some(g) = grad {
            for j in 0..d {
                g[j] = acc[1 + j] / self.total + if j > 0 { self.reg * beta[j] } else { 0.0 };
            }
        }
        if let Some(h) = hess {
            let off = 1 + if want_g { d } else { 0 };
            for j in 0..d {
                for k in 0..=j {
                    let v = acc[off + j * d + k] / self.total;
                    h[j * d + k] = v;
                    h[k * d + j] = v;
                }
                if j > 0 {
                    h[j * d + j] += self.reg;
                }
            }
        }
        acc[0] / self.total + penalty
    }
}

/// Weighted logistic regression: minimizes the weight-normalized negative
/// log-likelihood plus `reg/2·‖w‖²` (intercept unpenalized), from zero.
pub fn fit_logistic(
    features: &[Vec<f64>],
    labels: &[bool],
    weights: &[f64],
    reg: f64,
) -> Result<LinearModel> {
    fit_logistic_with(features, labels, weights, reg, &OptimOptions::default())
}

pub fn fit_logistic_with(
    features: &[Vec<f64>],
    labels: &[bool],
    weights: &[f64],
    reg: f64,
    opts: &OptimOptions,
) -> Result<LinearModel> {
    let dim = check_shapes(features, labels.len(), weights)?;
    if !(reg.is_finite() && reg >= 0.0) {
        return Err(Error::Domain("regularization must be finite and nonnegative".into()));
    }
    let active = labels.iter().zip(weights).filter(|(_, w)| **w > 0.0);
    let (mut pos, mut neg) = (false, false);
    for (y, _) in active {
        if *y {
            pos = true;
        } else {
            neg = true;
        }
    }
    if !(pos && neg) && reg == 0.0 {
        return Err(Error::RegularizationRequired);
    }
    let loss = LogisticLoss {
        x: features,
        y: labels,
        w: weights,
        total: weights.iter().sum(),
        reg,
    };
    let r = minimize(&loss, vec![0.0; dim + 1], opts);
    Ok(LinearModel {
        weights: r.x,
        link: Link::Logistic,
        converged: r.converged,
        iterations: r.iterations,
    })
}

/// Weighted ridge least squares (intercept unpenalized), solved exactly.
pub fn fit_linear(features: &[Vec<f64>], y: &[f64], weights: &[f64], reg: f64) -> Result<LinearModel> {
    let dim = check_shapes(features, y.len(), weights)?;
    let d = dim + 1;
    let total: f64 = weights.iter().sum();
    let acc = blocked_sum(features.len(), d + d * d, |rows, acc| {
        let mut f = vec![0.0; d];
        for i in rows {
            f[0] = 1.0;
            f[1..].copy_from_slice(&features[i]);
            for j in 0..d {
                acc[j] += weights[i] * f[j] * y[i];
                for k in 0..d {
                    acc[d + j * d + k] += weights[i] * f[j] * f[k];
                }
            }
        }
    });
    let rhs: Vec<f64> = acc[..d].iter().map(|v| v / total).collect();
    let mut gram: Vec<f64> = acc[d..].iter().map(|v| v / total).collect();
    for j in 1..d {
        gram[j * d + j] += reg;
    }
    let beta = regularized_solve(&gram, &rhs)
        .ok_or_else(|| Error::Domain("least-squares system is singular".into()))?;
    Ok(LinearModel { weights: beta, link: Link::Identity, converged: true, iterations: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_class_needs_regularization() {
        let x = vec![vec![0.0], vec![1.0]];
        let w = vec![1.0, 1.0];
        assert!(matches!(
            fit_logistic(&x, &[true, true], &w, 0.0),
            Err(Error::RegularizationRequired)
        ));
        let m = fit_logistic(&x, &[true, true], &w, 1.0).unwrap();
        assert!(m.predict(&[0.5]) > 0.5);
    }

    #[test]
    fn sign_of_slope() {
        let x = vec![vec![-1.0], vec![1.0]];
        let m = fit_logistic(&x, &[false, true], &[1.0, 1.0], 1.0).unwrap();
        let p = m.predict(&[1.0]);
        assert!(p > 0.5 && p < 1.0);
        assert!(m.converged);
    }

    #[test]
    fn recovers_logistic_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let truth = [-0.5, 1.2, -0.8];
        let n = 50_000;
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let f = vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let z = truth[0] + truth[1] * f[0] + truth[2] * f[1];
            y.push(rng.gen::<f64>() < sigmoid(z));
            x.push(f);
        }
        let m = fit_logistic(&x, &y, &vec![1.0; n], 1e-6).unwrap();
        assert!(m.converged);
        for (w, t) in m.weights.iter().zip(truth) {
            assert!((w - t).abs() < 0.05, "{w} vs {t}");
        }
    }

    #[test]
    fn zero_weights_rejected() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(fit_logistic(&x, &[false, true], &[0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn least_squares_exact_line() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| 3.0 - 0.5 * i as f64).collect();
        let m = fit_linear(&x, &y, &[1.0; 10], 0.0).unwrap();
        assert!((m.weights[0] - 3.0).abs() < 1e-9);
        assert!((m.weights[1] + 0.5).abs() < 1e-9);
    }
}
