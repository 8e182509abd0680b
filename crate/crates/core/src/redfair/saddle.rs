use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use super::constraints::ConstraintSystem;
use crate::data::{CellKey, CostSpec, Dataset};
use crate::error::{Error, Result};
use crate::estimators::{baseline_score, pseudo_outcome, PseudoKind};
use crate::nuisance::{Nuisance, NuisanceTable};
use crate::optim::{minimize, Objective, OptimOptions};
use crate::policy::{linear_features, Policy, PolicySpec, RandomizedPolicy};
use crate::util::{join_f64, sigmoid, softplus};

/// Deterministic policy class searched by the best-response player.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyClass {
    /// One decision per covariate cell, solved exactly.
    Tabular,
    /// `1{β·[1, x, group dummies] > 0}` fitted through the logistic surrogate.
    Linear,
}

impl FromStr for PolicyClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tabular" => Ok(PolicyClass::Tabular),
            "linear" => Ok(PolicyClass::Linear),
            other => Err(Error::Domain(format!("unknown policy class '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RedfairParams {
    /// `B`, the bound on `‖λ‖₁`.
    pub bound: f64,
    /// Target saddle gap `ν`; `None` means `n^{−α}`.
    pub gap_target: Option<f64>,
    /// Step size `ω`; `None` picks `sqrt(ln(K+1)/max_iter)/ξ` with `ξ` the
    /// largest first-iterate violation.
    pub step: Option<f64>,
    pub max_iter: usize,
    pub alpha: f64,
    /// `C′` in the sampling slack.
    pub slack_constant: f64,
    pub class: PolicyClass,
    pub pseudo: PseudoKind,
    /// Record one trace row every this many iterations.
    pub trace_stride: usize,
    /// Only used where sampling is involved (sample splitting).
    pub seed: u64,
    /// Options for the surrogate fits of the linear class.
    pub optim: OptimOptions,
}

impl Default for RedfairParams {
    fn default() -> Self {
        RedfairParams {
            bound: 10.0,
            gap_target: None,
            step: None,
            max_iter: 50_000,
            alpha: 0.5,
            slack_constant: 1.0,
            class: PolicyClass::Tabular,
            pseudo: PseudoKind::Dm,
            trace_stride: 100,
            seed: 0,
            optim: OptimOptions { max_iter: 200, tol: 1e-8 },
        }
    }
}

impl RedfairParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Domain(m.into()));
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return bad("B must be positive");
        }
        if matches!(self.gap_target, Some(v) if !(v > 0.0)) {
            return bad("target gap must be positive");
        }
        if matches!(self.step, Some(v) if !(v > 0.0 && v.is_finite())) {
            return bad("step size must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return bad("alpha must lie in (0, 1/2]");
        }
        if !(self.slack_constant >= 0.0 && self.slack_constant.is_finite()) {
            return bad("slack constant must be nonnegative");
        }
        if self.max_iter == 0 || self.trace_stride == 0 {
            return bad("iteration cap and trace stride must be positive");
        }
        Ok(())
    }

    pub fn gap_target_for(&self, n: usize) -> f64 {
        self.gap_target.unwrap_or_else(|| (n as f64).powf(-self.alpha))
    }
}

/// `λ = B·e^θ / (1 + Σ e^θ)`, computed without overflow.
pub fn multipliers(theta: &[f64], bound: f64) -> Vec<f64> {
    let m = theta.iter().copied().fold(0.0_f64, f64::max);
    let ex: Vec<f64> = theta.iter().map(|t| (t - m).exp()).collect();
    let denom = (-m).exp() + ex.iter().sum::<f64>();
    ex.iter().map(|e| bound * e / denom).collect()
}

/// Most-violated-constraint response: zero when every `γ_k ≤ d̂_k`, else
/// `B·e_{k*}` with the lowest index winning ties.
pub fn best_response_lambda(gamma: &[f64], d_hat: &[f64], bound: f64) -> Vec<f64> {
    let mut out = vec![0.0; gamma.len()];
    let mut best: Option<(usize, f64)> = None;
    for (k, (g, d)) in gamma.iter().zip(d_hat).enumerate() {
        let v = g - d;
        if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    if let Some((k, _)) = best {
        out[k] = bound;
    }
    out
}

/// Weighted-classification example for one row: `(|ψ̃|, sign ψ̃)` with
/// `sign(0) = −1`.
pub fn lagrangian_weights<N: Nuisance + ?Sized>(
    ds: &Dataset,
    row: usize,
    eta: &N,
    lambda: &[f64],
    sys: &ConstraintSystem,
    cost: &CostSpec,
    kind: PseudoKind,
) -> Result<(f64, i8)> {
    check_lambda(sys, lambda)?;
    let counts = sys.event_counts(ds)?;
    let q = eta.own(ds, row);
    let w = effective_weights(sys, lambda);
    let n = ds.n() as f64;
    let mut psi = pseudo_outcome(ds, row, &q, cost, kind);
    for (j, m) in sys.moments.iter().enumerate() {
        let (slope, _) = m.affine_at(ds.obs(row).a, row, &q);
        psi -= w[j] * slope * n / counts[j] as f64;
    }
    Ok((psi.abs(), if psi > 0.0 { 1 } else { -1 }))
}

fn check_lambda(sys: &ConstraintSystem, lambda: &[f64]) -> Result<()> {
    if lambda.len() != sys.k() {
        return Err(Error::Domain(format!("expected {} multipliers, got {}", sys.k(), lambda.len())));
    }
    Ok(())
}

/// `λᵀM`.
fn effective_weights(sys: &ConstraintSystem, lambda: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; sys.j()];
    for (l, row) in lambda.iter().zip(&sys.matrix) {
        for (wj, m) in w.iter_mut().zip(row) {
            *wj += l * m;
        }
    }
    w
}

/// A deterministic best response.
#[derive(Debug, Clone, PartialEq)]
pub struct BestResponse {
    pub policy: PolicySpec,
    /// Decision per unit of the problem.
    pub decisions: Vec<bool>,
    pub beta: Option<Vec<f64>>,
    pub converged: bool,
}

/// Linear pieces of the Lagrangian.
#[derive(Debug, Clone, PartialEq)]
struct Profile {
    /// `E_n[ψ π_1]`.
    gain: f64,
    moments: Vec<f64>,
}

/// Value, moments and constraint levels of a policy on the problem data.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEvaluation {
    pub value: f64,
    pub moments: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// Empirical saddle-point problem: every quantity is affine in the
/// per-unit recommendation probabilities.
#[derive(Debug, Clone)]
pub struct RedfairProblem {
    n: usize,
    matrix: Vec<Vec<f64>>,
    d_hat: Vec<f64>,
    slack: Vec<f64>,
    counts: Vec<usize>,
    psi: Vec<f64>,
    /// `slope[j][i]`, zero outside the event.
    slope: Vec<Vec<f64>>,
    intercept: Vec<Vec<f64>>,
    base_value: f64,
    keys: Vec<CellKey>,
    features: Vec<Vec<f64>>,
    unit_psi: Vec<f64>,
    /// `unit_slope[u][j] = Σ_{i∈u} slope_ij / n_j`.
    unit_slope: Vec<Vec<f64>>,
    intercept_mean: Vec<f64>,
}

impl RedfairProblem {
    pub fn new<N: Nuisance + ?Sized>(
        ds: &Dataset,
        sys: &ConstraintSystem,
        eta: &N,
        cost: &CostSpec,
        kind: PseudoKind,
        slack_constant: f64,
        alpha: f64,
    ) -> Result<Self> {
        if ds.n() == 0 {
            return Err(Error::EmptyDataset);
        }
        let counts = sys.event_counts(ds)?;
        let slack = sys.slack(&counts, slack_constant, alpha);
        let d_hat: Vec<f64> = sys.bound.iter().zip(&slack).map(|(d, e)| d + e).collect();
        // (ψ, baseline, per-moment (slope, intercept)) for each row.
        #[allow(clippy::type_complexity)]
        let rows: Vec<(f64, f64, Vec<(f64, f64)>)> = (0..ds.n())
            .into_par_iter()
            .map(|i| {
                let q = eta.own(ds, i);
                let a = ds.obs(i).a;
                let moments = sys.moments.iter().map(|m| m.affine_at(a, i, &q)).collect();
                (pseudo_outcome(ds, i, &q, cost, kind), baseline_score(ds, i, &q, cost, kind), moments)
            })
            .collect();
        let n = ds.n();
        let j = sys.j();
        let mut psi = Vec::with_capacity(n);
        let mut base = Vec::with_capacity(n);
        let mut slope = vec![Vec::with_capacity(n); j];
        let mut intercept = vec![Vec::with_capacity(n); j];
        for (p, b, m) in rows {
            psi.push(p);
            base.push(b);
            for (jj, (s, c)) in m.into_iter().enumerate() {
                slope[jj].push(s);
                intercept[jj].push(c);
            }
        }

        let mut index: BTreeMap<CellKey, usize> = BTreeMap::new();
        let mut keys = Vec::new();
        let mut features = Vec::new();
        let mut unit_psi = Vec::new();
        let mut unit_slope: Vec<Vec<f64>> = Vec::new();
        for i in 0..n {
            let key = ds.cell_key(i);
            let u = *index.entry(key.clone()).or_insert_with(|| {
                let o = ds.obs(i);
                keys.push(key);
                features.push(linear_features(&o.x, o.a, ds.n_groups()));
                unit_psi.push(0.0);
                unit_slope.push(vec![0.0; j]);
                keys.len() - 1
            });
            unit_psi[u] += psi[i] / n as f64;
            for jj in 0..j {
                unit_slope[u][jj] += slope[jj][i] / counts[jj] as f64;
            }
        }
        let intercept_mean = (0..j)
            .map(|jj| crate::util::pairwise_sum(&intercept[jj]) / counts[jj] as f64)
            .collect();

        Ok(RedfairProblem {
            n,
            matrix: sys.matrix.clone(),
            d_hat,
            slack,
            counts,
            psi,
            slope,
            intercept,
            base_value: crate::util::mean(&base),
            keys,
            features,
            unit_psi,
            unit_slope,
            intercept_mean,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.d_hat.len()
    }

    pub fn units(&self) -> usize {
        self.keys.len()
    }

    /// `d + ε`.
    pub fn d_hat(&self) -> &[f64] {
        &self.d_hat
    }

    pub fn slack(&self) -> &[f64] {
        &self.slack
    }

    pub fn event_counts(&self) -> &[usize] {
        &self.counts
    }

    fn weights(&self, lambda: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; self.counts.len()];
        for (l, row) in lambda.iter().zip(&self.matrix) {
            for (wj, m) in w.iter_mut().zip(row) {
                *wj += l * m;
            }
        }
        w
    }

    /// `ψ̃_i = ψ_i − Σ_j (λᵀM)_j slope_ij / p_j`.
    pub fn row_weight(&self, row: usize, lambda: &[f64]) -> f64 {
        let w = self.weights(lambda);
        let mut v = self.psi[row];
        for (jj, wj) in w.iter().enumerate() {
            v -= wj * self.slope[jj][row] * self.n as f64 / self.counts[jj] as f64;
        }
        v
    }

    /// Per-unit `Σ_{i∈u} ψ̃_i / n`.
    pub fn unit_scores(&self, lambda: &[f64]) -> Vec<f64> {
        let w = self.weights(lambda);
        self.unit_psi
            .iter()
            .zip(&self.unit_slope)
            .map(|(p, s)| p - w.iter().zip(s).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    fn unit_profile(&self, q: &[f64]) -> Profile {
        let gain = self.unit_psi.iter().zip(q).map(|(p, v)| p * v).sum();
        let moments = (0..self.counts.len())
            .map(|jj| self.intercept_mean[jj] + self.unit_slope.iter().zip(q).map(|(s, v)| s[jj] * v).sum::<f64>())
            .collect();
        Profile { gain, moments }
    }

    fn row_profile(&self, q: &[f64]) -> Profile {
        let n = self.n as f64;
        let gain = self.psi.iter().zip(q).map(|(p, v)| p * v / n).sum();
        let moments = (0..self.counts.len())
            .map(|jj| {
                let total: f64 = (0..self.n).map(|i| self.slope[jj][i] * q[i] + self.intercept[jj][i]).sum();
                total / self.counts[jj] as f64
            })
            .collect();
        Profile { gain, moments }
    }

    fn gamma(&self, moments: &[f64]) -> Vec<f64> {
        self.matrix
            .iter()
            .map(|row| row.iter().zip(moments).map(|(m, h)| m * h).sum())
            .collect()
    }

    fn lagrangian(&self, p: &Profile, lambda: &[f64]) -> f64 {
        let gamma = self.gamma(&p.moments);
        -p.gain + lambda.iter().zip(gamma.iter().zip(&self.d_hat)).map(|(l, (g, d))| l * (g - d)).sum::<f64>()
    }

    fn evaluation(&self, p: &Profile) -> PolicyEvaluation {
        PolicyEvaluation { value: self.base_value + p.gain, gamma: self.gamma(&p.moments), moments: p.moments.clone() }
    }

    /// Per-row recommendation probabilities of `pi` on `ds`.
    fn row_probs<P: Policy + ?Sized, N: Nuisance + ?Sized>(&self, ds: &Dataset, eta: &N, pi: &P) -> Result<Vec<f64>> {
        if ds.n() != self.n {
            return Err(Error::Domain("dataset does not match the problem".into()));
        }
        let table = NuisanceTable::build(ds, eta);
        Ok((0..ds.n()).into_par_iter().map(|i| pi.prob_recommend(&table.input(ds, i))).collect())
    }

    /// Evaluates any policy on the problem data.
    pub fn evaluate<P: Policy + ?Sized, N: Nuisance + ?Sized>(&self, ds: &Dataset, eta: &N, pi: &P) -> Result<PolicyEvaluation> {
        let q = self.row_probs(ds, eta, pi)?;
        Ok(self.evaluation(&self.row_profile(&q)))
    }

    /// `L(π, λ) = −E_n[ψ π_1] + λᵀ(M ĥ(π) − d̂)`.
    pub fn lagrangian_of<P: Policy + ?Sized, N: Nuisance + ?Sized>(
        &self,
        ds: &Dataset,
        eta: &N,
        pi: &P,
        lambda: &[f64],
    ) -> Result<f64> {
        let q = self.row_probs(ds, eta, pi)?;
        Ok(self.lagrangian(&self.row_profile(&q), lambda))
    }

    /// Saddle gap of `(Q, λ)` recomputed from scratch.
    #[allow(clippy::too_many_arguments)]
    pub fn gap_of<P: Policy + ?Sized, N: Nuisance + ?Sized>(
        &self,
        ds: &Dataset,
        eta: &N,
        pi: &P,
        lambda: &[f64],
        bound: f64,
        class: PolicyClass,
        opts: &OptimOptions,
    ) -> Result<f64> {
        let q = self.row_probs(ds, eta, pi)?;
        Ok(self.gap(&self.row_profile(&q), lambda, bound, class, None, opts).0)
    }

    /// Returns the gap and the best-response coefficients at `lambda`.
    fn gap(
        &self,
        p: &Profile,
        lambda: &[f64],
        bound: f64,
        class: PolicyClass,
        warm: Option<&[f64]>,
        opts: &OptimOptions,
    ) -> (f64, Option<Vec<f64>>) {
        let l = self.lagrangian(p, lambda);
        let br = self.best_response(lambda, class, warm, opts);
        let l_low = self.lagrangian(&self.unit_profile(&as_probs(&br.decisions)), lambda);
        let gamma = self.gamma(&p.moments);
        let worst = gamma.iter().zip(&self.d_hat).map(|(g, d)| g - d).fold(0.0_f64, f64::max);
        let l_high = -p.gain + bound * worst;
        ((l - l_low).max(l_high - l).max(0.0), br.beta)
    }

    /// Cost-sensitive best response to `lambda`.
    pub fn best_response(&self, lambda: &[f64], class: PolicyClass, warm: Option<&[f64]>, opts: &OptimOptions) -> BestResponse {
        let scores = self.unit_scores(lambda);
        match class {
            PolicyClass::Tabular => {
                let decisions: Vec<bool> = scores.iter().map(|s| *s > 0.0).collect();
                let table = self.keys.iter().cloned().zip(decisions.iter().copied()).collect();
                BestResponse { policy: PolicySpec::Tabular { table, default: false }, decisions, beta: None, converged: true }
            }
            PolicyClass::Linear => {
                let dim = self.features.first().map_or(1, Vec::len);
                let total: f64 = scores.iter().map(|s| s.abs()).sum();
                let (beta, converged) = if total > 0.0 {
                    let loss = Surrogate {
                        features: &self.features,
                        weight: scores.iter().map(|s| s.abs() / total).collect(),
                        positive: scores.iter().map(|s| *s > 0.0).collect(),
                        ridge: SURROGATE_RIDGE,
                    };
                    let x0 = warm.map_or_else(|| vec![0.0; dim], <[f64]>::to_vec);
                    let r = minimize(&loss, x0, opts);
                    (r.x, r.converged)
                } else {
                    (vec![0.0; dim], true)
                };
                let decisions = self
                    .features
                    .iter()
                    .map(|f| f.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() > 0.0)
                    .collect();
                BestResponse { policy: PolicySpec::LinearIndex { beta: beta.clone() }, decisions, beta: Some(beta), converged }
            }
        }
    }

    /// Exponentiated-gradient saddle-point loop.
    pub fn solve(&self, params: &RedfairParams) -> Result<SaddleResult> {
        params.validate()?;
        let k = self.k();
        let units = self.units();
        let nu = params.gap_target_for(self.n);
        let mut theta = vec![0.0; k];
        let mut lambda_sum = vec![0.0; k];
        let mut q_sum = vec![0.0; units];
        let mut components: Vec<(usize, PolicySpec)> = Vec::new();
        let mut seen: HashMap<Vec<bool>, usize> = HashMap::new();
        let mut warm_t: Option<Vec<f64>> = None;
        let mut warm_bar: Option<Vec<f64>> = None;
        let mut step = params.step;
        let mut br_converged = true;
        let mut trace = Vec::new();
        let mut t = 0;
        let mut gap = f64::INFINITY;
        let mut lambda_bar = vec![0.0; k];
        let mut profile_bar = self.unit_profile(&q_sum);
        while t < params.max_iter {
            t += 1;
            let lambda = multipliers(&theta, params.bound);
            let br = self.best_response(&lambda, params.class, warm_t.as_deref(), &params.optim);
            br_converged &= br.converged;
            warm_t = br.beta.clone();
            let violation: Vec<f64> = self
                .gamma(&self.unit_profile(&as_probs(&br.decisions)).moments)
                .iter()
                .zip(&self.d_hat)
                .map(|(g, d)| g - d)
                .collect();
            for (s, d) in q_sum.iter_mut().zip(&br.decisions) {
                *s += if *d { 1.0 } else { 0.0 };
            }
            for (s, l) in lambda_sum.iter_mut().zip(&lambda) {
                *s += l;
            }
            match seen.get(&br.decisions) {
                Some(&c) => components[c].0 += 1,
                None => {
                    seen.insert(br.decisions.clone(), components.len());
                    components.push((1, br.policy));
                }
            }
            let tf = t as f64;
            lambda_bar = lambda_sum.iter().map(|s| s / tf).collect();
            profile_bar = self.unit_profile(&q_sum.iter().map(|s| s / tf).collect::<Vec<_>>());
            let (g, beta) = self.gap(&profile_bar, &lambda_bar, params.bound, params.class, warm_bar.as_deref(), &params.optim);
            gap = g;
            warm_bar = beta;
            let done = gap <= nu;
            if t == 1 || t % params.trace_stride == 0 || done || t == params.max_iter {
                trace.push(TraceRow {
                    iter: t,
                    lambda: lambda.clone(),
                    gap,
                    value: self.base_value + profile_bar.gain,
                    violations: self.gamma(&profile_bar.moments).iter().zip(&self.d_hat).map(|(g, d)| g - d).collect(),
                });
            }
            if done {
                break;
            }
            let w = *step.get_or_insert_with(|| {
                let xi = violation.iter().map(|v| v.abs()).fold(0.0_f64, f64::max);
                let xi = if xi > 0.0 { xi } else { 1.0 };
                ((k as f64 + 1.0).ln() / params.max_iter as f64).sqrt() / xi
            });
            for (th, v) in theta.iter_mut().zip(&violation) {
                *th += (1.0 + w * v).max(1e-12).ln();
            }
        }
        let policy = mixture(components, t)?;
        let eval = self.evaluation(&profile_bar);
        Ok(SaddleResult {
            policy,
            lambda: lambda_bar,
            gap,
            gap_target: nu,
            converged: gap <= nu,
            best_response_converged: br_converged,
            iterations: t,
            step: step.unwrap_or(0.0),
            value: eval.value,
            moments: eval.moments,
            gamma: eval.gamma,
            d_hat: self.d_hat.clone(),
            slack: self.slack.clone(),
            trace,
        })
    }
}

const SURROGATE_RIDGE: f64 = 1e-6;

fn as_probs(d: &[bool]) -> Vec<f64> {
    d.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect()
}

/// Iterate counts to mixture weights; the largest weight absorbs rounding.
fn mixture(components: Vec<(usize, PolicySpec)>, total: usize) -> Result<RandomizedPolicy> {
    let mut weighted: Vec<(f64, PolicySpec)> =
        components.into_iter().map(|(c, p)| (c as f64 / total as f64, p)).collect();
    let big = (0..weighted.len())
        .max_by(|a, b| weighted[*a].0.total_cmp(&weighted[*b].0).then(b.cmp(a)))
        .expect("at least one iterate");
    let rest: f64 = weighted.iter().enumerate().filter(|(i, _)| *i != big).map(|(_, c)| c.0).sum();
    weighted[big].0 = 1.0 - rest;
    RandomizedPolicy::new(weighted)
}

/// `Σ w_u ℓ(β·f_u, s_u) + ridge/2 ‖β‖²` with
/// `ℓ(g, s) = 2 log(1 + e^g) − (s + 1) g`.
struct Surrogate<'a> {
    features: &'a [Vec<f64>],
    weight: Vec<f64>,
    positive: Vec<bool>,
    ridge: f64,
}

impl Objective for Surrogate<'_> {
    fn dim(&self) -> usize {
        self.features.first().map_or(1, Vec::len)
    }

    fn eval(&self, x: &[f64], mut grad: Option<&mut [f64]>, mut hess: Option<&mut [f64]>) -> f64 {
        let d = x.len();
        let mut f = 0.5 * self.ridge * x.iter().map(|v| v * v).sum::<f64>();
        if let Some(g) = grad.as_deref_mut() {
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi = self.ridge * xi;
            }
        }
        if let Some(h) = hess.as_deref_mut() {
            h.fill(0.0);
            for i in 0..d {
                h[i * d + i] = self.ridge;
            }
        }
        for ((feat, w), pos) in self.features.iter().zip(&self.weight).zip(&self.positive) {
            if *w == 0.0 {
                continue;
            }
            let z: f64 = feat.iter().zip(x).map(|(a, b)| a * b).sum();
            let s = sigmoid(z);
            f += w * 2.0 * if *pos { softplus(-z) } else { softplus(z) };
            if let Some(g) = grad.as_deref_mut() {
                let dz = 2.0 * if *pos { s - 1.0 } else { s };
                for (gi, fi) in g.iter_mut().zip(feat) {
                    *gi += w * dz * fi;
                }
            }
            if let Some(h) = hess.as_deref_mut() {
                let c = w * 2.0 * s * (1.0 - s);
                for a in 0..d {
                    for b in 0..d {
                        h[a * d + b] += c * feat[a] * feat[b];
                    }
                }
            }
        }
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    /// Multipliers played at this iteration.
    pub lambda: Vec<f64>,
    pub gap: f64,
    /// Value of the running average policy.
    pub value: f64,
    /// `γ_k − d̂_k` of the running average policy.
    pub violations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddleResult {
    pub policy: RandomizedPolicy,
    /// Averaged multipliers.
    pub lambda: Vec<f64>,
    pub gap: f64,
    pub gap_target: f64,
    /// `gap ≤ gap_target`.
    pub converged: bool,
    /// False when some surrogate fit hit its iteration cap.
    pub best_response_converged: bool,
    pub iterations: usize,
    pub step: f64,
    /// Empirical value of the returned policy.
    pub value: f64,
    pub moments: Vec<f64>,
    /// `M ĥ(Q̂)`.
    pub gamma: Vec<f64>,
    pub d_hat: Vec<f64>,
    pub slack: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

impl SaddleResult {
    /// `max_k (γ_k − d̂_k)`, or 0 without constraints.
    pub fn max_violation(&self) -> f64 {
        self.gamma.iter().zip(&self.d_hat).map(|(g, d)| g - d).fold(f64::NEG_INFINITY, f64::max).max(0.0)
    }

    pub fn trace_csv(&self) -> String {
        let k = self.lambda.len();
        let mut s = String::from("iter");
        for i in 0..k {
            let _ = write!(s, ",lambda_{i}");
        }
        s.push_str(",gap,value");
        for i in 0..k {
            let _ = write!(s, ",violation_{i}");
        }
        s.push('\n');
        for r in &self.trace {
            let _ = write!(s, "{}", r.iter);
            if k > 0 {
                let _ = write!(s, ",{}", join_f64(&r.lambda));
            }
            let _ = write!(s, ",{},{}", r.gap, r.value);
            if k > 0 {
                let _ = write!(s, ",{}", join_f64(&r.violations));
            }
            s.push('\n');
        }
        s
    }
}

/// Exact or surrogate best response to fixed multipliers.
#[allow(clippy::too_many_arguments)]
pub fn best_response_policy<N: Nuisance + ?Sized>(
    ds: &Dataset,
    eta: &N,
    sys: &ConstraintSystem,
    cost: &CostSpec,
    kind: PseudoKind,
    class: PolicyClass,
    lambda: &[f64],
    opts: &OptimOptions,
) -> Result<BestResponse> {
    check_lambda(sys, lambda)?;
    let problem = RedfairProblem::new(ds, sys, eta, cost, kind, 0.0, 0.5)?;
    Ok(problem.best_response(lambda, class, None, opts))
}

/// Reductions saddle-point solver for `M h(π) ≤ d`.
pub fn redfair<N: Nuisance + ?Sized>(
    ds: &Dataset,
    sys: &ConstraintSystem,
    eta: &N,
    cost: &CostSpec,
    params: &RedfairParams,
) -> Result<SaddleResult> {
    params.validate()?;
    let problem = RedfairProblem::new(ds, sys, eta, cost, params.pseudo, params.slack_constant, params.alpha)?;
    problem.solve(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{generate, DgpSpec, OracleNuisance};
    use crate::redfair::constraints::{make_disparity_constraint, make_treatment_parity};

    fn spec() -> DgpSpec {
        DgpSpec::parse(
            "outcome = bernoulli\n\
             0.15 0 a 0.5 0.8 0.2 0.7 0.3\n\
             0.15 1 a 0.5 0.6 0.4 0.5 0.45\n\
             0.20 0 b 0.5 0.5 0.3 0.6 0.2\n\
             0.10 1 b 0.5 0.9 0.1 0.4 0.35\n\
             0.25 2 a 0.5 0.7 0.1 0.6 0.55\n\
             0.15 2 b 0.5 0.3 0.2 0.8 0.1\n",
        )
        .unwrap()
    }

    #[test]
    fn first_multiplier() {
        assert_eq!(multipliers(&[0.0], 2.0), vec![1.0]);
        let l = multipliers(&[800.0, 799.0], 3.0);
        assert!(l.iter().all(|v| v.is_finite()) && l.iter().sum::<f64>() <= 3.0);
    }

    #[test]
    fn lambda_response() {
        assert_eq!(best_response_lambda(&[0.1, 0.3], &[0.0, 0.0], 2.0), vec![0.0, 2.0]);
        assert_eq!(best_response_lambda(&[0.2, 0.2], &[0.0, 0.0], 1.0), vec![1.0, 0.0]);
        assert_eq!(best_response_lambda(&[-0.1, 0.0], &[0.0, 0.0], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_multipliers_give_pseudo_outcome() {
        let s = spec();
        let ds = generate(&s, 500, 1).unwrap();
        let eta = s.oracle();
        let sys = make_treatment_parity(ds.group_set(), 0.05).unwrap();
        let cost = CostSpec::default();
        for i in 0..20 {
            let (w, l) = lagrangian_weights(&ds, i, &eta, &[0.0; 4], &sys, &cost, PseudoKind::Dr).unwrap();
            let psi = pseudo_outcome(&ds, i, &eta.own(&ds, i), &cost, PseudoKind::Dr);
            assert!((w - psi.abs()).abs() < 1e-15);
            assert_eq!(l, if psi > 0.0 { 1 } else { -1 });
        }
    }

    #[test]
    fn weights_agree_with_problem() {
        let s = spec();
        let ds = generate(&s, 400, 2).unwrap();
        let eta = s.oracle();
        let sys = make_treatment_parity(ds.group_set(), 0.05).unwrap();
        let cost = CostSpec::default();
        let lam = [0.2, 0.0, 0.1, 0.3];
        let p = RedfairProblem::new(&ds, &sys, &eta, &cost, PseudoKind::Dm, 0.0, 0.5).unwrap();
        for i in 0..30 {
            let (w, l) = lagrangian_weights(&ds, i, &eta, &lam, &sys, &cost, PseudoKind::Dm).unwrap();
            let v = p.row_weight(i, &lam);
            assert!((w * l as f64 - v).abs() < 1e-12);
        }
    }

    #[test]
    fn unconstrained_is_one_best_response() {
        let s = spec();
        let ds = generate(&s, 800, 3).unwrap();
        let eta = s.oracle();
        let sys = ConstraintSystem::unconstrained();
        let cost = CostSpec::default();
        let r = redfair(&ds, &sys, &eta, &cost, &RedfairParams::default()).unwrap();
        let br = best_response_policy(&ds, &eta, &sys, &cost, PseudoKind::Dm, PolicyClass::Tabular, &[], &OptimOptions::default())
            .unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.gap, 0.0);
        assert_eq!(r.policy, RandomizedPolicy::from(br.policy));
    }

    #[test]
    fn tabular_at_zero_is_threshold() {
        let s = spec();
        let ds = generate(&s, 2000, 4).unwrap();
        let eta = s.oracle();
        let sys = make_treatment_parity(ds.group_set(), 0.05).unwrap();
        let cost = CostSpec::default();
        let br = best_response_policy(&ds, &eta, &sys, &cost, PseudoKind::Dm, PolicyClass::Tabular, &[0.0; 4], &OptimOptions::default())
            .unwrap();
        for i in 0..ds.n() {
            let p = eta.own(&ds, i);
            let want = p.lift() * cost.effect(p.mu1, p.mu0) > 0.0;
            assert_eq!(br.policy.decide(&NuisanceTable::build(&ds, &eta).input(&ds, i)), want);
        }
    }

    #[test]
    fn all_positive_recommends_everyone() {
        let s = spec();
        let ds = generate(&s, 300, 5).unwrap();
        let eta = s.oracle();
        let cost = CostSpec::new(1.0, 0.0, 5.0).unwrap();
        let sys = ConstraintSystem::unconstrained();
        for class in [PolicyClass::Tabular, PolicyClass::Linear] {
            let br = best_response_policy(&ds, &eta, &sys, &cost, PseudoKind::Dm, class, &[], &OptimOptions::default()).unwrap();
            assert!(br.decisions.iter().all(|d| *d), "{class:?}");
            assert!(br.converged);
        }
    }

    #[test]
    fn saddle_gap_matches_post_hoc() {
        let s = spec();
        let ds = generate(&s, 3000, 6).unwrap();
        let eta = s.oracle();
        let sys = make_treatment_parity(ds.group_set(), 0.02).unwrap();
        let cost = CostSpec::default();
        let params = RedfairParams { max_iter: 3000, gap_target: Some(1e-3), bound: 5.0, ..Default::default() };
        let p = RedfairProblem::new(&ds, &sys, &eta, &cost, params.pseudo, params.slack_constant, params.alpha).unwrap();
        let r = p.solve(&params).unwrap();
        let g = p.gap_of(&ds, &eta, &r.policy, &r.lambda, params.bound, params.class, &params.optim).unwrap();
        assert!((g - r.gap).abs() < 1e-9, "{g} vs {}", r.gap);
        assert!(r.lambda.iter().sum::<f64>() <= params.bound + 1e-12);
        let again = p.solve(&params).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn disparity_system_runs() {
        let s = spec();
        let ds = generate(&s, 2000, 7).unwrap();
        let eta = OracleNuisance::new(&s, 0.0);
        let sys = make_disparity_constraint(0.0).unwrap();
        let cost = CostSpec::default();
        let params = RedfairParams {
            max_iter: 20_000,
            gap_target: Some(1e-3),
            slack_constant: 0.0,
            step: Some(0.1),
            bound: 2.0,
            ..Default::default()
        };
        let r = redfair(&ds, &sys, &eta, &cost, &params).unwrap();
        assert!(r.converged, "gap {}", r.gap);
        assert!(r.max_violation() <= (1.0 + 2.0 * 1e-3) / params.bound + 1e-9);
        assert!(r.trace_csv().starts_with("iter,lambda_0,gap,value,violation_0\n"));
    }
}
