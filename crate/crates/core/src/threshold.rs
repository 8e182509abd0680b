//! Threshold policies for the two-group take-up parity program.
//!
//! The program `max E[u(π)]` subject to `E[T(π)|A=a] − E[T(π)|A=b] ≤ ε` is
//! linear in `π_1`. After dualizing the single constraint, the optimal
//! deterministic rule thresholds `gain − λ·coef` pointwise.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{CostSpec, Dataset};
use crate::dgp::DgpSpec;
use crate::error::{Error, Result};
use crate::estimators::{dm_takeup, dm_value, dr_takeup, dr_value};
use crate::nuisance::{Nuisance, NuisancePoint, NuisanceTable};
use crate::policy::{PolicySpec, ThresholdRule};
use crate::util::pairwise_sum;

const LAMBDA_CAP: f64 = 1e6;
const GOLDEN_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-12;

/// `max Σ m·gain·π + base_value` s.t. `Σ m·coef·π + base_constraint ≤ ε`
/// over `π ∈ {0,1}` per point.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearThresholdProblem {
    pub mass: Vec<f64>,
    pub gain: Vec<f64>,
    pub coef: Vec<f64>,
    pub base_value: f64,
    pub base_constraint: f64,
    /// Rule template; the solved penalty is written into a copy.
    pub rule: ThresholdRule,
}

/// Outcome of the dual search.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSolution {
    /// Minimizer of the dual found by golden-section search.
    pub lambda: f64,
    /// Penalty of the returned rule: the smallest one whose policy is
    /// feasible, placed strictly inside its constancy interval.
    pub penalty: f64,
    pub policy: PolicySpec,
    pub value: f64,
    pub disparity: f64,
    pub feasible_range: (f64, f64),
}

fn require_two(n: usize) -> Result<()> {
    if n != 2 {
        return Err(Error::Domain(format!(
            "threshold solutions need exactly two groups (got {n}); use the general constrained solver"
        )));
    }
    Ok(())
}

fn base_utility(p: &NuisancePoint, cost: &CostSpec) -> f64 {
    [true, false]
        .iter()
        .map(|&t| p.p_t_given_r(t, false) * cost.mean_utility(false, t, p.mu(t)))
        .sum()
}

impl LinearThresholdProblem {
    /// Empirical instance: one point per row, group frequencies from the data.
    pub fn from_data<N: Nuisance + ?Sized>(ds: &Dataset, eta: &N, cost: &CostSpec, covariate_only: bool) -> Result<Self> {
        require_two(ds.n_groups())?;
        let f = ds.group_freqs();
        let rule = ThresholdRule { penalty: 0.0, cost: *cost, group_freq: [f[0], f[1]], covariate_only };
        let n = ds.n();
        let table = NuisanceTable::build(ds, eta);
        let mut gain = Vec::with_capacity(n);
        let mut coef = Vec::with_capacity(n);
        let mut base = Vec::with_capacity(n);
        let mut p10 = [Vec::new(), Vec::new()];
        for i in 0..n {
            let a = ds.obs(i).a;
            let pts = table.row_points(i);
            let own = &pts[a];
            base.push(base_utility(own, cost));
            p10[a].push(own.p10);
            if covariate_only {
                let mem = table.row_membership(i);
                gain.push((0..2).map(|g| mem[g] * rule.gain(&pts[g])).sum());
                coef.push((0..2).map(|g| mem[g] * rule.coef(&pts[g], g)).sum());
            } else {
                gain.push(rule.gain(own));
                coef.push(rule.coef(own, a));
            }
        }
        Ok(LinearThresholdProblem {
            mass: vec![1.0 / n as f64; n],
            gain,
            coef,
            base_value: pairwise_sum(&base) / n as f64,
            base_constraint: crate::util::mean(&p10[0]) - crate::util::mean(&p10[1]),
            rule,
        })
    }

    /// Population instance: one point per cell, weighted by cell mass.
    /// The covariate-only variant has one point per distinct covariate value.
    pub fn from_dgp(spec: &DgpSpec, cost: &CostSpec, covariate_only: bool) -> Result<Self> {
        require_two(spec.n_groups())?;
        let freq = [spec.group_mass(0), spec.group_mass(1)];
        let rule = ThresholdRule { penalty: 0.0, cost: *cost, group_freq: freq, covariate_only };
        let eta = spec.oracle();
        let mut p = LinearThresholdProblem {
            mass: Vec::new(),
            gain: Vec::new(),
            coef: Vec::new(),
            base_value: 0.0,
            base_constraint: 0.0,
            rule: rule.clone(),
        };
        for c in spec.cells() {
            let q = c.point();
            p.base_value += c.mass * base_utility(&q, cost);
            let w = if c.group == 0 { 1.0 } else { -1.0 };
            p.base_constraint += w * c.mass / freq[c.group] * q.p10;
            if !covariate_only {
                p.mass.push(c.mass);
                p.gain.push(rule.gain(&q));
                p.coef.push(rule.coef(&q, c.group));
            }
        }
        if covariate_only {
            let mut xs: Vec<&Vec<f64>> = spec.cells().iter().map(|c| &c.x).collect();
            xs.sort_by(|a, b| a.partial_cmp(b).expect("finite covariates"));
            xs.dedup();
            for x in xs {
                let mass: f64 = spec.cells().iter().filter(|c| &c.x == x).map(|c| c.mass).sum();
                let mem: Vec<f64> = (0..2).map(|g| eta.membership_at(x, g)).collect();
                let pts: Vec<NuisancePoint> = (0..2).map(|g| eta.point(x, g)).collect();
                p.mass.push(mass);
                p.gain.push((0..2).map(|g| mem[g] * rule.gain(&pts[g])).sum());
                p.coef.push((0..2).map(|g| mem[g] * rule.coef(&pts[g], g)).sum());
            }
        }
        Ok(p)
    }

    /// `[min, max]` of the constraint over all deterministic policies.
    pub fn constraint_range(&self) -> (f64, f64) {
        let lo: Vec<f64> = self.mass.iter().zip(&self.coef).map(|(m, c)| m * c.min(0.0)).collect();
        let hi: Vec<f64> = self.mass.iter().zip(&self.coef).map(|(m, c)| m * c.max(0.0)).collect();
        (self.base_constraint + pairwise_sum(&lo), self.base_constraint + pairwise_sum(&hi))
    }

    pub fn decision(&self, i: usize, lambda: f64) -> bool {
        self.gain[i] - lambda * self.coef[i] > 0.0
    }

    /// `(value, constraint)` of the threshold policy at `lambda`.
    pub fn evaluate(&self, lambda: f64) -> (f64, f64) {
        let (v, c): (Vec<f64>, Vec<f64>) = (0..self.mass.len())
            .map(|i| {
                if self.decision(i, lambda) {
                    (self.mass[i] * self.gain[i], self.mass[i] * self.coef[i])
                } else {
                    (0.0, 0.0)
                }
            })
            .unzip();
        (self.base_value + pairwise_sum(&v), self.base_constraint + pairwise_sum(&c))
    }

    /// Dual function `Σ m (gain − λ coef)_+ + λ(ε − base_constraint)`.
    pub fn dual(&self, lambda: f64, eps: f64) -> f64 {
        let t: Vec<f64> = (0..self.mass.len())
            .map(|i| self.mass[i] * (self.gain[i] - lambda * self.coef[i]).max(0.0))
            .collect();
        self.base_value + pairwise_sum(&t) + lambda * (eps - self.base_constraint)
    }

    /// Right derivative of the dual.
    fn dual_slope(&self, lambda: f64, eps: f64) -> f64 {
        let t: Vec<f64> = (0..self.mass.len())
            .map(|i| {
                let s = self.gain[i] - lambda * self.coef[i];
                if s > 0.0 || (s == 0.0 && self.coef[i] < 0.0) {
                    -self.mass[i] * self.coef[i]
                } else {
                    0.0
                }
            })
            .collect();
        pairwise_sum(&t) + eps - self.base_constraint
    }

    fn golden_section(&self, eps: f64) -> f64 {
        let mut hi = 1.0;
        while self.dual_slope(hi, eps) < 0.0 && hi < LAMBDA_CAP {
            hi = (hi * 2.0).min(LAMBDA_CAP);
        }
        let (mut a, mut b) = (0.0, hi);
        let r = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - r * (b - a);
        let mut d = a + r * (b - a);
        let (mut fc, mut fd) = (self.dual(c, eps), self.dual(d, eps));
        while b - a > GOLDEN_TOL {
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - r * (b - a);
                fc = self.dual(c, eps);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + r * (b - a);
                fd = self.dual(d, eps);
            }
        }
        let mid = 0.5 * (a + b);
        // The bracket may have collapsed onto the lower end.
        if self.dual(0.0, eps) <= self.dual(mid, eps) {
            0.0
        } else {
            mid
        }
    }

    /// Smallest penalty whose threshold policy satisfies the constraint,
    /// found by sweeping the breakpoints `gain/coef` in increasing order.
    fn smallest_feasible_penalty(&self, eps: f64) -> f64 {
        if self.evaluate(0.0).1 <= eps + FEAS_TOL {
            return 0.0;
        }
        let n = self.mass.len();
        // State just right of zero.
        let mut on: Vec<bool> = (0..n).map(|i| self.gain[i] > 0.0 || (self.gain[i] == 0.0 && self.coef[i] < 0.0)).collect();
        let mut cons = self.base_constraint
            + pairwise_sum(&(0..n).map(|i| if on[i] { self.mass[i] * self.coef[i] } else { 0.0 }).collect::<Vec<_>>());
        let mut events: Vec<(f64, usize)> = (0..n)
            .filter(|&i| self.coef[i] != 0.0)
            .map(|i| (self.gain[i] / self.coef[i], i))
            .filter(|(b, _)| *b > 0.0 && b.is_finite())
            .collect();
        events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut prev = 0.0;
        let mut k = 0;
        loop {
            let next = events.get(k).map(|e| e.0);
            let inside = match next {
                Some(b) => 0.5 * (prev + b),
                None => prev + prev.max(1.0),
            };
            if cons <= eps + FEAS_TOL && self.evaluate(inside).1 <= eps + FEAS_TOL {
                return inside;
            }
            let Some(b) = next else { return inside };
            while k < events.len() && events[k].0 == b {
                let i = events[k].1;
                let now = self.coef[i] < 0.0;
                if on[i] != now {
                    on[i] = now;
                    cons += if now { self.mass[i] * self.coef[i] } else { -self.mass[i] * self.coef[i] };
                }
                k += 1;
            }
            prev = b;
        }
    }

    pub fn solve(&self, eps: f64) -> Result<ThresholdSolution> {
        let range = self.constraint_range();
        if !(eps >= range.0 - FEAS_TOL) {
            return Err(Error::Infeasible { eps, min: range.0, max: range.1 });
        }
        let lambda = self.golden_section(eps);
        let penalty = self.smallest_feasible_penalty(eps);
        let (value, disparity) = self.evaluate(penalty);
        let rule = ThresholdRule { penalty, ..self.rule.clone() };
        Ok(ThresholdSolution {
            lambda,
            penalty,
            policy: PolicySpec::Threshold(rule),
            value,
            disparity,
            feasible_range: range,
        })
    }
}

/// Pointwise Lagrangian in the form
/// `lift·{τ + λ/p(A)·(1{A=a} − 1{A=b})} + λ(p_{1|0}(x,a) − p_{1|0}(x,b)) + w_r`,
/// with `points` holding the nuisances at `x` for both groups.
pub fn lagrangian_l(lambda: f64, points: &[NuisancePoint], group: usize, group_freq: [f64; 2], cost: &CostSpec) -> Result<f64> {
    require_two(points.len())?;
    let p = &points[group];
    let sign = if group == 0 { 1.0 } else { -1.0 };
    let tau = cost.effect(p.mu1, p.mu0);
    Ok(p.lift() * (tau + lambda / group_freq[group] * sign) + lambda * (points[0].p10 - points[1].p10) + cost.w_r)
}

/// Row version of [`lagrangian_l`] with empirical group frequencies.
pub fn lagrangian_l_at<N: Nuisance + ?Sized>(ds: &Dataset, row: usize, eta: &N, cost: &CostSpec, lambda: f64) -> Result<f64> {
    require_two(ds.n_groups())?;
    let pts: Vec<NuisancePoint> = (0..2).map(|g| eta.at_row(ds, row, g)).collect();
    let f = ds.group_freqs();
    lagrangian_l(lambda, &pts, ds.obs(row).a, [f[0], f[1]], cost)
}

pub fn solve_threshold<N: Nuisance + ?Sized>(ds: &Dataset, eta: &N, cost: &CostSpec, eps: f64) -> Result<ThresholdSolution> {
    LinearThresholdProblem::from_data(ds, eta, cost, false)?.solve(eps)
}

pub fn solve_threshold_covariate_only<N: Nuisance + ?Sized>(
    ds: &Dataset,
    eta: &N,
    cost: &CostSpec,
    eps: f64,
) -> Result<ThresholdSolution> {
    LinearThresholdProblem::from_data(ds, eta, cost, true)?.solve(eps)
}

/// Threshold solution on the population of a discrete DGP.
pub fn solve_threshold_population(spec: &DgpSpec, cost: &CostSpec, eps: f64, covariate_only: bool) -> Result<ThresholdSolution> {
    LinearThresholdProblem::from_dgp(spec, cost, covariate_only)?.solve(eps)
}

/// Attainable disparity range over deterministic policies, in closed form.
pub fn feasible_epsilon_range<N: Nuisance + ?Sized>(ds: &Dataset, eta: &N) -> Result<(f64, f64)> {
    Ok(LinearThresholdProblem::from_data(ds, eta, &CostSpec::default(), false)?.constraint_range())
}

pub fn feasible_epsilon_range_population(spec: &DgpSpec) -> Result<(f64, f64)> {
    Ok(LinearThresholdProblem::from_dgp(spec, &CostSpec::default(), false)?.constraint_range())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SweepEstimator {
    #[default]
    Dm,
    Dr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffPoint {
    pub lambda: f64,
    pub value: f64,
    pub value_se: f64,
    pub takeup: [f64; 2],
    pub disparity: f64,
    pub disparity_se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffCurve {
    pub points: Vec<TradeoffPoint>,
    pub eps_grid: Option<Vec<f64>>,
}

impl TradeoffCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,value,value_se,takeup_a,takeup_b,disparity\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{},{},{}", p.lambda, p.value, p.value_se, p.takeup[0], p.takeup[1], p.disparity);
        }
        s
    }
}

/// Evaluates the threshold rule at each penalty in `grid` (strictly
/// increasing).
pub fn sweep<N: Nuisance + ?Sized>(ds: &Dataset, eta: &N, cost: &CostSpec, grid: &[f64]) -> Result<TradeoffCurve> {
    sweep_with(ds, eta, cost, grid, SweepEstimator::Dm)
}

pub fn sweep_with<N: Nuisance + ?Sized>(
    ds: &Dataset,
    eta: &N,
    cost: &CostSpec,
    grid: &[f64],
    estimator: SweepEstimator,
) -> Result<TradeoffCurve> {
    require_two(ds.n_groups())?;
    if grid.is_empty() {
        return Err(Error::Domain("penalty grid is empty".into()));
    }
    if grid.iter().any(|l| !l.is_finite()) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("penalty grid must be finite and strictly increasing".into()));
    }
    let table = NuisanceTable::build(ds, eta);
    let f = ds.group_freqs();
    let points: Vec<Result<TradeoffPoint>> = grid
        .par_iter()
        .map(|&lambda| {
            let pi = PolicySpec::Threshold(ThresholdRule {
                penalty: lambda,
                cost: *cost,
                group_freq: [f[0], f[1]],
                covariate_only: false,
            });
            let (v, ta, tb) = match estimator {
                SweepEstimator::Dm => (
                    dm_value(ds, &pi, &table, cost),
                    dm_takeup(ds, &pi, &table, 0)?,
                    dm_takeup(ds, &pi, &table, 1)?,
                ),
                SweepEstimator::Dr => (
                    dr_value(ds, &pi, &table, cost),
                    dr_takeup(ds, &pi, &table, 0)?,
                    dr_takeup(ds, &pi, &table, 1)?,
                ),
            };
            Ok(TradeoffPoint {
                lambda,
                value: v.point,
                value_se: v.standard_error,
                takeup: [ta.point, tb.point],
                disparity: ta.point - tb.point,
                disparity_se: (ta.standard_error.powi(2) + tb.standard_error.powi(2)).sqrt(),
            })
        })
        .collect();
    Ok(TradeoffCurve { points: points.into_iter().collect::<Result<_>>()?, eps_grid: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{oracle_constrained_optimum, oracle_disparity, oracle_value, random_spec, Cell, OutcomeKind, RandomSpecOptions};

    fn np(p11: f64, p10: f64, mu1: f64, mu0: f64) -> NuisancePoint {
        NuisancePoint { e1: 0.5, p11, p10, mu1, mu0, p1: 0.5 }
    }

    #[test]
    fn lagrangian_by_hand() {
        let pts = [np(0.8, 0.3, 1.0, 0.0), np(0.5, 0.1, 1.0, 0.0)];
        let l = lagrangian_l(0.2, &pts, 0, [0.5, 0.5], &CostSpec::default()).unwrap();
        assert!((l - 0.74).abs() < 1e-12);
        let l0 = lagrangian_l(0.0, &pts, 0, [0.5, 0.5], &CostSpec::default()).unwrap();
        assert!((l0 - 0.5).abs() < 1e-15);
        assert!(lagrangian_l(0.0, &pts[..1], 0, [0.5, 0.5], &CostSpec::default()).is_err());
    }

    #[test]
    fn range_by_hand() {
        let cells = vec![
            Cell { mass: 0.5, x: vec![0.0], group: 0, e1: 0.5, p11: 0.7, p10: 0.2, mu1: 1.0, mu0: 0.0 },
            Cell { mass: 0.5, x: vec![0.0], group: 1, e1: 0.5, p11: 0.4, p10: 0.1, mu1: 1.0, mu0: 0.0 },
        ];
        let spec = DgpSpec::new(cells, vec!["a".into(), "b".into()], OutcomeKind::Bernoulli).unwrap();
        let (lo, hi) = feasible_epsilon_range_population(&spec).unwrap();
        assert!((hi - 0.6).abs() < 1e-12 && (lo + 0.2).abs() < 1e-12);
    }

    #[test]
    fn slack_constraint_gives_zero_penalty() {
        let spec = random_spec(&RandomSpecOptions::default(), 2);
        let (_, hi) = feasible_epsilon_range_population(&spec).unwrap();
        let s = solve_threshold_population(&spec, &CostSpec::default(), hi, false).unwrap();
        assert_eq!(s.penalty, 0.0);
        assert_eq!(s.lambda, 0.0);
    }

    #[test]
    fn infeasible_reports_range() {
        let spec = random_spec(&RandomSpecOptions::default(), 3);
        let (lo, hi) = feasible_epsilon_range_population(&spec).unwrap();
        match solve_threshold_population(&spec, &CostSpec::default(), lo - 0.01, false) {
            Err(Error::Infeasible { min, max, .. }) => assert_eq!((min, max), (lo, hi)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn population_solution_is_feasible_and_close_to_enumeration() {
        let cost = CostSpec { w_y: 1.0, w_t: -0.1, w_r: 0.0 };
        for seed in 0..5 {
            let spec = random_spec(&RandomSpecOptions::default(), seed);
            let (lo, hi) = feasible_epsilon_range_population(&spec).unwrap();
            let eps = lo + 0.5 * (hi - lo);
            let s = solve_threshold_population(&spec, &cost, eps, false).unwrap();
            let d = oracle_disparity(&spec, &s.policy).unwrap();
            assert!(d <= eps + 1e-9);
            assert!((oracle_value(&spec, &s.policy, &cost) - s.value).abs() < 1e-12);
            let (_, best) = oracle_constrained_optimum(&spec, &cost, eps).unwrap();
            assert!(s.value <= best + 1e-12);
        }
    }

    #[test]
    fn dual_is_convex() {
        let spec = random_spec(&RandomSpecOptions::default(), 11);
        let p = LinearThresholdProblem::from_dgp(&spec, &CostSpec::default(), false).unwrap();
        for k in 0..100 {
            let a = (k as f64 * 0.37) % 5.0;
            let b = (k as f64 * 1.13) % 7.0;
            let mid = p.dual(0.5 * (a + b), 0.02);
            assert!(mid <= 0.5 * (p.dual(a, 0.02) + p.dual(b, 0.02)) + 1e-12);
        }
    }

    #[test]
    fn covariate_only_equals_group_aware_when_groups_are_disjoint() {
        let mk = |x: f64, g| Cell { mass: 0.25, x: vec![x], group: g, e1: 0.5, p11: 0.3 + 0.1 * x, p10: 0.1, mu1: 0.9, mu0: 0.2 + 0.05 * x };
        let spec = DgpSpec::new(
            vec![mk(0.0, 0), mk(1.0, 0), mk(2.0, 1), mk(3.0, 1)],
            vec!["a".into(), "b".into()],
            OutcomeKind::Bernoulli,
        )
        .unwrap();
        let (lo, hi) = feasible_epsilon_range_population(&spec).unwrap();
        let eps = 0.5 * (lo + hi);
        let a = solve_threshold_population(&spec, &CostSpec::default(), eps, false).unwrap();
        let b = solve_threshold_population(&spec, &CostSpec::default(), eps, true).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.disparity, b.disparity);
    }
}
