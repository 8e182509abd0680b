//! Value bounds and robust threshold policies when recommendation overlap
//! fails on part of the covariate space.
//!
//! On rows where `P(R=r | x) = 0` the responsivity `q_{1|r}` is not
//! identified. It is only known to lie in an interval, and every bound here
//! optimizes over that interval row by row.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{CellKey, CostSpec, Dataset};
use crate::error::{Error, Result};
use crate::nuisance::{Nuisance, NuisanceTable};
use crate::policy::{Policy, PolicySpec};
use crate::threshold::LinearThresholdProblem;
use crate::util::{mean, pairwise_sum};

/// Which rows fall in the no-overlap region for each recommendation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlapPartition {
    /// `nov[i][r]`: row `i` has `P(R=r | x, a) = 0`.
    pub nov: Vec<[bool; 2]>,
}

impl OverlapPartition {
    pub fn empty(n: usize) -> Self {
        OverlapPartition { nov: vec![[false; 2]; n] }
    }

    pub fn in_overlap(&self, row: usize) -> bool {
        !self.nov[row][0] && !self.nov[row][1]
    }

    pub fn count(&self, r: bool) -> usize {
        self.nov.iter().filter(|v| v[r as usize]).count()
    }

    pub fn is_empty(&self) -> bool {
        self.nov.iter().all(|v| !v[0] && !v[1])
    }
}

/// Flags row `i` as no-overlap for `r` when its `(r, group)` stratum has no
/// observations, or when `threshold > 0` and the predicted `e_r` is at or
/// below `threshold`. With clipped nuisances a clipped prediction equals the
/// clip constant, so the comparison is inclusive.
pub fn detect_overlap<N: Nuisance + ?Sized>(ds: &Dataset, eta: &N, threshold: f64) -> OverlapPartition {
    let g = ds.n_groups();
    let mut seen = vec![[false; 2]; g];
    for o in ds.observations() {
        seen[o.a][o.r as usize] = true;
    }
    let nov = (0..ds.n())
        .map(|i| {
            let a = ds.obs(i).a;
            let p = eta.own(ds, i);
            let mut v = [false; 2];
            for (r, flag) in v.iter_mut().enumerate() {
                let e = p.e(r == 1);
                *flag = !seen[a][r] || (threshold > 0.0 && e <= threshold);
            }
            v
        })
        .collect();
    OverlapPartition { nov }
}

#[derive(Debug, Clone, PartialEq)]
pub enum UncertaintyMode {
    /// Same bounds on every no-overlap row, indexed by `r`.
    Constant { lower: [f64; 2], upper: [f64; 2] },
    /// Per-row bounds, indexed `[row][r]`.
    PerRow { lower: Vec<[f64; 2]>, upper: Vec<[f64; 2]> },
    /// `|q_{1|r}(x′) − p_{1|r}(x)| ≤ L·d(x′, x)`; representable but not solvable here.
    Lipschitz { constant: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintySet {
    pub mode: UncertaintyMode,
    /// Enforce `q_{1|r} ≥ p_{1|r}` on the no-overlap region.
    pub monotone: bool,
}

impl UncertaintySet {
    pub fn constant(lower: f64, upper: f64) -> Self {
        UncertaintySet { mode: UncertaintyMode::Constant { lower: [lower; 2], upper: [upper; 2] }, monotone: false }
    }

    fn bounds(&self, row: usize, r: usize) -> Result<(f64, f64)> {
        let (lo, hi) = match &self.mode {
            UncertaintyMode::Constant { lower, upper } => (lower[r], upper[r]),
            UncertaintyMode::PerRow { lower, upper } => {
                let (Some(l), Some(u)) = (lower.get(row), upper.get(row)) else {
                    return Err(Error::Domain(format!("no bounds for row {}", row + 1)));
                };
                (l[r], u[r])
            }
            UncertaintyMode::Lipschitz { .. } => {
                return Err(Error::UnsupportedMode("Lipschitz sets are not supported by interval solvers".into()))
            }
        };
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Domain(format!("bounds [{lo}, {hi}] must satisfy 0 ≤ lower ≤ upper ≤ 1")));
        }
        Ok((lo, hi))
    }
}

/// Interval for `q_{1|r}` on every row: the bounds on no-overlap rows
/// (floored at `p_{1|r}` under monotonicity), the point `p_{1|r}` elsewhere.
pub fn row_intervals<N: Nuisance + ?Sized>(
    ds: &Dataset,
    eta: &N,
    set: &UncertaintySet,
    part: &OverlapPartition,
) -> Result<Vec<[(f64, f64); 2]>> {
    if part.nov.len() != ds.n() {
        return Err(Error::Domain("overlap partition does not match the dataset".into()));
    }
    (0..ds.n())
        .map(|i| {
            let p = eta.own(ds, i);
            let mut out = [(0.0, 0.0); 2];
            for (r, slot) in out.iter_mut().enumerate() {
                let point = if r == 1 { p.p11 } else { p.p10 };
                *slot = if part.nov[i][r] {
                    let (lo, hi) = set.bounds(i, r)?;
                    if set.monotone {
                        (lo.max(point).min(hi), hi)
                    } else {
                        (lo, hi)
                    }
                } else {
                    (point, point)
                };
            }
            Ok(out)
        })
        .collect()
}

/// Per-row pieces shared by the bounds: `π_1`, `ũ_{00}`, `ũ_{10}`, `τ_u`.
fn row_terms<P: Policy + ?Sized>(ds: &Dataset, pi: &P, table: &NuisanceTable, cost: &CostSpec) -> Vec<(f64, f64, f64, f64)> {
    (0..ds.n())
        .map(|i| {
            let inp = table.input(ds, i);
            let p = inp.own();
            (
                pi.prob_recommend(&inp),
                cost.mean_utility(false, false, p.mu0),
                cost.mean_utility(true, false, p.mu0),
                cost.effect(p.mu1, p.mu0),
            )
        })
        .collect()
}

/// Plug-in value when `q[i][r]` is the responsivity on row `i`.
pub fn extrapolated_value<P, N>(ds: &Dataset, pi: &P, eta: &N, q: &[[f64; 2]], cost: &CostSpec) -> Result<f64>
where
    P: Policy + ?Sized,
    N: Nuisance + ?Sized,
{
    if q.len() != ds.n() {
        return Err(Error::Domain("extrapolation does not match the dataset".into()));
    }
    let table = NuisanceTable::build(ds, eta);
    let terms = row_terms(ds, pi, &table, cost);
    let s: Vec<f64> = terms
        .iter()
        .zip(q)
        .map(|(&(p1, u0, u1, tau), q)| (1.0 - p1) * (u0 + q[0] * tau) + p1 * (u1 + q[1] * tau))
        .collect();
    Ok(mean(&s))
}

/// Take-up disparity (first group minus second) under extrapolation `q`.
pub fn extrapolated_disparity<P, N>(ds: &Dataset, pi: &P, eta: &N, q: &[[f64; 2]]) -> Result<f64>
where
    P: Policy + ?Sized,
    N: Nuisance + ?Sized,
{
    if ds.n_groups() != 2 || q.len() != ds.n() {
        return Err(Error::Domain("disparity needs two groups and one extrapolation per row".into()));
    }
    let table = NuisanceTable::build(ds, eta);
    let mut t = [Vec::new(), Vec::new()];
    for (i, q) in q.iter().enumerate() {
        let p1 = pi.prob_recommend(&table.input(ds, i));
        t[ds.obs(i).a].push(p1 * q[1] + (1.0 - p1) * q[0]);
    }
    Ok(mean(&t[0]) - mean(&t[1]))
}

/// Lower and upper plug-in value over all `q` in the row intervals.
pub fn value_bounds<P, N>(
    ds: &Dataset,
    pi: &P,
    eta: &N,
    set: &UncertaintySet,
    part: &OverlapPartition,
    cost: &CostSpec,
) -> Result<(f64, f64)>
where
    P: Policy + ?Sized,
    N: Nuisance + ?Sized,
{
    let iv = row_intervals(ds, eta, set, part)?;
    let table = NuisanceTable::build(ds, eta);
    let terms = row_terms(ds, pi, &table, cost);
    let (lo, hi): (Vec<f64>, Vec<f64>) = terms
        .iter()
        .zip(&iv)
        .map(|(&(p1, u0, u1, tau), b)| {
            let pick = |(l, h): (f64, f64), up: bool| if (tau >= 0.0) == up { h } else { l };
            let at = |up: bool| (1.0 - p1) * (u0 + pick(b[0], up) * tau) + p1 * (u1 + pick(b[1], up) * tau);
            (at(false), at(true))
        })
        .unzip();
    let n = ds.n() as f64;
    Ok((pairwise_sum(&lo) / n, pairwise_sum(&hi) / n))
}

/// Value interval for binary outcomes when `q_{1|r} ∈ [lower, upper]` on the
/// no-overlap region.
pub fn binary_constant_bound<P, N>(
    ds: &Dataset,
    pi: &P,
    eta: &N,
    lower: f64,
    upper: f64,
    part: &OverlapPartition,
    cost: &CostSpec,
) -> Result<(f64, f64)>
where
    P: Policy + ?Sized,
    N: Nuisance + ?Sized,
{
    if !ds.is_binary_outcome() {
        return Err(Error::Domain("the constant bound needs a binary outcome".into()));
    }
    value_bounds(ds, pi, eta, &UncertaintySet::constant(lower, upper), part, cost)
}

/// Worst-case value in closed form:
/// `Σ_r π_r ũ_{r0} + Σ_r π_r (τ_u·mid_r − ½|τ_u|·width_r)`.
pub fn robust_lp_objective<P, N>(
    ds: &Dataset,
    pi: &P,
    eta: &N,
    set: &UncertaintySet,
    part: &OverlapPartition,
    cost: &CostSpec,
) -> Result<f64>
where
    P: Policy + ?Sized,
    N: Nuisance + ?Sized,
{
    let iv = row_intervals(ds, eta, set, part)?;
    let table = NuisanceTable::build(ds, eta);
    let terms = row_terms(ds, pi, &table, cost);
    let s: Vec<f64> = terms
        .iter()
        .zip(&iv)
        .map(|(&(p1, u0, u1, tau), b)| {
            let adj = |(l, h): (f64, f64)| tau * 0.5 * (l + h) - 0.5 * tau.abs() * (h - l);
            (1.0 - p1) * (u0 + adj(b[0])) + p1 * (u1 + adj(b[1]))
        })
        .collect();
    Ok(mean(&s))
}

/// Robust solution: a per-cell policy and its worst-case metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustSolution {
    pub policy: PolicySpec,
    pub penalty: f64,
    /// Worst-case value (robust objective).
    pub value: f64,
    /// Worst-case disparity.
    pub disparity: f64,
    pub feasible_range: (f64, f64),
}

/// Maximizes the robust objective subject to the worst-case disparity
/// `mean_a[Σ_r π_r upper_r] − mean_b[Σ_r π_r lower_r] ≤ eps`.
pub fn solve_robust_threshold<N: Nuisance + ?Sized>(
    ds: &Dataset,
    eta: &N,
    set: &UncertaintySet,
    part: &OverlapPartition,
    cost: &CostSpec,
    eps: f64,
) -> Result<RobustSolution> {
    if ds.n_groups() != 2 {
        return Err(Error::Domain("robust threshold policies need exactly two groups".into()));
    }
    let iv = row_intervals(ds, eta, set, part)?;
    let f = ds.group_freqs();
    let n = ds.n() as f64;
    // Aggregate rows sharing a covariate cell so the policy is a function of (x, a).
    let mut cells: BTreeMap<CellKey, (f64, f64, f64)> = BTreeMap::new();
    let mut base_v = Vec::with_capacity(ds.n());
    let mut base_c = [Vec::new(), Vec::new()];
    for (i, b) in iv.iter().enumerate() {
        let a = ds.obs(i).a;
        let p = eta.own(ds, i);
        let tau = cost.effect(p.mu1, p.mu0);
        let adj = |(l, h): (f64, f64)| tau * 0.5 * (l + h) - 0.5 * tau.abs() * (h - l);
        base_v.push(cost.mean_utility(false, false, p.mu0) + adj(b[0]));
        let gain = cost.w_r + adj(b[1]) - adj(b[0]);
        let coef = if a == 0 { (b[1].1 - b[0].1) / f[0] } else { -(b[1].0 - b[0].0) / f[1] };
        base_c[a].push(if a == 0 { b[0].1 } else { b[0].0 });
        let e = cells.entry(ds.cell_key(i)).or_insert((0.0, 0.0, 0.0));
        e.0 += 1.0 / n;
        e.1 += gain / n;
        e.2 += coef / n;
    }
    let keys: Vec<CellKey> = cells.keys().cloned().collect();
    let problem = LinearThresholdProblem {
        mass: cells.values().map(|v| v.0).collect(),
        gain: cells.values().map(|v| v.1 / v.0).collect(),
        coef: cells.values().map(|v| v.2 / v.0).collect(),
        base_value: pairwise_sum(&base_v) / n,
        base_constraint: mean(&base_c[0]) - mean(&base_c[1]),
        rule: crate::policy::ThresholdRule {
            penalty: 0.0,
            cost: *cost,
            group_freq: [f[0], f[1]],
            covariate_only: false,
        },
    };
    let sol = problem.solve(eps)?;
    let table = keys
        .into_iter()
        .enumerate()
        .map(|(k, key)| (key, problem.decision(k, sol.penalty)))
        .collect();
    Ok(RobustSolution {
        policy: PolicySpec::Tabular { table, default: false },
        penalty: sol.penalty,
        value: sol.value,
        disparity: sol.disparity,
        feasible_range: sol.feasible_range,
    })
}

/// One line of a bounds export.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsRow {
    pub policy_id: String,
    pub lower: f64,
    pub upper: f64,
    pub eps: Option<f64>,
    pub mode: String,
}

pub fn bounds_csv(rows: &[BoundsRow]) -> String {
    let mut s = String::from("policy_id,lower,upper,eps,mode\n");
    for r in rows {
        let eps = r.eps.map(|e| e.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{}", r.policy_id, r.lower, r.upper, eps, r.mode);
    }
    s
}
