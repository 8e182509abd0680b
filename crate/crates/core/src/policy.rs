//! Recommendation policies: deterministic rules and finite mixtures.
//!
//! A policy maps a covariate cell to the probability of recommending
//! (`π_1`). Threshold rules need the nuisance values at the cell for every
//! group, so evaluation goes through [`PolicyInput`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{CellKey, CostSpec};
use crate::error::{Error, Result};
use crate::nuisance::NuisancePoint;
use crate::util::{join_f64, parse_f64_list};

/// Everything a policy may look at for one unit.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInput<'a> {
    pub x: &'a [f64],
    pub group: usize,
    /// Nuisance values at `x`, one entry per group (cross-group evaluation).
    pub points: &'a [NuisancePoint],
    /// `P(A = g | x)`, one entry per group.
    pub membership: &'a [f64],
}

impl PolicyInput<'_> {
    pub fn own(&self) -> &NuisancePoint {
        &self.points[self.group]
    }
}

/// Anything that yields a recommendation probability.
pub trait Policy: Sync {
    fn prob_recommend(&self, input: &PolicyInput<'_>) -> f64;
}

/// Lagrangian threshold rule for two-group take-up parity. The rule
/// recommends iff `gain − penalty·coef > 0`, where `gain = lift·τ + w_r`
/// and `coef = ±lift / P(group)` (plus for the first group).
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdRule {
    pub penalty: f64,
    pub cost: CostSpec,
    pub group_freq: [f64; 2],
    /// Use the group-marginalized score `E[L | x]`, so the rule ignores the
    /// unit's own group.
    pub covariate_only: bool,
}

impl ThresholdRule {
    pub fn gain(&self, p: &NuisancePoint) -> f64 {
        p.lift() * self.cost.effect(p.mu1, p.mu0) + self.cost.w_r
    }

    pub fn coef(&self, p: &NuisancePoint, group: usize) -> f64 {
        match group {
            0 => p.lift() / self.group_freq[0],
            _ => -p.lift() / self.group_freq[1],
        }
    }

    pub fn score(&self, input: &PolicyInput<'_>) -> f64 {
        if self.covariate_only {
            (0..2)
                .map(|g| {
                    let p = &input.points[g];
                    input.membership[g] * (self.gain(p) - self.penalty * self.coef(p, g))
                })
                .sum()
        } else {
            let p = input.own();
            self.gain(p) - self.penalty * self.coef(p, input.group)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    Constant(bool),
    Threshold(ThresholdRule),
    /// `1{β·[1, x, onehot(group ≥ 1)] > 0}`.
    LinearIndex { beta: Vec<f64> },
    /// Per-cell decisions; unknown cells fall back to `default`.
    Tabular { table: BTreeMap<CellKey, bool>, default: bool },
}

/// Feature vector used by linear-index policies: intercept, covariates,
/// then one indicator per non-reference group.
pub fn linear_features(x: &[f64], group: usize, n_groups: usize) -> Vec<f64> {
    let mut f = Vec::with_capacity(1 + x.len() + n_groups.saturating_sub(1));
    f.push(1.0);
    f.extend_from_slice(x);
    for g in 1..n_groups {
        f.push(if group == g { 1.0 } else { 0.0 });
    }
    f
}

pub fn linear_index(beta: &[f64], x: &[f64], group: usize) -> f64 {
    let n_groups = beta.len() - x.len();
    let mut s = beta[0];
    for (b, v) in beta[1..].iter().zip(x) {
        s += b * v;
    }
    if group >= 1 && group < n_groups {
        s += beta[x.len() + group];
    }
    s
}

impl PolicySpec {
    pub fn decide(&self, input: &PolicyInput<'_>) -> bool {
        match self {
            PolicySpec::Constant(r) => *r,
            PolicySpec::Threshold(rule) => rule.score(input) > 0.0,
            PolicySpec::LinearIndex { beta } => linear_index(beta, input.x, input.group) > 0.0,
            PolicySpec::Tabular { table, default } => {
                *table.get(&CellKey::new(input.x, input.group)).unwrap_or(default)
            }
        }
    }
}

impl Policy for PolicySpec {
    fn prob_recommend(&self, input: &PolicyInput<'_>) -> f64 {
        if self.decide(input) {
            1.0
        } else {
            0.0
        }
    }
}

/// Finite mixture of deterministic policies.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomizedPolicy {
    pub components: Vec<(f64, PolicySpec)>,
}

impl From<PolicySpec> for RandomizedPolicy {
    fn from(p: PolicySpec) -> Self {
        RandomizedPolicy { components: vec![(1.0, p)] }
    }
}

impl RandomizedPolicy {
    pub fn new(components: Vec<(f64, PolicySpec)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Domain("a randomized policy needs at least one component".into()));
        }
        if components.iter().any(|(w, _)| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Domain("mixture weights must be finite and nonnegative".into()));
        }
        let total: f64 = components.iter().map(|(w, _)| w).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(RandomizedPolicy { components })
    }

    pub fn deterministic(&self) -> Option<&PolicySpec> {
        match self.components.as_slice() {
            [(_, p)] => Some(p),
            _ => None,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (w, p) in &self.components {
            match p {
                PolicySpec::Constant(r) => {
                    let _ = writeln!(s, "component {w} constant {}", u8::from(*r));
                }
                PolicySpec::LinearIndex { beta } => {
                    let _ = writeln!(s, "component {w} linear {}", join_f64(beta));
                }
                PolicySpec::Threshold(t) => {
                    let _ = writeln!(
                        s,
                        "component {w} threshold {} {} {} {} {} {} {}",
                        t.penalty,
                        t.cost.w_y,
                        t.cost.w_t,
                        t.cost.w_r,
                        t.group_freq[0],
                        t.group_freq[1],
                        u8::from(t.covariate_only)
                    );
                }
                PolicySpec::Tabular { table, default } => {
                    let _ = writeln!(s, "component {w} tabular {}", u8::from(*default));
                    for (k, v) in table {
                        let _ = writeln!(
                            s,
                            "cell {} {} {}",
                            k.group,
                            join_f64(&k.covariates()),
                            u8::from(*v)
                        );
                    }
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Config { line, msg: msg.to_string() };
        let num = |line: usize, t: &str| t.parse::<f64>().map_err(|_| bad(line, "expected a number"));
        let flag = |line: usize, t: &str| match t {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad(line, "expected 0 or 1")),
        };
        let mut comps: Vec<(f64, PolicySpec)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let tok: Vec<&str> = raw.split_whitespace().collect();
            match tok.as_slice() {
                [] => {}
                ["cell", g, x, v] => {
                    let Some((_, PolicySpec::Tabular { table, .. })) = comps.last_mut() else {
                        return Err(bad(line, "cell line outside a tabular component"));
                    };
                    let g: usize = g.parse().map_err(|_| bad(line, "bad group index"))?;
                    let x = parse_f64_list(x).ok_or_else(|| bad(line, "bad covariates"))?;
                    table.insert(CellKey::new(&x, g), flag(line, v)?);
                }
                ["component", w, kind, rest @ ..] => {
                    let w = num(line, w)?;
                    let spec = match (*kind, rest) {
                        ("constant", [r]) => PolicySpec::Constant(flag(line, r)?),
                        ("linear", [b]) => PolicySpec::LinearIndex {
                            beta: parse_f64_list(b).ok_or_else(|| bad(line, "bad coefficients"))?,
                        },
                        ("threshold", [l, wy, wt, wr, pa, pb, c]) => PolicySpec::Threshold(ThresholdRule {
                            penalty: num(line, l)?,
                            cost: CostSpec::new(num(line, wy)?, num(line, wt)?, num(line, wr)?)?,
                            group_freq: [num(line, pa)?, num(line, pb)?],
                            covariate_only: flag(line, c)?,
                        }),
                        ("tabular", [d]) => PolicySpec::Tabular { table: BTreeMap::new(), default: flag(line, d)? },
                        _ => return Err(bad(line, "unrecognized component")),
                    };
                    comps.push((w, spec));
                }
                _ => return Err(bad(line, "unrecognized line")),
            }
        }
        RandomizedPolicy::new(comps)
    }
}

impl Policy for RandomizedPolicy {
    fn prob_recommend(&self, input: &PolicyInput<'_>) -> f64 {
        self.components.iter().map(|(w, p)| w * p.prob_recommend(input)).sum()
    }
}
